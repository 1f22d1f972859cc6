#include "trv/mim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace trv {

long MaskPlan::masked_count() const {
    return std::count(masked.begin(), masked.end(), true);
}

double MaskPlan::masked_fraction() const {
    return static_cast<double>(masked_count()) / static_cast<double>(masked.size());
}

std::vector<long> MaskPlan::masked_indices() const {
    std::vector<long> idx;
    for (size_t i = 0; i < masked.size(); ++i)
        if (masked[i]) idx.push_back(static_cast<long>(i));
    return idx;
}

MaskPlan blockwise_mask(int grid_h, int grid_w, double ratio, Rng& rng, int min_block) {
    const long area = static_cast<long>(grid_h) * grid_w;
    if (area < min_block)
        throw std::invalid_argument("blockwise_mask: grid area " + std::to_string(area) +
                                    " < min block " + std::to_string(min_block));
    if (ratio <= 0.0 || ratio >= 1.0)
        throw std::invalid_argument("blockwise_mask: ratio must be in (0,1)");

    MaskPlan plan;
    plan.grid_h = grid_h;
    plan.grid_w = grid_w;
    plan.target_ratio = ratio;
    plan.masked.assign(static_cast<size_t>(area), false);

    const long target = static_cast<long>(std::ceil(ratio * static_cast<double>(area)));
    const double log_lo = std::log(0.3), log_hi = std::log(1.0 / 0.3);

    long count = 0;
    while (count < target) {
        const long need = target - count;
        const long max_area = std::max<long>(min_block, need);

        int h = 0, w = 0;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            long a = min_block + static_cast<long>(rng.uniform_int(static_cast<uint64_t>(max_area - min_block + 1)));
            double aspect = std::exp(rng.uniform(log_lo, log_hi));
            int hh = static_cast<int>(std::lround(std::sqrt(a * aspect)));
            int ww = static_cast<int>(std::lround(std::sqrt(a / aspect)));
            hh = std::clamp(hh, 1, grid_h);
            ww = std::clamp(ww, 1, grid_w);
            if (static_cast<long>(hh) * ww >= min_block) {
                h = hh;
                w = ww;
                break;
            }
        }
        if (h == 0) {  // degenerate grid; take the smallest feasible full-height strip
            h = grid_h;
            w = std::min<int>(grid_w, static_cast<int>((min_block + grid_h - 1) / grid_h));
        }

        int r0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(grid_h - h + 1)));
        int c0 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(grid_w - w + 1)));
        for (int r = r0; r < r0 + h; ++r)
            for (int c = c0; c < c0 + w; ++c) {
                size_t i = static_cast<size_t>(r) * grid_w + c;
                if (!plan.masked[i]) {
                    plan.masked[i] = true;
                    ++count;
                }
            }
        plan.rects.push_back({r0, c0, h, w});
    }
    return plan;
}

Tensor corrupt(const Tensor& patch_tokens, const MaskPlan& plan, const Tensor& mask_token) {
    if (patch_tokens.rows() != static_cast<long>(plan.masked.size()))
        throw std::invalid_argument("corrupt: token count " + std::to_string(patch_tokens.rows()) +
                                    " != grid area " + std::to_string(plan.masked.size()));
    if (mask_token.size() != patch_tokens.cols())
        throw std::invalid_argument("corrupt: mask token size != token width");
    Tensor out = patch_tokens;
    Eigen::Map<const Eigen::RowVectorXd> m(mask_token.data(), mask_token.size());
    for (size_t i = 0; i < plan.masked.size(); ++i)
        if (plan.masked[i]) out.mat().row(static_cast<long>(i)) = m;
    return out;
}

Tensor mim_head(const Tensor& features, const Tensor& ln_gamma, const Tensor& ln_beta,
                const Tensor& proj_w, const Tensor& proj_b, double eps) {
    Tensor normed = layer_norm(features, ln_gamma, ln_beta, eps);
    Tensor out = matmul(normed, proj_w);
    Eigen::Map<const Eigen::RowVectorXd> b(proj_b.data(), proj_b.size());
    out.mat().rowwise() += b;
    return out;
}

double neg_cosine_loss(const Tensor& pred, const Tensor& target, const MaskPlan& plan,
                       double eps) {
    if (!pred.same_shape(target))
        throw std::invalid_argument("neg_cosine_loss: shape mismatch " + shape_str(pred.shape()) +
                                    " vs " + shape_str(target.shape()));
    const auto idx = plan.masked_indices();
    if (idx.empty()) throw std::invalid_argument("neg_cosine_loss: mask plan has no masked positions");
    double total = 0;
    for (long i : idx) {
        double s = pred.mat().row(i).dot(target.mat().row(i));
        double denom = pred.mat().row(i).norm() * target.mat().row(i).norm() + eps;
        total += -s / denom;
    }
    return total / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------

OptimizerState OptimizerState::init(const ParamStore& params, AdamWConfig hp) {
    OptimizerState s;
    s.hp = hp;
    for (const auto& name : params.names()) {
        s.m.emplace_back(params.at(name).shape());
        s.v.emplace_back(params.at(name).shape());
    }
    return s;
}

bool decay_exempt(const std::string& name) {
    auto ends_with = [&](const std::string& suf) {
        return name.size() >= suf.size() &&
               name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    return ends_with("gamma") || ends_with("beta") || ends_with("bias") || ends_with(".bq") ||
           ends_with(".bk") || ends_with(".bv") || ends_with(".bo") || name == "mask_token" ||
           name == "cls_token" || name == "pos_embed" || ends_with("rel_bias");
}

void adamw_step(OptimizerState& state, ParamStore& params, const std::vector<Tensor>& grads,
                double lr) {
    if (lr < 0) throw std::invalid_argument("adamw_step: lr must be >= 0");
    const auto& names = params.names();
    if (grads.size() != names.size())
        throw std::invalid_argument("adamw_step: gradient count mismatch");
    state.step += 1;
    const double b1 = state.hp.beta1, b2 = state.hp.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (size_t p = 0; p < names.size(); ++p) {
        Tensor& param = params.at(names[p]);
        const Tensor& g = grads[p];
        if (!param.same_shape(g))
            throw std::invalid_argument("adamw_step: grad shape mismatch for " + names[p]);
        if (!g.all_finite())
            throw std::runtime_error("adamw_step: non-finite gradient for " + names[p] +
                                     " at step " + std::to_string(state.step));
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        // decoupled decay before the Adam delta
        if (!decay_exempt(names[p]) && state.hp.weight_decay > 0.0)
            param.vec() *= (1.0 - lr * state.hp.weight_decay);
        m.vec() = b1 * m.vec() + (1.0 - b1) * g.vec();
        v.vec().array() = b2 * v.vec().array() + (1.0 - b2) * g.vec().array().square();
        param.vec().array() -=
            lr * (m.vec().array() / bc1) / ((v.vec().array() / bc2).sqrt() + state.hp.eps);
    }
}

double cosine_lr(long step, const LrSchedule& sched) {
    if (step < 0 || step > sched.total_steps)
        throw std::invalid_argument("cosine_lr: step outside [0, total_steps]");
    if (sched.warmup_steps > 0 && step < sched.warmup_steps)
        return sched.peak_lr * static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
    if (sched.total_steps == sched.warmup_steps) return sched.peak_lr;
    double t = static_cast<double>(step - sched.warmup_steps) /
               static_cast<double>(sched.total_steps - sched.warmup_steps);
    return sched.floor_lr + 0.5 * (sched.peak_lr - sched.floor_lr) * (1.0 + std::cos(M_PI * t));
}

double layerwise_lr(double base, double decay, int group, int num_groups) {
    if (group < 0 || group >= num_groups)
        throw std::invalid_argument("layerwise_lr: group " + std::to_string(group) +
                                    " outside [0," + std::to_string(num_groups) + ")");
    if (decay <= 0.0 || decay > 1.0)
        throw std::invalid_argument("layerwise_lr: decay must be in (0,1]");
    return base * std::pow(decay, static_cast<double>(num_groups - 1 - group));
}

int param_group(const std::string& name, int depth) {
    if (name.rfind("blocks.", 0) == 0) return 1 + std::stoi(name.substr(7));
    if (name.rfind("head.", 0) == 0) return depth + 1;
    return 0;  // patch embed, tokens, pos embed
}

void ema_update(ParamStore& ema, const ParamStore& params, double alpha) {
    if (alpha < 0.0 || alpha >= 1.0)
        throw std::invalid_argument("ema_update: alpha must be in [0,1)");
    for (const auto& name : params.names()) {
        Tensor& e = ema.at(name);
        const Tensor& p = params.at(name);
        if (!e.same_shape(p)) throw std::invalid_argument("ema_update: shape mismatch for " + name);
        e.vec() = alpha * e.vec() + (1.0 - alpha) * p.vec();
    }
}

// ---------------------------------------------------------------------------

Tensor SynthTeacher::features(long sample_id, int tokens) const {
    Tensor out({tokens, dim_});
    uint64_t base = mix_seed(seed_, static_cast<uint64_t>(sample_id));
    for (long i = 0; i < out.size(); ++i)
        out[i] = 2.0 * bits_to_unit(splitmix64(base + static_cast<uint64_t>(i) + 1)) - 1.0;
    return out;
}

StepMetrics pretrain_step(const TrVConfig& cfg, ParamStore& params, const RopeTable* rope_table,
                          const Batch& batch, const TeacherOracle& teacher, OptimizerState& opt,
                          const LrSchedule& sched, double mask_ratio, long step, uint64_t seed) {
    if (batch.sample_ids.empty() || batch.sample_ids.size() != batch.patches.size())
        throw std::invalid_argument("pretrain_step: empty or inconsistent batch");
    if (!cfg.mask_token_enabled)
        throw std::invalid_argument("pretrain_step: mask token disabled in config");
    if (teacher.feature_dim() != cfg.teacher_dim)
        throw std::invalid_argument("pretrain_step: teacher dim != config teacher_dim");

    Rng rng(mix_seed(seed, static_cast<uint64_t>(step)));
    const auto positions = grid_positions(cfg.grid_h, cfg.grid_w);

    Tape tape;
    BoundParams bound = bind_params(tape, params);
    Value mask_token = bound.at("mask_token");
    Value pe_w = bound.at("patch_embed.weight");
    Value pe_b = bound.at("patch_embed.bias");

    std::vector<Value> losses;
    long total_masked = 0;
    const bool training = cfg.drop_path_rate > 0.0;

    for (size_t s = 0; s < batch.sample_ids.size(); ++s) {
        MaskPlan plan = blockwise_mask(cfg.grid_h, cfg.grid_w, mask_ratio, rng);
        DropPathPlan dp = sample_drop_path(cfg, rng);
        const auto masked_idx = plan.masked_indices();
        total_masked += static_cast<long>(masked_idx.size());

        Value raw = tape.leaf(batch.patches[s]);
        Value embedded = tape.add_rowvec(tape.matmul(raw, pe_w), pe_b);
        Value corrupted = tape.replace_rows(embedded, mask_token, masked_idx);
        Value feats = encoder_forward(tape, cfg, corrupted, bound, positions, rope_table,
                                      training ? &dp : nullptr);
        Value normed = tape.layer_norm(feats, bound.at("head.ln.gamma"), bound.at("head.ln.beta"),
                                       cfg.ln_eps);
        Value pred = tape.add_rowvec(tape.matmul(normed, bound.at("head.proj.weight")),
                                     bound.at("head.proj.bias"));
        Value pred_masked = tape.select_rows(pred, masked_idx);

        Tensor targets = teacher.features(batch.sample_ids[s], cfg.tokens());
        Tensor target_masked({static_cast<long>(masked_idx.size()), cfg.teacher_dim});
        for (size_t i = 0; i < masked_idx.size(); ++i)
            target_masked.mat().row(static_cast<long>(i)) = targets.mat().row(masked_idx[i]);
        losses.push_back(tape.neg_cosine_sum(pred_masked, std::move(target_masked)));
    }

    Value total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
    Value loss = tape.scale(total, 1.0 / static_cast<double>(total_masked));

    std::vector<Tensor> grads = tape.gradient(loss, bound.values);
    double lr = cosine_lr(step, sched);
    adamw_step(opt, params, grads, lr);

    StepMetrics m;
    m.step = step;
    m.loss = tape.value(loss).item();
    m.lr = lr;
    m.masked_fraction = static_cast<double>(total_masked) /
                        static_cast<double>(batch.sample_ids.size() * cfg.tokens());
    return m;
}

}  // namespace trv
