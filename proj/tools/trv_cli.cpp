// Command-line front end: pretraining runs, gradient checks, analytic
// parameter/MAC accounting, mask statistics, checkpoint inspection.

#include "trv/io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace trv;

namespace {

int cmd_pretrain(RunConfig cfg, const std::string& resume_path, long ckpt_every) {
    if (!cfg.seed_set) {
        std::cerr << "pretrain: --seed is required\n";
        return 2;
    }
    fs::create_directories(cfg.out_dir);
    Trainer trainer(cfg);
    if (!resume_path.empty()) trainer.resume(resume_path);

    std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl",
                          resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!metrics) {
        std::cerr << "pretrain: cannot write metrics in " << cfg.out_dir << "\n";
        return 1;
    }

    while (trainer.steps_done() < cfg.total_steps) {
        auto t0 = std::chrono::steady_clock::now();
        StepMetrics m = trainer.step();
        double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        metrics << metrics_line(m, wall_ms) << "\n";
        if (ckpt_every > 0 && trainer.steps_done() % ckpt_every == 0)
            trainer.save((fs::path(cfg.out_dir) / "checkpoint.trvc").string());
    }
    trainer.save((fs::path(cfg.out_dir) / "checkpoint.trvc").string());
    std::cout << "done: " << trainer.steps_done() << " steps, checkpoint in " << cfg.out_dir
              << "\n";
    return 0;
}

int cmd_gradcheck(int depth, int width, int heads, int grid) {
    TrVConfig cfg;
    cfg.depth = depth;
    cfg.width = width;
    cfg.num_heads = heads;
    cfg.grid_h = cfg.grid_w = grid;
    cfg.patch_size = 2;
    cfg.teacher_dim = 16;
    cfg.drop_path_rate = 0.0;
    cfg.validate();

    Rng rng(7);
    ParamStore params = init_params(cfg, rng);
    RopeTable rope(cfg.grid_h, cfg.grid_w, cfg.head_dim(), cfg.rope_base);
    SynthTeacher teacher(1, cfg.teacher_dim);
    auto data = synth_dataset(3, 1, cfg.tokens(), cfg.patch_dim());
    Rng mask_rng(11);
    MaskPlan plan = blockwise_mask(cfg.grid_h, cfg.grid_w, 0.4, mask_rng);
    Tensor targets = teacher.features(0, cfg.tokens());
    auto positions = grid_positions(cfg.grid_h, cfg.grid_w);
    auto masked_idx = plan.masked_indices();
    Tensor target_masked({static_cast<long>(masked_idx.size()), cfg.teacher_dim});
    for (size_t i = 0; i < masked_idx.size(); ++i)
        target_masked.mat().row(static_cast<long>(i)) = targets.mat().row(masked_idx[i]);

    auto loss_on = [&](const std::vector<Tensor>& values) {
        ParamStore p2;
        for (size_t i = 0; i < params.names().size(); ++i)
            p2.add(params.names()[i], values[i]);
        Tape tape;
        BoundParams bound = bind_params(tape, p2);
        Value raw = tape.leaf(data[0]);
        Value emb = tape.add_rowvec(tape.matmul(raw, bound.at("patch_embed.weight")),
                                    bound.at("patch_embed.bias"));
        Value cor = tape.replace_rows(emb, bound.at("mask_token"), masked_idx);
        Value feats = encoder_forward(tape, cfg, cor, bound, positions, &rope);
        Value normed = tape.layer_norm(feats, bound.at("head.ln.gamma"), bound.at("head.ln.beta"),
                                       cfg.ln_eps);
        Value pred = tape.add_rowvec(tape.matmul(normed, bound.at("head.proj.weight")),
                                     bound.at("head.proj.bias"));
        Value loss = tape.scale(
            tape.neg_cosine_sum(tape.select_rows(pred, masked_idx), target_masked),
            1.0 / static_cast<double>(masked_idx.size()));
        return std::make_pair(std::move(tape), loss);
    };

    std::vector<Tensor> values;
    for (const auto& n : params.names()) values.push_back(params.at(n));

    auto [tape, loss] = loss_on(values);
    std::vector<Value> leaves;
    for (size_t i = 0; i < values.size(); ++i) leaves.push_back(Value{static_cast<int>(i)});
    std::vector<Tensor> analytic = tape.gradient(loss, leaves);

    auto f = [&](const std::vector<Tensor>& v) {
        auto [t, l] = loss_on(v);
        return t.value(l).item();
    };
    // h balances truncation against cancellation noise on near-zero grads
    std::vector<Tensor> numeric = finite_diff_grad(f, values, 1e-4);

    double err = max_rel_err(analytic, numeric);
    std::cout << "max relative error: " << err << "\n";
    if (err >= 1e-4) {
        std::cerr << "gradcheck FAILED (threshold 1e-4)\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TrV encoder and masked-feature pretraining toolkit"};
    app.require_subcommand(1);

    RunConfig cfg;
    std::string config_path, resume_path;
    long ckpt_every = 0;
    std::vector<std::string> overrides;

    auto* pre = app.add_subcommand("pretrain", "run masked pretraining on synthetic data");
    pre->add_option("--config", config_path, "key=value or JSON config file");
    uint64_t seed_val = 0;
    auto* seed_opt = pre->add_option("--seed", seed_val, "run seed (required)");
    pre->add_option("--set", overrides, "extra key=value overrides")->take_all();
    pre->add_option("--resume", resume_path, "checkpoint to resume from");
    pre->add_option("--ckpt-every", ckpt_every, "checkpoint interval in steps");

    int gc_depth = 2, gc_width = 16, gc_heads = 2, gc_grid = 4;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training gradient");
    gc->add_option("--depth", gc_depth);
    gc->add_option("--width", gc_width);
    gc->add_option("--heads", gc_heads);
    gc->add_option("--grid", gc_grid);

    std::string preset = "b";
    auto* cp = app.add_subcommand("count-params", "analytic parameter count for a preset");
    cp->add_option("--preset", preset, "ti, s, b, or l");

    std::string mp_preset = "b";
    long n_tokens = 196;
    auto* cm = app.add_subcommand("count-macs", "analytic multiply-accumulate count");
    cm->add_option("--preset", mp_preset, "ti, s, b, or l");
    cm->add_option("--tokens", n_tokens, "token count (default 196)");

    long ms_n = 10000;
    int ms_grid = 14;
    double ms_ratio = 0.4;
    uint64_t ms_seed = 0;
    auto* ms = app.add_subcommand("mask-stats", "sample mask plans and report statistics");
    ms->add_option("--n", ms_n, "number of plans");
    ms->add_option("--grid", ms_grid, "square grid extent");
    ms->add_option("--ratio", ms_ratio, "target mask ratio");
    ms->add_option("--seed", ms_seed);

    std::string ckpt_path;
    auto* ic = app.add_subcommand("inspect-ckpt", "list checkpoint entries");
    ic->add_option("path", ckpt_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) {
            if (!config_path.empty()) cfg = load_config(config_path);
            if (seed_opt->count() > 0) {
                cfg.seed = seed_val;
                cfg.seed_set = true;
            }
            for (const auto& kv : overrides) {
                size_t eq = kv.find('=');
                if (eq == std::string::npos) {
                    std::cerr << "expected key=value, got '" << kv << "'\n";
                    return 2;
                }
                apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            }
            return cmd_pretrain(std::move(cfg), resume_path, ckpt_every);
        }
        if (gc->parsed()) return cmd_gradcheck(gc_depth, gc_width, gc_heads, gc_grid);
        if (cp->parsed()) {
            std::cout << count_params(TrVConfig::preset(preset)) << "\n";
            return 0;
        }
        if (cm->parsed()) {
            std::cout << count_macs(TrVConfig::preset(mp_preset), n_tokens) << "\n";
            return 0;
        }
        if (ms->parsed()) {
            Rng rng(ms_seed);
            double sum = 0, mn = 1, mx = 0;
            for (long i = 0; i < ms_n; ++i) {
                MaskPlan plan = blockwise_mask(ms_grid, ms_grid, ms_ratio, rng);
                double f = plan.masked_fraction();
                sum += f;
                mn = std::min(mn, f);
                mx = std::max(mx, f);
            }
            std::cout << "plans: " << ms_n << "  mean fraction: " << sum / ms_n
                      << "  min: " << mn << "  max: " << mx << "\n";
            return 0;
        }
        if (ic->parsed()) {
            Checkpoint ckpt = load_checkpoint(ckpt_path);
            for (const auto& e : ckpt.entries)
                std::cout << e.name << "  " << shape_str(e.tensor.shape()) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
