#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trv/arch.hpp"
#include "trv/rng.hpp"

#include <cmath>
#include <cstring>

using namespace trv;

namespace {

Tensor random_tensor(std::vector<long> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (long i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

// small encoder config used by several cases
TrVConfig tiny_config() {
    TrVConfig cfg;
    cfg.depth = 1;
    cfg.width = 8;
    cfg.num_heads = 2;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    cfg.patch_size = 2;
    cfg.teacher_dim = 4;
    return cfg;
}

ParamStore zero_params(const TrVConfig& cfg) {
    ParamStore store;
    for (const auto& [name, shape] : param_shapes(cfg)) store.add(name, Tensor::zeros(shape));
    return store;
}

long long ffn_param_count(const TrVConfig& cfg) {
    long long total = 0;
    for (const auto& [name, shape] : param_shapes(cfg)) {
        if (name.find(".ffn.") == std::string::npos) continue;
        long long n = 1;
        for (long d : shape) n *= d;
        total += n;
    }
    return total;
}

}  // namespace

TEST_CASE("ffn hidden dims for the preset widths") {
    CHECK(ffn_hidden_dim(192, FfnType::kSwiglu) == 512);
    CHECK(ffn_hidden_dim(384, FfnType::kSwiglu) == 1024);
    CHECK(ffn_hidden_dim(768, FfnType::kSwiglu) == 2048);
    CHECK(ffn_hidden_dim(1024, FfnType::kSwiglu) == 2730);
    CHECK(ffn_hidden_dim(768, FfnType::kMlp) == 3072);
    CHECK_THROWS_AS(ffn_hidden_dim(0, FfnType::kMlp), std::invalid_argument);
}

TEST_CASE("config validation") {
    TrVConfig cfg = tiny_config();
    cfg.num_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.width = 12;
    cfg.num_heads = 2;  // head_dim 6, not a multiple of 4 under rope2d
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.pos_embed = PosEmbed::kAbsPe;
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("mlp ffn hand values and gradient") {
    Tape tape;
    Value x0 = tape.leaf(Tensor::zeros({2, 3}));
    Value w1 = tape.leaf(Tensor::full({3, 5}, 0.7));
    Value w2 = tape.leaf(Tensor::full({5, 3}, -0.3));
    const Tensor& y0 = tape.value(mlp_ffn(tape, x0, w1, w2));
    for (long i = 0; i < y0.size(); ++i) CHECK(y0[i] == 0.0);

    Value one = tape.leaf(Tensor::row({1.0}));
    Value a = tape.leaf(Tensor::row({1.0}));
    Value b = tape.leaf(Tensor::row({1.0}));
    CHECK(tape.value(mlp_ffn(tape, one, a, b))[0] == doctest::Approx(0.8413447).epsilon(1e-6));

    Rng rng(11);
    Tensor xt = random_tensor({2, 4}, rng), w1t = random_tensor({4, 6}, rng),
           w2t = random_tensor({6, 4}, rng);
    Tape t2;
    std::vector<Value> leaves = {t2.leaf(xt), t2.leaf(w1t), t2.leaf(w2t)};
    auto analytic = t2.gradient(t2.sum(mlp_ffn(t2, leaves[0], leaves[1], leaves[2])), leaves);
    auto f = [](const std::vector<Tensor>& p) {
        Tape t;
        return t.value(t.sum(mlp_ffn(t, t.leaf(p[0]), t.leaf(p[1]), t.leaf(p[2])))).item();
    };
    CHECK(max_rel_err(analytic, finite_diff_grad(f, {xt, w1t, w2t})) < 1e-4);
}

TEST_CASE("swiglu ffn hand values and gradient") {
    Tape tape;
    Value x0 = tape.leaf(Tensor::zeros({1, 2}));
    Value u = tape.leaf(Tensor::full({2, 3}, 1.0));
    Value v = tape.leaf(Tensor::full({2, 3}, 1.0));
    Value w = tape.leaf(Tensor::full({3, 2}, 1.0));
    const Tensor& y0 = tape.value(swiglu_ffn(tape, x0, u, v, w));
    for (long i = 0; i < y0.size(); ++i) CHECK(y0[i] == 0.0);

    // 1x1: silu(1) * 1 * 1
    Value one = tape.leaf(Tensor::row({1.0}));
    Value s = tape.leaf(Tensor::row({1.0}));
    CHECK(tape.value(swiglu_ffn(tape, one, s, s, s))[0] ==
          doctest::Approx(0.7310586).epsilon(1e-6));

    Rng rng(12);
    Tensor xt = random_tensor({3, 4}, rng), ut = random_tensor({4, 5}, rng),
           vt = random_tensor({4, 5}, rng), wt = random_tensor({5, 4}, rng),
           gt = random_tensor({5}, rng), bt = random_tensor({5}, rng);
    auto run = [&](const std::vector<Tensor>& p, Tape& t, std::vector<Value>& lv) {
        lv = {t.leaf(p[0]), t.leaf(p[1]), t.leaf(p[2]), t.leaf(p[3]), t.leaf(p[4]), t.leaf(p[5])};
        return t.sum(swiglu_ffn(t, lv[0], lv[1], lv[2], lv[3],
                                std::make_pair(lv[4], lv[5]), 1e-6));
    };
    Tape t2;
    std::vector<Value> lv;
    Value loss = run({xt, ut, vt, wt, gt, bt}, t2, lv);
    auto analytic = t2.gradient(loss, lv);
    auto f = [&](const std::vector<Tensor>& p) {
        Tape t;
        std::vector<Value> l;
        return t.value(run(p, t, l)).item();
    };
    CHECK(max_rel_err(analytic, finite_diff_grad(f, {xt, ut, vt, wt, gt, bt})) < 1e-4);
}

TEST_CASE("swiglu matches mlp ffn params exactly at base width") {
    TrVConfig sw = TrVConfig::preset("b");
    sw.norm_scheme = NormScheme::kPreLn;  // no inner-LN affine params
    TrVConfig ml = sw;
    ml.ffn_type = FfnType::kMlp;
    ml.ffn_hidden = 3072;
    sw.ffn_hidden = 2048;
    CHECK(ffn_param_count(sw) == ffn_param_count(ml));
    CHECK(ffn_param_count(sw) == 12LL * 3 * 768 * 2048);
    CHECK(count_params(sw) == count_params(ml));
}

TEST_CASE("single-token attention reduces to the value path") {
    TrVConfig cfg = tiny_config();
    cfg.grid_h = cfg.grid_w = 1;
    cfg.pos_embed = PosEmbed::kNone;
    Rng rng(13);
    ParamStore store = init_params(cfg, rng);
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Tensor x = random_tensor({1, 8}, rng);
    Value out = mhsa(tape, cfg, tape.leaf(x), bound, 0, nullptr, {{0, 0}});

    // softmax over one key is 1, so out = (x Wv + bv) Wo + bo
    Tensor v = matmul(x, store.at("blocks.0.attn.wv"));
    v.mat().row(0) += store.at("blocks.0.attn.bv").vec().transpose();
    Tensor expect = matmul(v, store.at("blocks.0.attn.wo"));
    expect.mat().row(0) += store.at("blocks.0.attn.bo").vec().transpose();
    for (long i = 0; i < 8; ++i)
        CHECK(tape.value(out)[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("zero query/key weights give uniform attention") {
    TrVConfig cfg = tiny_config();
    cfg.grid_h = 1;
    cfg.grid_w = 2;
    cfg.pos_embed = PosEmbed::kNone;
    Rng rng(14);
    ParamStore store = init_params(cfg, rng);
    store.at("blocks.0.attn.wq").vec().setZero();
    store.at("blocks.0.attn.wk").vec().setZero();
    store.at("blocks.0.attn.bq").vec().setZero();
    store.at("blocks.0.attn.bk").vec().setZero();

    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Tensor x = random_tensor({2, 8}, rng);
    Value out = mhsa(tape, cfg, tape.leaf(x), bound, 0, nullptr, {{0, 0}, {0, 1}});

    Tensor v = matmul(x, store.at("blocks.0.attn.wv"));
    for (long r = 0; r < 2; ++r) v.mat().row(r) += store.at("blocks.0.attn.bv").vec().transpose();
    Tensor mean({1, 8});
    mean.mat().row(0) = 0.5 * (v.mat().row(0) + v.mat().row(1));
    Tensor expect = matmul(mean, store.at("blocks.0.attn.wo"));
    expect.mat().row(0) += store.at("blocks.0.attn.bo").vec().transpose();
    for (long r = 0; r < 2; ++r)
        for (long i = 0; i < 8; ++i)
            CHECK(tape.value(out).mat()(r, i) == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("rope attention depends only on relative positions") {
    TrVConfig cfg = tiny_config();
    cfg.grid_h = cfg.grid_w = 8;
    Rng rng(15);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(8, 8, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({3, 8}, rng);

    auto run = [&](std::vector<GridPos> pos) {
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        return tape.value(mhsa(tape, cfg, tape.leaf(x), bound, 0, &table, std::move(pos)));
    };
    Tensor a = run({{1, 1}, {1, 2}, {2, 1}});
    Tensor b = run({{4, 3}, {4, 4}, {5, 3}});
    for (long i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
}

TEST_CASE("zero-weight block is the identity for pre-LN and sub-LN") {
    for (NormScheme scheme : {NormScheme::kPreLn, NormScheme::kSubLn}) {
        TrVConfig cfg = tiny_config();
        cfg.norm_scheme = scheme;
        ParamStore store = zero_params(cfg);
        RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
        Rng rng(16);
        Tensor x = random_tensor({4, 8}, rng);
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        Value y = trv_block(tape, cfg, tape.leaf(x), bound, 0, &table, grid_positions(2, 2));
        for (long i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
    }
}

TEST_CASE("pre-LN and sub-LN agree iff the FFN inner LN is dead") {
    TrVConfig sub = tiny_config();
    sub.norm_scheme = NormScheme::kSubLn;
    TrVConfig pre = sub;
    pre.norm_scheme = NormScheme::kPreLn;

    Rng rng(17);
    ParamStore ps = init_params(sub, rng);  // superset: has ffn.ln.*
    ParamStore pp;
    for (const auto& [name, shape] : param_shapes(pre)) pp.add(name, ps.at(name));
    RopeTable table = build_rope_table(2, 2, sub.head_dim(), sub.rope_base);
    Tensor x = random_tensor({4, 8}, rng);

    auto run = [&](const TrVConfig& cfg, ParamStore& store) {
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        return tape.value(
            trv_block(tape, cfg, tape.leaf(x), bound, 0, &table, grid_positions(2, 2)));
    };
    // generic weights: the inner LN changes the FFN branch
    Tensor ys = run(sub, ps);
    Tensor yp = run(pre, pp);
    double diff = (ys.vec() - yp.vec()).cwiseAbs().maxCoeff();
    CHECK(diff > 1e-6);

    // dead FFN output projection: the branches coincide
    ps.at("blocks.0.ffn.w").vec().setZero();
    pp.at("blocks.0.ffn.w").vec().setZero();
    Tensor ys0 = run(sub, ps);
    Tensor yp0 = run(pre, pp);
    CHECK((ys0.vec() - yp0.vec()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("post-LN block ends in a normalized state") {
    TrVConfig cfg = tiny_config();
    cfg.norm_scheme = NormScheme::kPostLn;
    Rng rng(18);
    ParamStore store = init_params(cfg, rng);
    store.at("blocks.0.ln2.gamma").vec().setConstant(1.0);
    store.at("blocks.0.ln2.beta").vec().setZero();
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({4, 8}, rng);
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Tensor y = tape.value(
        trv_block(tape, cfg, tape.leaf(x), bound, 0, &table, grid_positions(2, 2)));
    for (long r = 0; r < 4; ++r) {
        double mean = y.mat().row(r).mean();
        double var = (y.mat().row(r).array() - mean).square().mean();
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("drop_path identity cases and Monte Carlo scaling") {
    Rng rng(19);
    Tensor x = random_tensor({2, 4}, rng);
    Tensor a = drop_path(x, 0.0, true, rng);
    for (long i = 0; i < x.size(); ++i) CHECK(a[i] == x[i]);
    Tensor b = drop_path(x, 0.7, false, rng);
    for (long i = 0; i < x.size(); ++i) CHECK(b[i] == x[i]);
    CHECK_THROWS_AS(drop_path(x, 1.0, true, rng), std::invalid_argument);

    long kept = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        Tensor y = drop_path(x, 0.5, true, rng);
        if (y[0] != 0.0) {
            ++kept;
            CHECK(y[0] == doctest::Approx(2.0 * x[0]).epsilon(1e-12));
        } else {
            CHECK(y.vec().cwiseAbs().maxCoeff() == 0.0);
        }
    }
    double frac = static_cast<double>(kept) / trials;
    CHECK(frac > 0.48);
    CHECK(frac < 0.52);
}

TEST_CASE("drop-path plan at rate zero keeps every branch") {
    TrVConfig cfg = tiny_config();
    cfg.depth = 3;
    Rng rng(20);
    DropPathPlan plan = sample_drop_path(cfg, rng);
    REQUIRE(plan.branch_scale.size() == 3);
    for (const auto& pair : plan.branch_scale)
        for (double s : pair) CHECK(s == 1.0);
}

TEST_CASE("a fully dropped plan makes the block the identity") {
    TrVConfig cfg = tiny_config();
    cfg.drop_path_rate = 0.5;
    Rng rng(21);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({4, 8}, rng);
    DropPathPlan plan;
    plan.branch_scale = {{0.0, 0.0}};
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Value y = trv_block(tape, cfg, tape.leaf(x), bound, 0, &table, grid_positions(2, 2), &plan);
    for (long i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
}

TEST_CASE("xavier init std") {
    // analytic: sqrt(2 / (fan_in + fan_out))
    Rng rng(22);
    Tensor t = init_xavier_normal({400, 400}, rng);
    double mean = t.vec().mean();
    double std = std::sqrt((t.vec().array() - mean).square().mean());
    CHECK(std == doctest::Approx(std::sqrt(2.0 / 800.0)).epsilon(0.02));
    CHECK(std::abs(mean) < 1e-3);
    CHECK(std::sqrt(2.0 / (768.0 + 768.0)) == doctest::Approx(0.036084).epsilon(1e-4));
    CHECK_THROWS_AS(init_xavier_normal({4}, rng), std::invalid_argument);
}

TEST_CASE("beit init rescales residual projections") {
    TrVConfig cfg = tiny_config();
    cfg.width = 64;
    cfg.num_heads = 4;
    cfg.init_scheme = InitScheme::kBeitStyle;
    Rng rng(23);
    ParamStore store = init_params(cfg, rng);

    auto stddev = [](const Tensor& t) {
        double m = t.vec().mean();
        return std::sqrt((t.vec().array() - m).square().mean());
    };
    // block 0: residual projections divided by sqrt(2 * (0 + 1))
    double ratio = stddev(store.at("blocks.0.attn.wq")) / stddev(store.at("blocks.0.attn.wo"));
    CHECK(ratio == doctest::Approx(std::sqrt(2.0)).epsilon(0.1));
    // biases and LN betas start at zero, gammas at one
    CHECK(store.at("blocks.0.attn.bq").vec().cwiseAbs().maxCoeff() == 0.0);
    CHECK(store.at("blocks.0.ln1.gamma").vec().minCoeff() == 1.0);
}

TEST_CASE("depth-zero encoder is the identity") {
    TrVConfig cfg = tiny_config();
    cfg.depth = 0;
    Rng rng(24);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({4, 8}, rng);
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Value y = encoder_forward(tape, cfg, tape.leaf(x), bound, grid_positions(2, 2), &table);
    for (long i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
}

TEST_CASE("encoder rejects a wrong token count") {
    TrVConfig cfg = tiny_config();
    Rng rng(25);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tape tape;
    BoundParams bound = bind_params(tape, store);
    Value x = tape.leaf(Tensor::zeros({3, 8}));
    CHECK_THROWS_WITH_AS(
        encoder_forward(tape, cfg, x, bound, grid_positions(2, 2), &table),
        doctest::Contains("4 tokens"), std::invalid_argument);
}

TEST_CASE("encoder forward is deterministic") {
    TrVConfig cfg = tiny_config();
    cfg.depth = 2;
    Rng rng(26);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({4, 8}, rng);
    auto run = [&]() {
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        return tape.value(
            encoder_forward(tape, cfg, tape.leaf(x), bound, grid_positions(2, 2), &table));
    };
    Tensor a = run(), b = run();
    CHECK(std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * sizeof(double)) == 0);
}

TEST_CASE("permutation equivariance without positional information") {
    TrVConfig cfg = tiny_config();
    cfg.pos_embed = PosEmbed::kNone;
    Rng rng(27);
    ParamStore store = init_params(cfg, rng);
    Tensor x = random_tensor({4, 8}, rng);
    std::vector<long> perm = {2, 0, 3, 1};
    Tensor xp({4, 8});
    for (long r = 0; r < 4; ++r) xp.mat().row(r) = x.mat().row(perm[static_cast<size_t>(r)]);

    auto run = [&](const Tensor& in) {
        Tape tape;
        BoundParams bound = bind_params(tape, store);
        return tape.value(
            encoder_forward(tape, cfg, tape.leaf(in), bound, grid_positions(2, 2), nullptr));
    };
    Tensor y = run(x), yp = run(xp);
    for (long r = 0; r < 4; ++r) {
        double diff =
            (yp.mat().row(r) - y.mat().row(perm[static_cast<size_t>(r)])).cwiseAbs().maxCoeff();
        CHECK(diff < 1e-10);
    }
}

TEST_CASE("preset parameter counts") {
    CHECK(count_params(TrVConfig::preset("ti")) == 5650432);
    CHECK(count_params(TrVConfig::preset("s")) == 21916672);
    CHECK(count_params(TrVConfig::preset("b")) == 86299648);
    CHECK(count_params(TrVConfig::preset("l")) == 303924192);
}

TEST_CASE("mac counts") {
    CHECK(count_macs(TrVConfig::preset("b"), 196) == 17443786752LL);
    CHECK(count_macs(TrVConfig::preset("l"), 196) == 61186621440LL);
    CHECK(count_macs(TrVConfig::preset("b"), 0) == 0);
    CHECK_THROWS_AS(count_macs(TrVConfig::preset("b"), -1), std::invalid_argument);
}

TEST_CASE("tiny encoder gradient check") {
    TrVConfig cfg = tiny_config();
    Rng rng(28);
    ParamStore store = init_params(cfg, rng);
    RopeTable table = build_rope_table(2, 2, cfg.head_dim(), cfg.rope_base);
    Tensor x = random_tensor({4, 8}, rng);

    std::vector<Tensor> packed;
    for (const auto& name : store.names()) packed.push_back(store.at(name));
    packed.push_back(x);

    auto run = [&](const std::vector<Tensor>& p, Tape& tape, std::vector<Value>& leaves) {
        BoundParams bound;
        for (size_t i = 0; i < store.names().size(); ++i) {
            Value v = tape.leaf(p[i]);
            bound.names.push_back(store.names()[i]);
            bound.values.push_back(v);
            bound.by_name.emplace(store.names()[i], v);
        }
        Value xin = tape.leaf(p.back());
        leaves = bound.values;
        leaves.push_back(xin);
        return tape.sum(
            tape.gelu(encoder_forward(tape, cfg, xin, bound, grid_positions(2, 2), &table)));
    };

    Tape tape;
    std::vector<Value> leaves;
    Value loss = run(packed, tape, leaves);
    auto analytic = tape.gradient(loss, leaves);
    auto f = [&](const std::vector<Tensor>& p) {
        Tape t;
        std::vector<Value> lv;
        return t.value(run(p, t, lv)).item();
    };
    // h balances truncation against cancellation noise on near-zero grads
    auto numeric = finite_diff_grad(f, packed, 1e-4);
    CHECK(max_rel_err(analytic, numeric) < 1e-4);
}
