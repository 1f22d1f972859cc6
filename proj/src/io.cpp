#include "trv/io.hpp"

#include <json.hpp>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace trv {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

long parse_long(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long r = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': expected number, got '" + v + "'");
    }
}

FfnType parse_ffn(const std::string& v) {
    if (v == "mlp") return FfnType::kMlp;
    if (v == "swiglu") return FfnType::kSwiglu;
    throw std::invalid_argument("config key 'ffn_type': unknown value '" + v + "'");
}

NormScheme parse_norm(const std::string& v) {
    if (v == "pre_ln") return NormScheme::kPreLn;
    if (v == "sub_ln") return NormScheme::kSubLn;
    if (v == "post_ln") return NormScheme::kPostLn;
    throw std::invalid_argument("config key 'norm_scheme': unknown value '" + v + "'");
}

PosEmbed parse_pos(const std::string& v) {
    if (v == "abs_pe") return PosEmbed::kAbsPe;
    if (v == "rope2d") return PosEmbed::kRope2d;
    if (v == "rel_pe_2d") return PosEmbed::kRelPe2d;
    if (v == "none") return PosEmbed::kNone;
    throw std::invalid_argument("config key 'pos_embed': unknown value '" + v + "'");
}

InitScheme parse_init(const std::string& v) {
    if (v == "beit_style") return InitScheme::kBeitStyle;
    if (v == "xavier_normal") return InitScheme::kXavierNormal;
    throw std::invalid_argument("config key 'init_scheme': unknown value '" + v + "'");
}

}  // namespace

uint64_t RunConfig::teacher_seed() const {
    if (teacher == "synth") return 0;
    if (teacher.rfind("synth:", 0) == 0)
        return static_cast<uint64_t>(parse_long("teacher", teacher.substr(6)));
    throw std::invalid_argument("config key 'teacher': unknown teacher '" + teacher +
                                "' (expected synth or synth:<seed>)");
}

uint64_t RunConfig::dataset_seed() const { return mix_seed(seed, 0xDA7AULL); }

LrSchedule RunConfig::schedule() const {
    return LrSchedule{peak_lr, warmup_steps, total_steps, floor_lr};
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "preset") {
        cfg.arch = TrVConfig::preset(value);
        cfg.peak_lr = (value == "ti" || value == "s") ? 3e-3 : 1.5e-3;
    } else if (key == "depth") {
        cfg.arch.depth = static_cast<int>(parse_long(key, value));
    } else if (key == "width") {
        cfg.arch.width = static_cast<int>(parse_long(key, value));
    } else if (key == "heads") {
        cfg.arch.num_heads = static_cast<int>(parse_long(key, value));
    } else if (key == "ffn_type") {
        cfg.arch.ffn_type = parse_ffn(value);
    } else if (key == "norm_scheme") {
        cfg.arch.norm_scheme = parse_norm(value);
    } else if (key == "pos_embed") {
        cfg.arch.pos_embed = parse_pos(value);
    } else if (key == "init_scheme") {
        cfg.arch.init_scheme = parse_init(value);
    } else if (key == "patch_size") {
        cfg.arch.patch_size = static_cast<int>(parse_long(key, value));
    } else if (key == "grid_h") {
        cfg.arch.grid_h = static_cast<int>(parse_long(key, value));
    } else if (key == "grid_w") {
        cfg.arch.grid_w = static_cast<int>(parse_long(key, value));
    } else if (key == "ffn_hidden") {
        cfg.arch.ffn_hidden = static_cast<int>(parse_long(key, value));
    } else if (key == "drop_path") {
        cfg.arch.drop_path_rate = parse_double(key, value);
    } else if (key == "teacher_dim") {
        cfg.arch.teacher_dim = static_cast<int>(parse_long(key, value));
    } else if (key == "mask_ratio") {
        cfg.mask_ratio = parse_double(key, value);
    } else if (key == "peak_lr") {
        cfg.peak_lr = parse_double(key, value);
    } else if (key == "floor_lr") {
        cfg.floor_lr = parse_double(key, value);
    } else if (key == "warmup_steps") {
        cfg.warmup_steps = parse_long(key, value);
    } else if (key == "total_steps") {
        cfg.total_steps = parse_long(key, value);
    } else if (key == "batch_size") {
        cfg.batch_size = static_cast<int>(parse_long(key, value));
    } else if (key == "wd") {
        cfg.opt.weight_decay = parse_double(key, value);
    } else if (key == "beta1") {
        cfg.opt.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
        cfg.opt.beta2 = parse_double(key, value);
    } else if (key == "eps") {
        cfg.opt.eps = parse_double(key, value);
    } else if (key == "seed") {
        cfg.seed = static_cast<uint64_t>(parse_long(key, value));
        cfg.seed_set = true;
    } else if (key == "teacher") {
        cfg.teacher = value;
    } else if (key == "n_samples") {
        cfg.n_samples = parse_long(key, value);
    } else if (key == "out_dir") {
        cfg.out_dir = value;
    } else {
        throw std::invalid_argument("config: unknown key '" + key + "'");
    }
}

static void validate_run(const RunConfig& cfg) {
    cfg.arch.validate();
    if (cfg.mask_ratio <= 0.0 || cfg.mask_ratio >= 1.0)
        throw std::invalid_argument("config key 'mask_ratio': must be in (0,1)");
    if (cfg.batch_size < 1) throw std::invalid_argument("config key 'batch_size': must be >= 1");
    if (cfg.n_samples < 1) throw std::invalid_argument("config key 'n_samples': must be >= 1");
    if (cfg.warmup_steps < 0 || cfg.warmup_steps > cfg.total_steps)
        throw std::invalid_argument("config key 'warmup_steps': must be in [0, total_steps]");
    cfg.teacher_seed();  // validates the teacher string
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();

    RunConfig cfg;
    std::string lead = trim(text);
    if (!lead.empty() && lead[0] == '{') {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("config: JSON parse error in " + path + ": " + e.what());
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            std::string v = it.value().is_string() ? it.value().get<std::string>()
                                                   : it.value().dump();
            apply_setting(cfg, it.key(), v);
        }
    } else {
        std::istringstream lines(text);
        std::string line;
        int lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: " + path + ":" + std::to_string(lineno) +
                                         ": expected key=value");
            apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }
    validate_run(cfg);
    return cfg;
}

// ---------------------------------------------------------------------------
// checkpoint

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
    static std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[4] = {'T', 'R', 'V', 'C'};

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
    uint64_t v;
    std::memcpy(&v, &d, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error("checkpoint: " + path + " is truncated");
    }
    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(buf[pos++]);
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    double f64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void write_entry(std::string& out, std::string& payload, const std::string& name,
                 const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.ndim()));
    for (long d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
    out.push_back(0);  // dtype code 0 = f64
    std::string pl;
    pl.reserve(static_cast<size_t>(t.size()) * 8);
    for (long i = 0; i < t.size(); ++i) put_f64(pl, t[i]);
    out += pl;
    payload += pl;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const OptimizerState& opt, long step,
                     const std::string& path) {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);

    const auto& names = params.names();
    uint32_t count = static_cast<uint32_t>(3 * names.size() + 1);
    put_u32(out, count);

    std::string payload;
    for (const auto& n : names) write_entry(out, payload, n, params.at(n));
    for (size_t i = 0; i < names.size(); ++i) write_entry(out, payload, "opt.m." + names[i], opt.m[i]);
    for (size_t i = 0; i < names.size(); ++i) write_entry(out, payload, "opt.v." + names[i], opt.v[i]);
    write_entry(out, payload, "opt.step", Tensor::scalar(static_cast<double>(step)));

    put_u32(out, crc32(reinterpret_cast<const uint8_t*>(payload.data()), payload.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    std::string data = buf.str();

    Reader r{data, 0, path};
    if (r.bytes(4) != std::string(kMagic, 4))
        throw std::runtime_error("checkpoint: " + path + " has bad magic");
    uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: " + path + " has version " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
    uint32_t count = r.u32();

    Checkpoint ckpt;
    std::string payload;
    for (uint32_t e = 0; e < count; ++e) {
        uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        uint32_t rank = r.u32();
        std::vector<long> shape;
        long n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<long>(r.u32()));
            n *= shape.back();
        }
        uint8_t dtype = r.u8();
        if (dtype != 0)
            throw std::runtime_error("checkpoint: entry '" + name + "' has unknown dtype " +
                                     std::to_string(dtype));
        Tensor t(shape);
        size_t payload_start = r.pos;
        for (long i = 0; i < n; ++i) t[i] = r.f64();
        payload += data.substr(payload_start, static_cast<size_t>(n) * 8);
        for (const auto& prev : ckpt.entries)
            if (prev.name == name)
                throw std::runtime_error("checkpoint: duplicate entry '" + name + "'");
        ckpt.entries.push_back({std::move(name), std::move(t)});
    }
    uint32_t stored = r.u32();
    uint32_t computed = crc32(reinterpret_cast<const uint8_t*>(payload.data()), payload.size());
    if (stored != computed)
        throw std::runtime_error("checkpoint: " + path + " checksum mismatch");
    if (r.pos != data.size())
        throw std::runtime_error("checkpoint: " + path + " has trailing bytes");
    return ckpt;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

long restore_checkpoint(const Checkpoint& ckpt, ParamStore& params, OptimizerState& opt) {
    auto fetch = [&](const std::string& name, Tensor& dst) {
        const Tensor* src = ckpt.find(name);
        if (!src) throw std::runtime_error("checkpoint: missing entry '" + name + "'");
        if (!src->same_shape(dst))
            throw std::runtime_error("checkpoint: entry '" + name + "' has shape " +
                                     shape_str(src->shape()) + ", expected " +
                                     shape_str(dst.shape()));
        dst = *src;
    };
    const auto& names = params.names();
    for (size_t i = 0; i < names.size(); ++i) {
        fetch(names[i], params.at(names[i]));
        fetch("opt.m." + names[i], opt.m[i]);
        fetch("opt.v." + names[i], opt.v[i]);
    }
    const Tensor* step = ckpt.find("opt.step");
    if (!step) throw std::runtime_error("checkpoint: missing entry 'opt.step'");
    opt.step = static_cast<long>(step->item());
    return opt.step;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> synth_dataset(uint64_t seed, long n_samples, long tokens, long patch_dim) {
    if (n_samples < 1) throw std::invalid_argument("synth_dataset: n_samples must be >= 1");
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(n_samples));
    for (long s = 0; s < n_samples; ++s) {
        Tensor t({tokens, patch_dim});
        uint64_t base = mix_seed(seed, static_cast<uint64_t>(s));
        for (long i = 0; i < t.size(); ++i)
            t[i] = 2.0 * bits_to_unit(splitmix64(base + static_cast<uint64_t>(i) + 1)) - 1.0;
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
    validate_run(cfg_);
    Rng init_rng(mix_seed(cfg_.seed, 0xA11CE));
    params_ = init_params(cfg_.arch, init_rng);
    opt_ = OptimizerState::init(params_, cfg_.opt);
    if (cfg_.arch.pos_embed == PosEmbed::kRope2d)
        rope_ = std::make_unique<RopeTable>(cfg_.arch.grid_h, cfg_.arch.grid_w,
                                            cfg_.arch.head_dim(), cfg_.arch.rope_base);
    teacher_ = std::make_unique<SynthTeacher>(cfg_.teacher_seed(), cfg_.arch.teacher_dim);
    dataset_ = synth_dataset(cfg_.dataset_seed(), cfg_.n_samples, cfg_.arch.tokens(),
                             cfg_.arch.patch_dim());
}

void Trainer::resume(const std::string& ckpt_path) {
    restore_checkpoint(load_checkpoint(ckpt_path), params_, opt_);
}

StepMetrics Trainer::step() {
    const long s = opt_.step;
    if (s >= cfg_.total_steps) throw std::runtime_error("Trainer: run already complete");
    Batch batch;
    for (int i = 0; i < cfg_.batch_size; ++i) {
        long id = (s * cfg_.batch_size + i) % cfg_.n_samples;
        batch.sample_ids.push_back(id);
        batch.patches.push_back(dataset_[static_cast<size_t>(id)]);
    }
    return pretrain_step(cfg_.arch, params_, rope_.get(), batch, *teacher_, opt_,
                         cfg_.schedule(), cfg_.mask_ratio, s, cfg_.seed);
}

void Trainer::save(const std::string& path) const {
    save_checkpoint(params_, opt_, opt_.step, path);
}

std::string metrics_line(const StepMetrics& m, double wall_ms) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["lr"] = m.lr;
    j["masked_fraction"] = m.masked_fraction;
    j["wall_ms"] = wall_ms;
    return j.dump();
}

}  // namespace trv
