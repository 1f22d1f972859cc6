#pragma once

#include "trv/autodiff.hpp"
#include "trv/rng.hpp"
#include "trv/rope.hpp"
#include "trv/tensor.hpp"

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace trv {

enum class FfnType { kMlp, kSwiglu };
enum class NormScheme { kPreLn, kSubLn, kPostLn };
enum class PosEmbed { kAbsPe, kRope2d, kRelPe2d, kNone };
enum class InitScheme { kBeitStyle, kXavierNormal };

std::string to_string(FfnType t);
std::string to_string(NormScheme t);
std::string to_string(PosEmbed t);
std::string to_string(InitScheme t);

struct TrVConfig {
    int depth = 12;
    int width = 768;
    int num_heads = 12;
    FfnType ffn_type = FfnType::kSwiglu;
    NormScheme norm_scheme = NormScheme::kSubLn;
    PosEmbed pos_embed = PosEmbed::kRope2d;
    InitScheme init_scheme = InitScheme::kXavierNormal;
    int patch_size = 14;
    int grid_h = 14;
    int grid_w = 14;
    int ffn_hidden = 0;  // 0 -> derived from ffn_type
    double drop_path_rate = 0.0;
    bool mask_token_enabled = true;
    bool class_token = false;
    double rope_base = 10000.0;
    int teacher_dim = 1024;
    double ln_eps = 1e-6;

    int head_dim() const { return width / num_heads; }
    int tokens() const { return grid_h * grid_w; }
    int patch_dim() const { return patch_size * patch_size * 3; }
    int hidden() const;

    void validate() const;

    // "ti" / "s" / "b" / "l"
    static TrVConfig preset(const std::string& name);
};

int ffn_hidden_dim(int width, FfnType type);

// Ordered named parameter container. Order is fixed at construction and
// drives RNG consumption, gradient collection, and checkpoint layout.
class ParamStore {
public:
    void add(std::string name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return names_.size(); }
    long total_elems() const;

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, Tensor> map_;
};

// Every parameter of the model (encoder + mask token + prediction head),
// name -> shape, in a fixed canonical order.
std::vector<std::pair<std::string, std::vector<long>>> param_shapes(const TrVConfig& cfg);

Tensor init_xavier_normal(const std::vector<long>& shape, Rng& rng);
ParamStore init_params(const TrVConfig& cfg, Rng& rng);

long long count_params(const TrVConfig& cfg);
long long count_macs(const TrVConfig& cfg, long n_tokens);

// Per-sample stochastic depth. Eager form used directly in tests.
Tensor drop_path(const Tensor& branch_out, double rate, bool training, Rng& rng);

// Branch scale factors (0 or 1/(1-rate)) for one sample: two residual
// branches per block.
struct DropPathPlan {
    std::vector<std::array<double, 2>> branch_scale;
};
DropPathPlan sample_drop_path(const TrVConfig& cfg, Rng& rng);

// Params bound onto a tape as leaves, in ParamStore order.
struct BoundParams {
    std::vector<std::string> names;
    std::vector<Value> values;
    std::unordered_map<std::string, Value> by_name;

    Value at(const std::string& name) const;
    bool has(const std::string& name) const { return by_name.count(name) > 0; }
};
BoundParams bind_params(Tape& tape, const ParamStore& store);

Value mlp_ffn(Tape& tape, Value x, Value w1, Value w2);
Value swiglu_ffn(Tape& tape, Value x, Value u, Value v, Value w,
                 std::optional<std::pair<Value, Value>> inner_ln = std::nullopt,
                 double ln_eps = 1e-6);

Value mhsa(Tape& tape, const TrVConfig& cfg, Value x, const BoundParams& params, int block,
           const RopeTable* rope_table, const std::vector<GridPos>& positions);

Value trv_block(Tape& tape, const TrVConfig& cfg, Value x, const BoundParams& params, int block,
                const RopeTable* rope_table, const std::vector<GridPos>& positions,
                const DropPathPlan* drop = nullptr);

// tokens: [tokens, width], already patch-embedded (and corrupted) by the
// caller. Adds the absolute PE when configured, then runs all blocks. No
// final LN; the MIM head applies its own.
Value encoder_forward(Tape& tape, const TrVConfig& cfg, Value tokens, const BoundParams& params,
                      const std::vector<GridPos>& positions, const RopeTable* rope_table,
                      const DropPathPlan* drop = nullptr);

}  // namespace trv
