#pragma once

#include "trv/arch.hpp"
#include "trv/autodiff.hpp"
#include "trv/rng.hpp"
#include "trv/tensor.hpp"

#include <memory>
#include <vector>

namespace trv {

struct MaskRect {
    int r0, c0, h, w;
    int area() const { return h * w; }
};

struct MaskPlan {
    int grid_h = 0;
    int grid_w = 0;
    double target_ratio = 0.0;
    std::vector<bool> masked;       // row-major grid
    std::vector<MaskRect> rects;    // rectangles whose union forms the mask

    long masked_count() const;
    double masked_fraction() const;
    std::vector<long> masked_indices() const;
};

constexpr int kMinMaskBlock = 16;

// Union of random rectangles (area >= min_block, log-uniform aspect in
// [0.3, 1/0.3]) until the masked count reaches ceil(ratio * area).
MaskPlan blockwise_mask(int grid_h, int grid_w, double ratio, Rng& rng,
                        int min_block = kMinMaskBlock);

// Replace masked rows of the (already embedded) token matrix with the shared
// mask token embedding.
Tensor corrupt(const Tensor& patch_tokens, const MaskPlan& plan, const Tensor& mask_token);

// LN then linear projection to the teacher dimension.
Tensor mim_head(const Tensor& features, const Tensor& ln_gamma, const Tensor& ln_beta,
                const Tensor& proj_w, const Tensor& proj_b, double eps = 1e-6);

// Mean over masked positions of -cos(pred, target).
double neg_cosine_loss(const Tensor& pred, const Tensor& target, const MaskPlan& plan,
                       double eps = 1e-8);

// ---------------------------------------------------------------------------
// optimizer

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.05;
};

struct OptimizerState {
    AdamWConfig hp;
    long step = 0;
    std::vector<Tensor> m;  // first moments, ParamStore order
    std::vector<Tensor> v;  // second moments

    static OptimizerState init(const ParamStore& params, AdamWConfig hp);
};

// LN affine params, biases, mask/cls tokens, abs-PE and rel-PE tables are
// exempt from weight decay.
bool decay_exempt(const std::string& name);

void adamw_step(OptimizerState& state, ParamStore& params, const std::vector<Tensor>& grads,
                double lr);

// ---------------------------------------------------------------------------
// schedules

struct LrSchedule {
    double peak_lr = 1.5e-3;
    long warmup_steps = 0;
    long total_steps = 1;
    double floor_lr = 0.0;
};

// Linear warmup to peak, then cosine anneal to the floor.
double cosine_lr(long step, const LrSchedule& sched);

// Geometric per-depth scaling: group 0 = patch embed, 1..depth = blocks,
// depth+1 = head (which gets the base lr exactly).
double layerwise_lr(double base, double decay, int group, int num_groups);
int param_group(const std::string& name, int depth);

void ema_update(ParamStore& ema, const ParamStore& params, double alpha);

// ---------------------------------------------------------------------------
// teacher + training step

class TeacherOracle {
public:
    virtual ~TeacherOracle() = default;
    virtual int feature_dim() const = 0;
    // [tokens, feature_dim]; deterministic per sample id
    virtual Tensor features(long sample_id, int tokens) const = 0;
};

// Counter-based deterministic pseudo-teacher, values uniform in [-1, 1].
class SynthTeacher : public TeacherOracle {
public:
    SynthTeacher(uint64_t seed, int feature_dim) : seed_(seed), dim_(feature_dim) {}
    int feature_dim() const override { return dim_; }
    Tensor features(long sample_id, int tokens) const override;

private:
    uint64_t seed_;
    int dim_;
};

struct Batch {
    std::vector<long> sample_ids;
    std::vector<Tensor> patches;  // each [tokens, patch_dim]
};

struct StepMetrics {
    long step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double masked_fraction = 0.0;
};

// One full pretext step: mask, corrupt, encode, predict, neg-cosine loss at
// masked positions, backward, AdamW update at the scheduled lr. The per-step
// RNG is derived from (seed, step), so a run can resume bit-exactly from a
// checkpoint.
StepMetrics pretrain_step(const TrVConfig& cfg, ParamStore& params, const RopeTable* rope_table,
                          const Batch& batch, const TeacherOracle& teacher, OptimizerState& opt,
                          const LrSchedule& sched, double mask_ratio, long step, uint64_t seed);

}  // namespace trv
