#pragma once

#include "trv/arch.hpp"
#include "trv/mim.hpp"

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace trv {

// Full run description: architecture plus training settings. Parsed from a
// flat key=value file (or a flat JSON object); unknown keys are rejected.
struct RunConfig {
    TrVConfig arch;
    double mask_ratio = 0.4;
    double peak_lr = 1.5e-3;
    double floor_lr = 0.0;
    long warmup_steps = 0;
    long total_steps = 100;
    int batch_size = 8;
    AdamWConfig opt;
    bool seed_set = false;
    uint64_t seed = 0;
    std::string teacher = "synth";  // "synth" or "synth:<seed>"
    long n_samples = 8;
    std::string out_dir = "out";

    uint64_t teacher_seed() const;
    uint64_t dataset_seed() const;
    LrSchedule schedule() const;
};

RunConfig load_config(const std::string& path);
// Apply one key=value setting (also used for CLI overrides).
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// checkpoint container: magic "TRVC", version u32 LE, entry count u32 LE,
// entries (u32 name len, name, u32 rank, u32 dims..., u8 dtype code 0 = f64,
// little-endian payload), CRC32 trailer over all payload bytes.

constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const ParamStore& params, const OptimizerState& opt, long step,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// Restores params/opt from a loaded checkpoint; shape mismatches name the
// offending entry.
long restore_checkpoint(const Checkpoint& ckpt, ParamStore& params, OptimizerState& opt);

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

// ---------------------------------------------------------------------------
// synthetic data

// Deterministic platform-independent samples, values uniform in [-1, 1].
// Sample i is [tokens, patch_dim].
std::vector<Tensor> synth_dataset(uint64_t seed, long n_samples, long tokens, long patch_dim);

// ---------------------------------------------------------------------------
// training loop

class Trainer {
public:
    explicit Trainer(RunConfig cfg);

    void resume(const std::string& ckpt_path);

    long steps_done() const { return opt_.step; }
    StepMetrics step();

    const RunConfig& config() const { return cfg_; }
    const ParamStore& params() const { return params_; }
    const OptimizerState& opt_state() const { return opt_; }

    void save(const std::string& path) const;

private:
    RunConfig cfg_;
    ParamStore params_;
    OptimizerState opt_;
    std::unique_ptr<RopeTable> rope_;
    std::unique_ptr<TeacherOracle> teacher_;
    std::vector<Tensor> dataset_;
};

std::string metrics_line(const StepMetrics& m, double wall_ms);

}  // namespace trv
