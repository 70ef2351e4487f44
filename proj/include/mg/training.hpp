#pragma once

// Four-stage training pipeline: per-stage freeze sets, AdamW, stage runner,
// MoE assembly from the stage-II and stage-III experts, checkpoints.

#include <iosfwd>
#include <map>
#include <string>

#include "mg/losses.hpp"
#include "mg/model.hpp"

namespace mg {

enum class Stage { I, II, III, IV };
const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct DatasetMix {
    real vqa = 1.0;
    real region = 0.0;
    real grounding = 0.0;
};

struct StageConfig {
    Stage stage = Stage::I;
    DatasetMix mix;
    LossWeights weights;
    std::size_t steps = 200;
    std::size_t batch = 4;
    real lr = 1e-3;
    std::size_t warmup = 20;
    std::uint64_t seed = 1;
    // probability that a sampled question asks for the shape count; the
    // remaining question kinds split the rest evenly. Counting converges
    // slowest, so early stages oversample it.
    real count_frac = 1.0 / 3.0;
};

// Sets requires_grad on exactly the stage's trainable parameters and clears
// gradient state on the frozen ones. Returns the trainable names.
std::vector<std::string> apply_freeze_mask(MultimodalModel& model, Stage stage);
bool is_trainable(const std::string& name, Stage stage, bool moe_model);

struct AdamW {
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    real weight_decay = 0.01;  // zero on norms, embeddings, biases

    struct Slot {
        std::vector<real> m, v;
    };
    std::map<std::string, Slot> state;
    std::size_t t = 0;

    // Applies one update using the gradients stored on the tensors.
    // Throws on non-finite gradients, naming the parameter.
    void step(const ParamList& trainable, real lr);
};

bool decay_exempt(const std::string& name);

struct StepRecord {
    std::size_t step = 0;
    Stage stage = Stage::I;
    real loss = 0, ce = 0, bce = 0, dice = 0;
    std::size_t expert_kept[2] = {0, 0};
};

struct StageResult {
    std::vector<StepRecord> records;
    real first_loss = 0, last_loss = 0;
};

// Per-sample loss used by both the trainer and the tests.
struct SampleLoss {
    Tensor total, ce, bce, dice;
};
SampleLoss sample_loss(const MultimodalModel& model, const Sample& sample,
                       const LossWeights& weights, std::uint64_t sample_seed);

StageResult run_stage(MultimodalModel& model, const StageConfig& cfg,
                      std::ostream* metrics_log = nullptr);

// ---- checkpoints ---------------------------------------------------------

struct CheckpointManifest {
    Stage stage = Stage::I;
    std::size_t steps = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t file_hash = 0;  // FNV-1a of the tensor container
    bool moe = false;
};

std::uint64_t config_hash(const ModelConfig& cfg);

void save_checkpoint(const MultimodalModel& model, Stage stage, std::size_t steps,
                     const std::string& path);

struct LoadedCheckpoint {
    ParamList tensors;
    CheckpointManifest manifest;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Restores a checkpoint into a freshly built model; the manifest must match
// the config's topology (moe flag).
void restore_checkpoint(MultimodalModel& model, const LoadedCheckpoint& ckpt);

// Stage-IV assembly: E_vl from the stage-II checkpoint, E_ground from the
// stage-III checkpoint, zero-B LoRA on both, router zero-initialized, all
// non-FFN weights from the stage-III checkpoint.
MultimodalModel build_moe_from_experts(const LoadedCheckpoint& ckpt_vl,
                                       const LoadedCheckpoint& ckpt_ground,
                                       const ModelConfig& moe_cfg,
                                       std::uint64_t seed);

}  // namespace mg
