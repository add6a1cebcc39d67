#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "psearch/checkpoint.hpp"
#include "psearch/model.hpp"
#include "psearch/synthdata.hpp"

namespace psearch {

enum class Regime { incremental, joint, hybrid };

std::string regime_name(Regime r);
Regime regime_from_string(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::incremental;
  int det_epochs = 10;
  int reid_epochs = 10;
  int joint_epochs = 10;
  int det_batch = 8;
  int reid_batch = 4;
  real base_lr = 0.003;
  int det_lr_decay_epoch = 7;   // 1-based epoch where lr drops x0.1; 0 disables
  int reid_lr_decay_epoch = 7;
  int warmup_epochs = 1;
  real momentum = 0.9;
  real hybrid_det_lr = 1e-5;    // tiny detector lr for the hybrid regime
  SnaConfig sna;
  int oim_queue_size = 32;
  real oim_momentum = 0.5;
  real oim_temperature = 1.0 / 30.0;
  real triplet_margin = 0.3;
  bool keep_epoch_checkpoints = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// SGD with momentum over named parameter groups; a group's lr_scale
/// multiplies the scheduled learning rate.
class SgdOptimizer {
 public:
  struct Group {
    ParamRefs params;
    real lr_scale = 1.0;
  };

  SgdOptimizer(std::vector<Group> groups, real momentum);
  void zero_grad();
  void step(real lr);
  std::vector<std::string> trainable_names() const;

 private:
  struct Slot {
    ParamRef p;
    real lr_scale;
    Tensor velocity;
  };
  std::vector<Slot> slots_;
  real momentum_ = 0.9;
};

/// Warmup + single x0.1 decay schedule. Steps and epochs are 0-based;
/// decay_epoch is 1-based (matching "decay at the Nth epoch"), 0 = never.
real scheduled_lr(real base_lr, int step, int steps_per_epoch, int warmup_epochs,
                  int decay_epoch);

struct StageArtifacts {
  std::filesystem::path checkpoint;   // end-of-stage checkpoint
  std::filesystem::path log_file;
  real final_detection_ap = -1;       // filled by stages that evaluate detection
  int sna_fallbacks = 0;
};

/// Stage 1: train the detection side-net alone with detection losses.
/// The input layer stays frozen. Writes checkpoints/stage1.ckpt.
StageArtifacts train_detector(const Dataset& data, PersonSearchModel& model,
                              const TrainConfig& cfg, const std::filesystem::path& out_dir);

/// Stage 2 (task-incremental): detector and input layer frozen bitwise;
/// trains re-id side-net, side-ada, side-fusion, head and OIM state on GT
/// boxes plus n SnA copies each. No box decoding runs in this path. The
/// loop asserts every step that no detector parameter receives gradient.
StageArtifacts train_reid(const Dataset& data, PersonSearchModel& model, OimState& oim,
                          const TrainConfig& cfg, const std::filesystem::path& out_dir);

/// Baseline: both losses back-propagate simultaneously into their side-nets
/// (input layer still frozen), unit loss weights.
StageArtifacts train_joint(const Dataset& data, PersonSearchModel& model, OimState& oim,
                           const TrainConfig& cfg, const std::filesystem::path& out_dir);

/// Stage-2 style run in which detector parameters receive tiny-lr updates
/// driven by the re-id objective (no detection loss).
StageArtifacts train_hybrid(const Dataset& data, PersonSearchModel& model, OimState& oim,
                            const TrainConfig& cfg, const std::filesystem::path& out_dir);

/// Trainable parameter name sets per regime/stage, as declared for the
/// freeze ledger.
std::vector<std::string> declared_trainable(PersonSearchModel& model, Regime regime, int stage);

}  // namespace psearch
