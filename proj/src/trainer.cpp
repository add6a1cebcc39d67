#include "psearch/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "psearch/evaluation.hpp"
#include "psearch/pipeline.hpp"

namespace psearch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::incremental: return "incremental";
    case Regime::joint: return "joint";
    case Regime::hybrid: return "hybrid";
  }
  return "?";
}

Regime regime_from_string(const std::string& s) {
  if (s == "incremental") return Regime::incremental;
  if (s == "joint") return Regime::joint;
  if (s == "hybrid") return Regime::hybrid;
  throw ConfigError("unknown regime '" + s + "' (expected incremental|joint|hybrid)");
}

void TrainConfig::validate() const {
  if (det_epochs < 0 || reid_epochs < 0 || joint_epochs < 0)
    throw ConfigError("TrainConfig: epochs must be >= 0");
  if (det_batch < 1 || reid_batch < 1) throw ConfigError("TrainConfig: batch sizes must be >= 1");
  if (!(base_lr > 0)) throw ConfigError("TrainConfig: base_lr must be positive");
  if (warmup_epochs < 0) throw ConfigError("TrainConfig: warmup_epochs must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("TrainConfig: momentum must be in [0,1)");
  if (!(hybrid_det_lr > 0)) throw ConfigError("TrainConfig: hybrid_det_lr must be positive");
  if (hybrid_det_lr >= base_lr)
    throw ConfigError("TrainConfig: hybrid_det_lr must be much smaller than base_lr");
  sna.validate();
  if (oim_queue_size < 0) throw ConfigError("TrainConfig: oim_queue_size must be >= 0");
  if (!(triplet_margin >= 0)) throw ConfigError("TrainConfig: triplet_margin must be >= 0");
}

// ---------------------------------------------------------------------------
// Optimizer / schedule
// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(std::vector<Group> groups, real momentum) : momentum_(momentum) {
  for (auto& g : groups) {
    for (auto& p : g.params) {
      slots_.push_back(Slot{p, g.lr_scale, Tensor::zeros_like(*p.value)});
    }
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& s : slots_) s.p.grad->zero();
}

void SgdOptimizer::step(real lr) {
  for (auto& s : slots_) {
    Tensor& v = s.velocity;
    Tensor& w = *s.p.value;
    const Tensor& g = *s.p.grad;
    const real eta = lr * s.lr_scale;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= eta * v[i];
    }
  }
}

std::vector<std::string> SgdOptimizer::trainable_names() const {
  std::vector<std::string> names;
  names.reserve(slots_.size());
  for (const auto& s : slots_) names.push_back(s.p.name);
  return names;
}

real scheduled_lr(real base_lr, int step, int steps_per_epoch, int warmup_epochs,
                  int decay_epoch) {
  const int warmup_steps = warmup_epochs * steps_per_epoch;
  real lr = base_lr;
  if (warmup_steps > 0 && step < warmup_steps) {
    lr = base_lr * static_cast<real>(step + 1) / warmup_steps;
  }
  if (decay_epoch > 0) {
    const int epoch = step / std::max(1, steps_per_epoch);  // 0-based
    if (epoch + 1 >= decay_epoch) lr *= 0.1;
  }
  return lr;
}

std::vector<std::string> declared_trainable(PersonSearchModel& model, Regime regime, int stage) {
  std::vector<std::string> names;
  auto add = [&](const std::string& prefix) {
    for (const auto& p : model.params_with_prefix(prefix)) names.push_back(p.name);
  };
  if (regime == Regime::joint) {
    add("det");
    add("reid");
  } else if (stage == 1) {
    add("det");
  } else if (regime == Regime::incremental) {
    add("reid");
  } else {  // hybrid stage 2
    add("reid");
    add("det");
  }
  return names;
}

// ---------------------------------------------------------------------------
// Shared loop machinery
// ---------------------------------------------------------------------------

namespace {

class JsonlLogger {
 public:
  explicit JsonlLogger(const fs::path& file) : os_(file) {
    if (!os_) throw InputError("cannot open log file: " + file.string());
  }
  void log(const json& j) { os_ << j.dump() << "\n"; }
  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

std::vector<Tensor> preload_images(const DatasetSplit& split) {
  std::vector<Tensor> images;
  images.reserve(split.scenes.size());
  for (const auto& sc : split.scenes) images.push_back(load_ppm(split.dir / sc.image));
  return images;
}

void check_finite(real v, const std::string& what, int step) {
  if (!std::isfinite(v)) {
    throw std::runtime_error("training diverged: " + what + " is not finite at step " +
                             std::to_string(step));
  }
}

real grad_abs_sum(const ParamRefs& params) {
  real s = 0;
  for (const auto& p : params) {
    for (std::size_t i = 0; i < p.grad->size(); ++i) s += std::fabs((*p.grad)[i]);
  }
  return s;
}

struct ReidBatchSample {
  int scene_index;
  std::vector<Box> boxes;
  std::vector<int> labels;
  int fallbacks = 0;
};

/// GT boxes plus n SnA copies each; copies share the GT identity.
ReidBatchSample make_reid_sample(const SceneRecord& scene, int scene_index,
                                 const std::map<int, int>& label_map, const SnaConfig& sna,
                                 int image_size, Rng& rng) {
  ReidBatchSample s;
  s.scene_index = scene_index;
  const ClipRect clip{static_cast<real>(image_size), static_cast<real>(image_size)};
  for (std::size_t g = 0; g < scene.boxes.size(); ++g) {
    const auto it = label_map.find(scene.identities[g]);
    const int label = it == label_map.end() ? OimState::kUnlabeled : it->second;
    s.boxes.push_back(scene.boxes[g]);
    s.labels.push_back(label);
    for (Box& b : sna_augment(scene.boxes[g], sna, rng, clip, &s.fallbacks)) {
      s.boxes.push_back(b);
      s.labels.push_back(label);
    }
  }
  return s;
}

std::map<int, int> build_label_map(const Dataset& data) {
  std::map<int, int> m;
  int next = 0;
  for (int id : data.train_identities()) m[id] = next++;
  return m;
}

struct EpochPlan {
  std::vector<std::vector<int>> batches;
};

EpochPlan plan_epoch(int num_scenes, int batch_size, Rng& rng) {
  std::vector<int> order(num_scenes);
  for (int i = 0; i < num_scenes; ++i) order[i] = i;
  rng.shuffle(order);
  EpochPlan plan;
  for (int s = 0; s < num_scenes; s += batch_size) {
    plan.batches.emplace_back(order.begin() + s,
                              order.begin() + std::min(num_scenes, s + batch_size));
  }
  return plan;
}

int steps_per_epoch(int num_scenes, int batch_size) {
  return (num_scenes + batch_size - 1) / batch_size;
}

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1: detector
// ---------------------------------------------------------------------------

StageArtifacts train_detector(const Dataset& data, PersonSearchModel& model,
                              const TrainConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir / "checkpoints");
  fs::create_directories(out_dir / "logs");
  StageArtifacts art;
  art.log_file = out_dir / "logs" / "stage1_detector.jsonl";
  JsonlLogger log(art.log_file);

  Rng master(cfg.seed);
  SgdOptimizer opt({{model.params_with_prefix("det"), 1.0}}, cfg.momentum);
  log.log(json{{"event", "freeze_ledger"},
               {"stage", 1},
               {"regime", regime_name(cfg.regime)},
               {"trainable", opt.trainable_names()},
               {"input_checksum", params_checksum(model, "input")}});

  const auto images = preload_images(data.train);
  const int n_scenes = static_cast<int>(data.train.scenes.size());
  const int spe = steps_per_epoch(n_scenes, cfg.det_batch);
  int step = 0;
  real best_ap = -1;
  for (int epoch = 0; epoch < cfg.det_epochs; ++epoch) {
    Rng order_rng = master.substream("stage1.order", epoch);
    const EpochPlan plan = plan_epoch(n_scenes, cfg.det_batch, order_rng);
    for (const auto& batch : plan.batches) {
      const auto t0 = Clock::now();
      opt.zero_grad();
      real loss_sum = 0, cls_sum = 0, box_sum = 0;
      for (int idx : batch) {
        const FeatureMap x0 = model.input().forward(images[idx]);
        auto f = model.detector().forward(x0);
        DetectionLoss dl = detection_loss(f.preds, data.train.scenes[idx].boxes);
        check_finite(dl.total, "detection loss", step);
        const real scale = 1.0 / batch.size();
        for (std::size_t i = 0; i < dl.gobj.size(); ++i) dl.gobj[i] *= scale;
        for (std::size_t i = 0; i < dl.gbox.size(); ++i) dl.gbox[i] *= scale;
        model.detector().backward(&dl.gobj, &dl.gbox, nullptr, nullptr);
        loss_sum += dl.total;
        cls_sum += dl.cls;
        box_sum += dl.box;
      }
      const real lr = scheduled_lr(cfg.base_lr, step, spe, cfg.warmup_epochs,
                                   cfg.det_lr_decay_epoch);
      opt.step(lr);
      log.log(json{{"stage", "detector"},
                   {"step", step},
                   {"epoch", epoch + 1},
                   {"loss", loss_sum / batch.size()},
                   {"cls", cls_sum / batch.size()},
                   {"box", box_sum / batch.size()},
                   {"lr", lr},
                   {"ms", ms_since(t0)}});
      ++step;
    }
    const auto det_metrics = eval_detection(model, data.gallery);
    const real ap = det_metrics ? det_metrics->ap : 0.0;
    log.log(json{{"event", "epoch_eval"},
                 {"stage", "detector"},
                 {"epoch", epoch + 1},
                 {"detection_ap", ap},
                 {"detection_recall", det_metrics ? det_metrics->recall : 0.0}});
    log.flush();
    if (cfg.keep_epoch_checkpoints) {
      char name[48];
      std::snprintf(name, sizeof(name), "stage1_epoch%02d.ckpt", epoch + 1);
      save_checkpoint(out_dir / "checkpoints" / name, model);
    }
    if (ap > best_ap) {
      best_ap = ap;
      save_checkpoint(out_dir / "checkpoints" / "stage1_best.ckpt", model);
    }
    art.final_detection_ap = ap;
  }

  art.checkpoint = out_dir / "checkpoints" / "stage1.ckpt";
  save_checkpoint(art.checkpoint, model, nullptr, "stage1 detector");
  log.log(json{{"event", "stage_done"},
               {"stage", 1},
               {"checkpoint", art.checkpoint.string()},
               {"detection_ap", art.final_detection_ap},
               {"input_checksum", params_checksum(model, "input")}});
  return art;
}

// ---------------------------------------------------------------------------
// Re-id style loops (stage 2 / joint / hybrid share this body)
// ---------------------------------------------------------------------------

namespace {

enum class ReidLoopKind { incremental, joint, hybrid };

StageArtifacts reid_loop(ReidLoopKind kind, const Dataset& data, PersonSearchModel& model,
                         OimState& oim, const TrainConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir / "checkpoints");
  fs::create_directories(out_dir / "logs");
  const char* stage_name = kind == ReidLoopKind::incremental ? "reid"
                           : kind == ReidLoopKind::joint     ? "joint"
                                                             : "hybrid";
  StageArtifacts art;
  art.log_file = out_dir / "logs" / (std::string("stage2_") + stage_name + ".jsonl");
  JsonlLogger log(art.log_file);

  Rng master(cfg.seed);
  std::vector<SgdOptimizer::Group> groups;
  groups.push_back({model.params_with_prefix("reid"), 1.0});
  if (kind == ReidLoopKind::joint) {
    groups.push_back({model.params_with_prefix("det"), 1.0});
  } else if (kind == ReidLoopKind::hybrid) {
    groups.push_back({model.params_with_prefix("det"), cfg.hybrid_det_lr / cfg.base_lr});
  }
  SgdOptimizer opt(std::move(groups), cfg.momentum);

  const ParamRefs det_params = model.params_with_prefix("det");
  const std::uint64_t det_checksum_before = params_checksum(model, "det");
  log.log(json{{"event", "freeze_ledger"},
               {"stage", 2},
               {"regime", stage_name},
               {"trainable", opt.trainable_names()},
               {"det_checksum", det_checksum_before},
               {"input_checksum", params_checksum(model, "input")}});

  const auto label_map = build_label_map(data);
  const auto images = preload_images(data.train);
  const int n_scenes = static_cast<int>(data.train.scenes.size());
  const int epochs = kind == ReidLoopKind::joint ? cfg.joint_epochs : cfg.reid_epochs;
  const int spe = steps_per_epoch(n_scenes, cfg.reid_batch);
  int step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng order_rng = master.substream("stage2.order", epoch);
    const EpochPlan plan = plan_epoch(n_scenes, cfg.reid_batch, order_rng);
    real epoch_loss = 0;
    for (const auto& batch : plan.batches) {
      const auto t0 = Clock::now();
      opt.zero_grad();
      real oim_sum = 0, tri_sum = 0, det_sum = 0;
      for (int idx : batch) {
        Rng sna_rng = master.substream("sna", static_cast<std::uint64_t>(epoch) * 1000003u +
                                                  static_cast<std::uint64_t>(idx));
        ReidBatchSample sample = make_reid_sample(data.train.scenes[idx], idx, label_map,
                                                  cfg.sna, data.spec.image_size, sna_rng);
        art.sna_fallbacks += sample.fallbacks;

        const FeatureMap x0 = model.input().forward(images[idx]);
        auto f = model.detector().forward(x0);
        const FeatureMap fused = model.reid().forward_scene(x0, f.tap1, f.tap2);
        const Tensor emb = model.reid().forward_boxes(fused, sample.boxes, /*train=*/true);

        Tensor g_oim, g_tri;
        const real loss_oim = oim.loss(emb, sample.labels, &g_oim);
        const real loss_tri = triplet_loss(emb, sample.labels, cfg.triplet_margin, &g_tri);
        check_finite(loss_oim + loss_tri, "re-id loss", step);
        const real scale = 1.0 / batch.size();
        Tensor gembed = std::move(g_oim);
        gembed.axpy(g_tri, 1.0);
        for (std::size_t i = 0; i < gembed.size(); ++i) gembed[i] *= scale;

        auto taps = model.reid().backward(gembed);
        if (kind == ReidLoopKind::joint) {
          DetectionLoss dl = detection_loss(f.preds, data.train.scenes[idx].boxes);
          check_finite(dl.total, "detection loss", step);
          for (std::size_t i = 0; i < dl.gobj.size(); ++i) dl.gobj[i] *= scale;
          for (std::size_t i = 0; i < dl.gbox.size(); ++i) dl.gbox[i] *= scale;
          model.detector().backward(&dl.gobj, &dl.gbox, &taps.gtap1, &taps.gtap2);
          det_sum += dl.total;
        } else if (kind == ReidLoopKind::hybrid) {
          model.detector().backward(nullptr, nullptr, &taps.gtap1, &taps.gtap2);
        }
        // incremental: tap gradients are dropped, nothing flows into f_d

        oim.update(emb, sample.labels);
        oim_sum += loss_oim;
        tri_sum += loss_tri;
      }

      if (kind == ReidLoopKind::incremental) {
        // the fully-decoupled invariant, asserted every step
        const real g = grad_abs_sum(det_params);
        if (g != 0.0)
          throw std::logic_error("gradient leaked into frozen detector parameters (|g|=" +
                                 std::to_string(g) + ")");
      } else if (step == 0) {
        const real g = grad_abs_sum(det_params);
        if (g == 0.0)
          throw std::logic_error(std::string(stage_name) +
                                 " regime expects detector gradients at step 0, found none");
      }

      const real lr = scheduled_lr(cfg.base_lr, step, spe, cfg.warmup_epochs,
                                   cfg.reid_lr_decay_epoch);
      opt.step(lr);
      json rec{{"stage", stage_name},
               {"step", step},
               {"epoch", epoch + 1},
               {"oim", oim_sum / batch.size()},
               {"triplet", tri_sum / batch.size()},
               {"lr", lr},
               {"ms", ms_since(t0)}};
      if (kind == ReidLoopKind::joint) rec["det"] = det_sum / batch.size();
      rec["loss"] = (oim_sum + tri_sum + det_sum) / batch.size();
      log.log(rec);
      epoch_loss += (oim_sum + tri_sum + det_sum) / batch.size();
      ++step;
    }
    log.log(json{{"event", "epoch_eval"},
                 {"stage", stage_name},
                 {"epoch", epoch + 1},
                 {"mean_loss", epoch_loss / std::max<std::size_t>(1, plan.batches.size())},
                 {"sna_fallbacks", art.sna_fallbacks}});
    log.flush();
    if (cfg.keep_epoch_checkpoints) {
      char name[48];
      std::snprintf(name, sizeof(name), "%s_epoch%02d.ckpt", stage_name, epoch + 1);
      save_checkpoint(out_dir / "checkpoints" / name, model, &oim);
    }
  }

  if (kind == ReidLoopKind::incremental) {
    const std::uint64_t det_checksum_after = params_checksum(model, "det");
    if (det_checksum_after != det_checksum_before)
      throw std::logic_error("frozen detector parameters changed during stage 2");
  }

  art.checkpoint = out_dir / "checkpoints" / "final.ckpt";
  save_checkpoint(art.checkpoint, model, &oim, std::string(stage_name) + " final");
  log.log(json{{"event", "stage_done"},
               {"stage", 2},
               {"regime", stage_name},
               {"checkpoint", art.checkpoint.string()},
               {"det_checksum", params_checksum(model, "det")},
               {"input_checksum", params_checksum(model, "input")},
               {"sna_fallbacks", art.sna_fallbacks}});
  return art;
}

}  // namespace

StageArtifacts train_reid(const Dataset& data, PersonSearchModel& model, OimState& oim,
                          const TrainConfig& cfg, const fs::path& out_dir) {
  return reid_loop(ReidLoopKind::incremental, data, model, oim, cfg, out_dir);
}

StageArtifacts train_joint(const Dataset& data, PersonSearchModel& model, OimState& oim,
                           const TrainConfig& cfg, const fs::path& out_dir) {
  return reid_loop(ReidLoopKind::joint, data, model, oim, cfg, out_dir);
}

StageArtifacts train_hybrid(const Dataset& data, PersonSearchModel& model, OimState& oim,
                            const TrainConfig& cfg, const fs::path& out_dir) {
  return reid_loop(ReidLoopKind::hybrid, data, model, oim, cfg, out_dir);
}

}  // namespace psearch
