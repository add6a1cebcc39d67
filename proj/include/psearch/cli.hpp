#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psearch/config.hpp"
#include "psearch/pipeline.hpp"
#include "psearch/trainer.hpp"

namespace psearch {

/// Refuses to reuse an output directory that already holds a manifest,
/// unless force is set.
void prepare_out_dir(const std::filesystem::path& out_dir, bool force);

/// manifest.json is written before any computation starts, so a crashed
/// run still identifies its command, config and seed.
void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                    const std::optional<std::filesystem::path>& config_path, const IniFile& config,
                    std::uint64_t seed);

void run_gen_data(const std::filesystem::path& spec_path, const std::filesystem::path& out_dir,
                  bool force);

struct TrainOutputs {
  std::filesystem::path stage1_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_file;
  real detection_ap = 0;
  real search_map = 0;
  real search_top1 = 0;
};

TrainOutputs run_train(Regime regime, const IniFile& config,
                       const std::optional<std::filesystem::path>& config_path,
                       const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& det_ckpt,
                       std::optional<std::uint64_t> seed_override, bool force);

struct EvalOutputs {
  std::filesystem::path metrics_file;
  PersonSearchEval eval;
};

EvalOutputs run_eval(const std::filesystem::path& ckpt, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir, bool use_cws, bool force);

struct RegimeRow {
  std::string regime;
  real detection_ap = 0;
  real detection_recall = 0;
  real map = 0;
  real top1 = 0;
};

struct CompareOutputs {
  std::vector<RegimeRow> rows;  // incremental, joint, hybrid
  real stage1_detection_ap = 0;
  bool incremental_ge_joint_ap = false;
  bool incremental_gt_hybrid_ap = false;
  std::filesystem::path report_json;
  std::filesystem::path report_md;
};

/// Runs all three regimes with a shared seed and budget and emits the
/// JSON + markdown comparison report.
CompareOutputs run_compare(const IniFile& config,
                           const std::optional<std::filesystem::path>& config_path,
                           const std::filesystem::path& data_dir,
                           const std::filesystem::path& out_dir,
                           std::optional<std::uint64_t> seed_override, bool force);

/// Full command-line entry point (exit codes: 0 ok, 1 runtime failure,
/// 2 usage or config error).
int cli_main(int argc, const char* const* argv);

}  // namespace psearch
