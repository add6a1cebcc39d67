#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "psearch/model.hpp"
#include "psearch/reid.hpp"

namespace psearch {

/// Checkpoint file: a JSON header (model config, freeze flags, the entry
/// table) followed by the flat map of named double arrays. See README for
/// the exact layout.
void save_checkpoint(const std::filesystem::path& file, PersonSearchModel& model,
                     OimState* oim = nullptr, const std::string& note = "");

/// Model config stored in a checkpoint header (construct the model first,
/// then load into it).
ModelConfig read_checkpoint_model_config(const std::filesystem::path& file);
OimConfig read_checkpoint_oim_config(const std::filesystem::path& file);
bool checkpoint_has_oim(const std::filesystem::path& file);

/// Load arrays into an already-constructed model (and OIM state, when both
/// the file and the argument have one). Shape or name mismatches raise
/// ConfigError.
void load_checkpoint(const std::filesystem::path& file, PersonSearchModel& model,
                     OimState* oim = nullptr);

/// Convenience: construct model (+ OIM when present) straight from a file.
struct LoadedCheckpoint {
  PersonSearchModel model;
  OimState oim;
  bool has_oim = false;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

/// Raw named arrays, for bitwise comparisons.
std::map<std::string, std::vector<real>> read_checkpoint_arrays(const std::filesystem::path& file);

// config <-> JSON (also used by run manifests)
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace psearch
