#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "psearch/geometry.hpp"
#include "psearch/tensor.hpp"

namespace psearch {

/// Deterministic synthetic person-search dataset: scenes of procedurally
/// textured person sprites (identity-specific colors and patterns, shared
/// head/body structure) over cluttered backgrounds. GT boxes are exact by
/// construction, so both sub-tasks are learnable and verifiable.
struct SyntheticSpec {
  int num_identities = 10;
  int train_scenes = 200;
  int gallery_scenes = 60;
  int query_scenes = 30;
  int persons_min = 2;
  int persons_max = 4;
  int sprite_min = 22;   // sprite height range, pixels
  int sprite_max = 44;
  real clutter_level = 0.5;   // in [0,1], density of distractor shapes
  real occlusion_prob = 0.1;  // chance a sprite may overlap a placed one
  int image_size = 128;
  bool shared_identities = true;  // eval splits reuse train identities
  std::uint64_t seed = 17;

  void validate() const;
};

struct SceneRecord {
  std::string image;  // path relative to the split directory
  std::vector<Box> boxes;
  std::vector<int> identities;
};

struct DatasetSplit {
  std::filesystem::path dir;
  std::vector<SceneRecord> scenes;
};

struct Dataset {
  std::filesystem::path root;
  SyntheticSpec spec;
  DatasetSplit train, gallery, query;

  /// Sorted distinct identities of the train split (OIM label order).
  std::vector<int> train_identities() const;
};

/// Write the full dataset (train/gallery/query splits) under out_dir.
/// Identical spec (including seed) yields a byte-identical tree.
void generate(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

Dataset load_dataset(const std::filesystem::path& root);

/// Deterministic sprite renderer, exposed so label soundness can be checked
/// against the generator's own templates.
Tensor render_person_sprite(const SyntheticSpec& spec, int identity, int w, int h);

// binary PPM (P6) image I/O; tensors are (1, 3, H, W) in [0, 1]
void save_ppm(const std::filesystem::path& file, const Tensor& image);
Tensor load_ppm(const std::filesystem::path& file);

/// Content hash of a directory tree (relative paths + file bytes, sorted);
/// two generate() runs with the same spec hash identically.
std::uint64_t directory_hash(const std::filesystem::path& root);

}  // namespace psearch
