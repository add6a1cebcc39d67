#pragma once

#include <string>
#include <vector>

#include "psearch/blocks.hpp"
#include "psearch/detector.hpp"
#include "psearch/reid.hpp"

namespace psearch {

struct ModelConfig {
  int input_mid_channels = 12;
  int input_out_channels = 24;
  DetectorConfig detector;
  ReidConfig reid;
  std::uint64_t init_seed = 1;

  void validate() const;
};

/// The task-incremental person search network: a frozen shared input layer,
/// the detection side-net, and the re-id side-net bridged by side-ada and
/// two side-fusion taps.
class PersonSearchModel {
 public:
  PersonSearchModel() = default;
  explicit PersonSearchModel(const ModelConfig& cfg);

  // --- eval-mode pipeline -------------------------------------------------
  std::vector<Detection> detect(const Tensor& image);
  /// Embeddings for the given boxes, eval mode (running BN statistics).
  Tensor embed_boxes(const Tensor& image, const std::vector<Box>& boxes);

  // --- component access for training loops --------------------------------
  InputLayer& input() { return input_; }
  DetectionNet& detector() { return det_; }
  ReidNet& reid() { return reid_; }

  ParamRefs named_params();
  BufferRefs named_buffers();
  /// Parameters under a name prefix ("input", "det", "reid").
  ParamRefs params_with_prefix(const std::string& prefix);

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  InputLayer input_;
  DetectionNet det_;
  ReidNet reid_;
};

/// FNV-1a over the raw bytes of every parameter under the prefix; used for
/// freeze checks.
std::uint64_t params_checksum(PersonSearchModel& model, const std::string& prefix);

}  // namespace psearch
