#include "psearch/model.hpp"

#include <cstring>

namespace psearch {

void ModelConfig::validate() const {
  if (input_mid_channels < 1 || input_out_channels < 1)
    throw ConfigError("ModelConfig: invalid input layer channels");
  // stage chains are validated by the component constructors
}

PersonSearchModel::PersonSearchModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  input_ = InputLayer(cfg_.input_mid_channels, cfg_.input_out_channels, cfg_.init_seed);
  Rng rng(cfg_.init_seed);
  Rng det_rng = rng.substream("det");
  Rng reid_rng = rng.substream("reid");
  det_ = DetectionNet(cfg_.detector, cfg_.input_out_channels, det_rng);
  reid_ = ReidNet(cfg_.reid, cfg_.input_out_channels, cfg_.detector.layer1.out_channels,
                  cfg_.detector.layer2.out_channels, reid_rng);
}

std::vector<Detection> PersonSearchModel::detect(const Tensor& image) {
  const FeatureMap x0 = input_.forward(image);
  const auto f = det_.forward(x0);
  return decode_and_nms(f.preds, det_.config());
}

Tensor PersonSearchModel::embed_boxes(const Tensor& image, const std::vector<Box>& boxes) {
  const FeatureMap x0 = input_.forward(image);
  const auto f = det_.forward(x0);
  const FeatureMap fused = reid_.forward_scene(x0, f.tap1, f.tap2);
  return reid_.forward_boxes(fused, boxes, /*train=*/false);
}

ParamRefs PersonSearchModel::named_params() {
  ParamRefs out;
  input_.register_params("input", out);
  det_.register_params("det", out);
  reid_.register_params("reid", out);
  return out;
}

BufferRefs PersonSearchModel::named_buffers() {
  BufferRefs out;
  reid_.register_buffers("reid", out);
  return out;
}

ParamRefs PersonSearchModel::params_with_prefix(const std::string& prefix) {
  ParamRefs all = named_params();
  ParamRefs out;
  for (auto& p : all) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

std::uint64_t params_checksum(PersonSearchModel& model, const std::string& prefix) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : model.params_with_prefix(prefix)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value->data());
    const std::size_t n = p.value->size() * sizeof(real);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace psearch
