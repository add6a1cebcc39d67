#include "psearch/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace psearch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'P', 'S', 'C', 'K', 'P', 'T', '1', '\n'};

json stage_spec_to_json(const StageSpec& s) {
  return json{{"in_channels", s.in_channels},
              {"out_channels", s.out_channels},
              {"depth", s.depth},
              {"downsample", s.downsample}};
}

StageSpec stage_spec_from_json(const json& j) {
  StageSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.depth = j.at("depth").get<int>();
  s.downsample = j.at("downsample").get<bool>();
  return s;
}

json model_config_json(const ModelConfig& cfg) {
  json j;
  j["input_mid_channels"] = cfg.input_mid_channels;
  j["input_out_channels"] = cfg.input_out_channels;
  j["init_seed"] = cfg.init_seed;
  j["detector"] = {{"layer1", stage_spec_to_json(cfg.detector.layer1)},
                   {"layer2", stage_spec_to_json(cfg.detector.layer2)},
                   {"head_channels", cfg.detector.head_channels},
                   {"score_threshold", cfg.detector.score_threshold},
                   {"nms_iou", cfg.detector.nms_iou},
                   {"max_detections", cfg.detector.max_detections}};
  j["reid"] = {{"mode", cfg.reid.mode == FusionMode::homogeneous ? "homogeneous" : "heterogeneous"},
               {"layer1", stage_spec_to_json(cfg.reid.layer1)},
               {"layer2", stage_spec_to_json(cfg.reid.layer2)},
               {"ada_out_channels", cfg.reid.ada_out_channels},
               {"head_mid_channels", cfg.reid.head_mid_channels},
               {"embedding_dim", cfg.reid.embedding_dim},
               {"roi_h", cfg.reid.roi_h},
               {"roi_w", cfg.reid.roi_w},
               {"bn_momentum", cfg.reid.bn_momentum}};
  return j;
}

ModelConfig model_config_from_json_obj(const json& j) {
  ModelConfig cfg;
  cfg.input_mid_channels = j.at("input_mid_channels").get<int>();
  cfg.input_out_channels = j.at("input_out_channels").get<int>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  const auto& d = j.at("detector");
  cfg.detector.layer1 = stage_spec_from_json(d.at("layer1"));
  cfg.detector.layer2 = stage_spec_from_json(d.at("layer2"));
  cfg.detector.head_channels = d.at("head_channels").get<int>();
  cfg.detector.score_threshold = d.at("score_threshold").get<real>();
  cfg.detector.nms_iou = d.at("nms_iou").get<real>();
  cfg.detector.max_detections = d.at("max_detections").get<int>();
  const auto& r = j.at("reid");
  const std::string mode = r.at("mode").get<std::string>();
  if (mode != "homogeneous" && mode != "heterogeneous")
    throw ConfigError("checkpoint: unknown fusion mode " + mode);
  cfg.reid.mode = mode == "homogeneous" ? FusionMode::homogeneous : FusionMode::heterogeneous;
  cfg.reid.layer1 = stage_spec_from_json(r.at("layer1"));
  cfg.reid.layer2 = stage_spec_from_json(r.at("layer2"));
  cfg.reid.ada_out_channels = r.at("ada_out_channels").get<int>();
  cfg.reid.head_mid_channels = r.at("head_mid_channels").get<int>();
  cfg.reid.embedding_dim = r.at("embedding_dim").get<int>();
  cfg.reid.roi_h = r.at("roi_h").get<int>();
  cfg.reid.roi_w = r.at("roi_w").get<int>();
  cfg.reid.bn_momentum = r.at("bn_momentum").get<real>();
  return cfg;
}

struct Entry {
  std::string name;
  std::string kind;  // "param" | "buffer"
  Tensor* tensor;
};

std::vector<Entry> collect_entries(PersonSearchModel& model, OimState* oim) {
  std::vector<Entry> entries;
  for (auto& p : model.named_params()) entries.push_back({p.name, "param", p.value});
  BufferRefs bufs = model.named_buffers();
  if (oim) oim->register_buffers("state.oim", bufs);
  for (auto& b : bufs) entries.push_back({b.name, "buffer", b.value});
  return entries;
}

json read_header(std::ifstream& is, const fs::path& file) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw ConfigError("not a checkpoint file: " + file.string());
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw ConfigError("truncated checkpoint header: " + file.string());
  return json::parse(text);
}

}  // namespace

void save_checkpoint(const fs::path& file, PersonSearchModel& model, OimState* oim,
                     const std::string& note) {
  const auto entries = collect_entries(model, oim);
  json header;
  header["format"] = "psearch-checkpoint";
  header["version"] = 1;
  header["note"] = note;
  header["model"] = model_config_json(model.config());
  header["frozen"] = json::array({"input"});
  if (oim) {
    header["oim"] = {{"num_labeled", oim->config().num_labeled},
                     {"queue_size", oim->config().queue_size},
                     {"momentum", oim->config().momentum},
                     {"temperature", oim->config().temperature}};
  }
  json table = json::array();
  for (const auto& e : entries) {
    table.push_back(json{{"name", e.name},
                         {"kind", e.kind},
                         {"shape", {e.tensor->n(), e.tensor->c(), e.tensor->h(), e.tensor->w()}}});
  }
  header["entries"] = std::move(table);
  const std::string text = header.dump();

  fs::create_directories(file.parent_path());
  std::ofstream os(file, std::ios::binary);
  if (!os) throw InputError("cannot open for writing: " + file.string());
  os.write(kMagic, 8);
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries) {
    os.write(reinterpret_cast<const char*>(e.tensor->data()),
             static_cast<std::streamsize>(e.tensor->size() * sizeof(real)));
  }
  if (!os) throw InputError("failed writing checkpoint: " + file.string());
}

ModelConfig read_checkpoint_model_config(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + file.string());
  return model_config_from_json_obj(read_header(is, file).at("model"));
}

bool checkpoint_has_oim(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + file.string());
  return read_header(is, file).contains("oim");
}

OimConfig read_checkpoint_oim_config(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + file.string());
  const json h = read_header(is, file);
  if (!h.contains("oim")) throw ConfigError("checkpoint has no OIM state: " + file.string());
  OimConfig cfg;
  cfg.num_labeled = h["oim"].at("num_labeled").get<int>();
  cfg.queue_size = h["oim"].at("queue_size").get<int>();
  cfg.momentum = h["oim"].at("momentum").get<real>();
  cfg.temperature = h["oim"].at("temperature").get<real>();
  return cfg;
}

void load_checkpoint(const fs::path& file, PersonSearchModel& model, OimState* oim) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + file.string());
  const json header = read_header(is, file);

  auto entries = collect_entries(model, oim);
  std::size_t next = 0;
  for (const auto& j : header.at("entries")) {
    const std::string name = j.at("name").get<std::string>();
    const auto shape = j.at("shape").get<std::vector<int>>();
    Tensor stored(shape[0], shape[1], shape[2], shape[3]);
    is.read(reinterpret_cast<char*>(stored.data()),
            static_cast<std::streamsize>(stored.size() * sizeof(real)));
    if (!is) throw ConfigError("truncated checkpoint payload: " + file.string());
    if (name.rfind("state.oim", 0) == 0 && !oim) continue;  // caller did not ask for OIM state
    if (next >= entries.size() || entries[next].name != name)
      throw ConfigError("checkpoint/architecture mismatch at entry '" + name + "'");
    Entry& e = entries[next++];
    if (e.kind == "buffer") {
      *e.tensor = std::move(stored);  // buffers adopt the stored shape
    } else {
      if (!e.tensor->same_shape(stored))
        throw ConfigError("checkpoint/architecture mismatch: '" + name + "' has shape " +
                          stored.shape_str() + ", model expects " + e.tensor->shape_str());
      *e.tensor = std::move(stored);
    }
  }
  if (next != entries.size())
    throw ConfigError("checkpoint is missing entries expected by the model");
}

LoadedCheckpoint load_checkpoint(const fs::path& file) {
  LoadedCheckpoint out;
  out.model = PersonSearchModel(read_checkpoint_model_config(file));
  out.has_oim = checkpoint_has_oim(file);
  if (out.has_oim) {
    out.oim = OimState(read_checkpoint_oim_config(file));
    load_checkpoint(file, out.model, &out.oim);
  } else {
    load_checkpoint(file, out.model, nullptr);
  }
  return out;
}

std::map<std::string, std::vector<real>> read_checkpoint_arrays(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + file.string());
  const json header = read_header(is, file);
  std::map<std::string, std::vector<real>> out;
  for (const auto& j : header.at("entries")) {
    const auto shape = j.at("shape").get<std::vector<int>>();
    const std::size_t n = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2] * shape[3];
    std::vector<real> data(n);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(real)));
    if (!is) throw ConfigError("truncated checkpoint payload: " + file.string());
    out[j.at("name").get<std::string>()] = std::move(data);
  }
  return out;
}

std::string model_config_to_json(const ModelConfig& cfg) { return model_config_json(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
  return model_config_from_json_obj(json::parse(text));
}

}  // namespace psearch
