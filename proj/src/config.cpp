#include "psearch/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace psearch {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

IniFile IniFile::parse_file(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot open config file: " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_string(ss.str());
}

IniFile IniFile::parse_string(const std::string& text) {
  IniFile ini;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) +
                                                ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    ini.values_[section + "." + key] = value;
  }
  return ini;
}

bool IniFile::has(const std::string& section, const std::string& key) const {
  return values_.count(section + "." + key) > 0;
}

std::string IniFile::get_string(const std::string& section, const std::string& key,
                                const std::string& fallback) const {
  const auto it = values_.find(section + "." + key);
  if (it == values_.end()) return fallback;
  consumed_.insert(it->first);
  return it->second;
}

int IniFile::get_int(const std::string& section, const std::string& key, int fallback) const {
  const std::string v = get_string(section, key, "");
  if (v.empty()) return fallback;
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + section + "." + key + ": '" + v + "' is not an integer");
  }
}

std::uint64_t IniFile::get_u64(const std::string& section, const std::string& key,
                               std::uint64_t fallback) const {
  const std::string v = get_string(section, key, "");
  if (v.empty()) return fallback;
  try {
    std::size_t pos = 0;
    const std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + section + "." + key + ": '" + v + "' is not an integer");
  }
}

real IniFile::get_real(const std::string& section, const std::string& key, real fallback) const {
  const std::string v = get_string(section, key, "");
  if (v.empty()) return fallback;
  try {
    std::size_t pos = 0;
    const real r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + section + "." + key + ": '" + v + "' is not a number");
  }
}

bool IniFile::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  std::string v = get_string(section, key, "");
  if (v.empty()) return fallback;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + section + "." + key + ": '" + v + "' is not a boolean");
}

void IniFile::set(const std::string& section, const std::string& key, const std::string& value) {
  values_[section + "." + key] = value;
}

std::set<std::string> IniFile::unused_keys() const {
  std::set<std::string> out;
  for (const auto& [k, v] : values_) {
    if (!consumed_.count(k)) out.insert(k);
  }
  return out;
}

void IniFile::require_fully_consumed() const {
  const auto unused = unused_keys();
  if (unused.empty()) return;
  std::string msg = "unknown config keys:";
  for (const auto& k : unused) msg += " " + k;
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Section builders
// ---------------------------------------------------------------------------

SyntheticSpec synthetic_spec_from_ini(const IniFile& ini) {
  SyntheticSpec s;
  s.num_identities = ini.get_int("dataset", "num_identities", s.num_identities);
  s.train_scenes = ini.get_int("dataset", "train_scenes", s.train_scenes);
  s.gallery_scenes = ini.get_int("dataset", "gallery_scenes", s.gallery_scenes);
  s.query_scenes = ini.get_int("dataset", "query_scenes", s.query_scenes);
  s.persons_min = ini.get_int("dataset", "persons_min", s.persons_min);
  s.persons_max = ini.get_int("dataset", "persons_max", s.persons_max);
  s.sprite_min = ini.get_int("dataset", "sprite_min", s.sprite_min);
  s.sprite_max = ini.get_int("dataset", "sprite_max", s.sprite_max);
  s.clutter_level = ini.get_real("dataset", "clutter_level", s.clutter_level);
  s.occlusion_prob = ini.get_real("dataset", "occlusion_prob", s.occlusion_prob);
  s.image_size = ini.get_int("dataset", "image_size", s.image_size);
  s.shared_identities = ini.get_bool("dataset", "shared_identities", s.shared_identities);
  s.seed = ini.get_u64("dataset", "seed", s.seed);
  s.validate();
  return s;
}

namespace {
StageSpec stage_from_ini(const IniFile& ini, const std::string& section,
                         const std::string& name, StageSpec fallback) {
  StageSpec s = fallback;
  s.out_channels = ini.get_int(section, name + "_channels", s.out_channels);
  s.depth = ini.get_int(section, name + "_depth", s.depth);
  return s;
}
}  // namespace

ModelConfig model_config_from_ini(const IniFile& ini) {
  ModelConfig cfg;
  cfg.input_mid_channels = ini.get_int("model", "input_mid_channels", cfg.input_mid_channels);
  cfg.input_out_channels = ini.get_int("model", "input_out_channels", cfg.input_out_channels);
  cfg.init_seed = ini.get_u64("model", "init_seed", cfg.init_seed);

  cfg.detector.layer1 = stage_from_ini(ini, "detector", "layer1", cfg.detector.layer1);
  cfg.detector.layer2 = stage_from_ini(ini, "detector", "layer2", cfg.detector.layer2);
  cfg.detector.layer2.in_channels = cfg.detector.layer1.out_channels;
  cfg.detector.head_channels = ini.get_int("detector", "head_channels", cfg.detector.head_channels);
  cfg.detector.score_threshold =
      ini.get_real("detector", "score_threshold", cfg.detector.score_threshold);
  cfg.detector.nms_iou = ini.get_real("detector", "nms_iou", cfg.detector.nms_iou);
  cfg.detector.max_detections = ini.get_int("detector", "max_detections", cfg.detector.max_detections);

  const std::string mode = ini.get_string("reid", "mode", "homogeneous");
  if (mode == "homogeneous") {
    cfg.reid.mode = FusionMode::homogeneous;
    cfg.reid.layer1 = cfg.detector.layer1;  // widths mirror the detector
    cfg.reid.layer2 = cfg.detector.layer2;
  } else if (mode == "heterogeneous") {
    cfg.reid.mode = FusionMode::heterogeneous;
    cfg.reid.layer1 = stage_from_ini(ini, "reid", "layer1", cfg.reid.layer1);
    cfg.reid.layer2 = stage_from_ini(ini, "reid", "layer2", cfg.reid.layer2);
    cfg.reid.layer2.in_channels = cfg.reid.layer1.out_channels;
    cfg.reid.ada_out_channels = ini.get_int("reid", "ada_out_channels", cfg.reid.ada_out_channels);
  } else {
    throw ConfigError("reid.mode must be homogeneous or heterogeneous, got '" + mode + "'");
  }
  cfg.reid.head_mid_channels = ini.get_int("reid", "head_mid_channels", cfg.reid.head_mid_channels);
  cfg.reid.embedding_dim = ini.get_int("reid", "embedding_dim", cfg.reid.embedding_dim);
  cfg.reid.roi_h = ini.get_int("reid", "roi_h", cfg.reid.roi_h);
  cfg.reid.roi_w = ini.get_int("reid", "roi_w", cfg.reid.roi_w);
  cfg.reid.bn_momentum = ini.get_real("reid", "bn_momentum", cfg.reid.bn_momentum);
  return cfg;
}

TrainConfig train_config_from_ini(const IniFile& ini) {
  TrainConfig cfg;
  cfg.regime = regime_from_string(ini.get_string("train", "regime", "incremental"));
  cfg.det_epochs = ini.get_int("train", "det_epochs", cfg.det_epochs);
  cfg.reid_epochs = ini.get_int("train", "reid_epochs", cfg.reid_epochs);
  cfg.joint_epochs = ini.get_int("train", "joint_epochs", cfg.joint_epochs);
  cfg.det_batch = ini.get_int("train", "det_batch", cfg.det_batch);
  cfg.reid_batch = ini.get_int("train", "reid_batch", cfg.reid_batch);
  cfg.base_lr = ini.get_real("train", "base_lr", cfg.base_lr);
  cfg.det_lr_decay_epoch = ini.get_int("train", "det_lr_decay_epoch", cfg.det_lr_decay_epoch);
  cfg.reid_lr_decay_epoch = ini.get_int("train", "reid_lr_decay_epoch", cfg.reid_lr_decay_epoch);
  cfg.warmup_epochs = ini.get_int("train", "warmup_epochs", cfg.warmup_epochs);
  cfg.momentum = ini.get_real("train", "momentum", cfg.momentum);
  cfg.hybrid_det_lr = ini.get_real("train", "hybrid_det_lr", cfg.hybrid_det_lr);
  cfg.keep_epoch_checkpoints =
      ini.get_bool("train", "keep_epoch_checkpoints", cfg.keep_epoch_checkpoints);
  cfg.seed = ini.get_u64("train", "seed", cfg.seed);

  cfg.sna.lambda1 = ini.get_real("sna", "lambda1", cfg.sna.lambda1);
  cfg.sna.lambda2 = ini.get_real("sna", "lambda2", cfg.sna.lambda2);
  cfg.sna.n = ini.get_int("sna", "n", cfg.sna.n);

  cfg.oim_queue_size = ini.get_int("oim", "queue_size", cfg.oim_queue_size);
  cfg.oim_momentum = ini.get_real("oim", "momentum", cfg.oim_momentum);
  cfg.oim_temperature = ini.get_real("oim", "temperature", cfg.oim_temperature);
  cfg.triplet_margin = ini.get_real("oim", "triplet_margin", cfg.triplet_margin);
  cfg.validate();
  return cfg;
}

SearchOptions search_options_from_ini(const IniFile& ini) {
  SearchOptions opts;
  opts.use_cws = ini.get_bool("eval", "use_cws", opts.use_cws);
  opts.exclude_absent_queries =
      ini.get_bool("eval", "exclude_absent_queries", opts.exclude_absent_queries);
  opts.iou_thresh = ini.get_real("eval", "iou_thresh", opts.iou_thresh);
  return opts;
}

}  // namespace psearch
