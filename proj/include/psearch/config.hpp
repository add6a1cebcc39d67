#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "psearch/evaluation.hpp"
#include "psearch/model.hpp"
#include "psearch/synthdata.hpp"
#include "psearch/trainer.hpp"

namespace psearch {

/// Flat key-value config file with [section] headers, '#' comments and
/// `key = value` lines. Reads track which keys were consumed so unknown
/// keys can be rejected.
class IniFile {
 public:
  IniFile() = default;
  static IniFile parse_file(const std::filesystem::path& file);
  static IniFile parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  int get_int(const std::string& section, const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& section, const std::string& key,
                        std::uint64_t fallback) const;
  real get_real(const std::string& section, const std::string& key, real fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  /// CLI-style override ("section.key=value").
  void set(const std::string& section, const std::string& key, const std::string& value);

  /// Keys present in the file but never consumed by any getter.
  std::set<std::string> unused_keys() const;
  void require_fully_consumed() const;  // throws ConfigError listing unknown keys

  const std::map<std::string, std::string>& raw() const { return values_; }

 private:
  std::map<std::string, std::string> values_;  // "section.key" -> value
  mutable std::set<std::string> consumed_;
};

// Builders consuming the documented sections. Every key is optional and
// falls back to the library default.
SyntheticSpec synthetic_spec_from_ini(const IniFile& ini);   // [dataset]
ModelConfig model_config_from_ini(const IniFile& ini);       // [model] [detector] [reid]
TrainConfig train_config_from_ini(const IniFile& ini);       // [train] [sna] [oim]
SearchOptions search_options_from_ini(const IniFile& ini);   // [eval]

}  // namespace psearch
