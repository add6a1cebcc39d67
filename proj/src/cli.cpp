#include "psearch/cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "psearch/version.hpp"

namespace psearch {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void prepare_out_dir(const fs::path& out_dir, bool force) {
  if (fs::exists(out_dir / "manifest.json") && !force)
    throw ConfigError("output directory already holds a run (" + out_dir.string() +
                      "); pass --force to overwrite");
  fs::create_directories(out_dir);
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    const std::optional<fs::path>& config_path, const IniFile& config,
                    std::uint64_t seed) {
  json j;
  j["command"] = command;
  j["config_path"] = config_path ? config_path->string() : "";
  j["config"] = json::object();
  for (const auto& [k, v] : config.raw()) j["config"][k] = v;
  j["seed"] = seed;
  j["out_dir"] = out_dir.string();
  j["code_version"] = kCodeVersion;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  j["created"] = buf;
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw InputError("cannot write manifest in " + out_dir.string());
  os << j.dump(2) << "\n";
}

void run_gen_data(const fs::path& spec_path, const fs::path& out_dir, bool force) {
  const IniFile ini = IniFile::parse_file(spec_path);
  const SyntheticSpec spec = synthetic_spec_from_ini(ini);
  ini.require_fully_consumed();
  prepare_out_dir(out_dir, force);
  write_manifest(out_dir, "gen-data", spec_path, ini, spec.seed);
  generate(spec, out_dir);
}

/// Hash of the generated content only (the manifest carries a timestamp
/// and stays out of it).
std::uint64_t dataset_hash(const fs::path& out_dir) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_u64 = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const char* split : {"train", "gallery", "query"}) mix_u64(directory_hash(out_dir / split));
  std::ifstream is(out_dir / "dataset.json", std::ios::binary);
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

namespace {

/// Consume every documented section so a unified config file passes the
/// unknown-key check regardless of the command using it.
void consume_all_sections(const IniFile& ini) {
  if (ini.has("dataset", "num_identities") || ini.has("dataset", "seed"))
    synthetic_spec_from_ini(ini);
  model_config_from_ini(ini);
  train_config_from_ini(ini);
  search_options_from_ini(ini);
  ini.require_fully_consumed();
}

PersonSearchEval eval_and_write(PersonSearchModel& model, const Dataset& data,
                                const SearchOptions& opts, const fs::path& out_dir) {
  const PersonSearchEval eval = evaluate_person_search(model, data, opts);
  write_metrics_json(out_dir / "metrics.json", eval);
  write_per_query_csv(out_dir / "per_query.csv", eval.search);
  return eval;
}

}  // namespace

TrainOutputs run_train(Regime regime, const IniFile& config,
                       const std::optional<fs::path>& config_path, const fs::path& data_dir,
                       const fs::path& out_dir, const std::optional<fs::path>& det_ckpt,
                       std::optional<std::uint64_t> seed_override, bool force) {
  TrainConfig tcfg = train_config_from_ini(config);
  tcfg.regime = regime;
  if (seed_override) tcfg.seed = *seed_override;
  ModelConfig mcfg = model_config_from_ini(config);
  if (seed_override) mcfg.init_seed = *seed_override;
  const SearchOptions search_opts = search_options_from_ini(config);
  consume_all_sections(config);

  prepare_out_dir(out_dir, force);
  write_manifest(out_dir, "train --regime " + regime_name(regime), config_path, config, tcfg.seed);
  const Dataset data = load_dataset(data_dir);

  TrainOutputs out;
  PersonSearchModel model;
  if (det_ckpt && regime != Regime::joint) {
    // resume from an existing stage-1 checkpoint; architecture comes from it
    model = PersonSearchModel(read_checkpoint_model_config(*det_ckpt));
    load_checkpoint(*det_ckpt, model);
    out.stage1_checkpoint = *det_ckpt;
  } else {
    model = PersonSearchModel(mcfg);
    if (regime != Regime::joint) {
      const StageArtifacts s1 = train_detector(data, model, tcfg, out_dir);
      out.stage1_checkpoint = s1.checkpoint;
    }
  }

  OimConfig oim_cfg;
  oim_cfg.num_labeled = static_cast<int>(data.train_identities().size());
  oim_cfg.queue_size = tcfg.oim_queue_size;
  oim_cfg.momentum = tcfg.oim_momentum;
  oim_cfg.temperature = tcfg.oim_temperature;
  OimState oim(oim_cfg);

  StageArtifacts s2;
  switch (regime) {
    case Regime::incremental: s2 = train_reid(data, model, oim, tcfg, out_dir); break;
    case Regime::joint: s2 = train_joint(data, model, oim, tcfg, out_dir); break;
    case Regime::hybrid: s2 = train_hybrid(data, model, oim, tcfg, out_dir); break;
  }
  out.final_checkpoint = s2.checkpoint;

  const PersonSearchEval eval = eval_and_write(model, data, search_opts, out_dir);
  out.metrics_file = out_dir / "metrics.json";
  out.detection_ap = eval.detection ? eval.detection->ap : 0.0;
  out.search_map = eval.search.map;
  out.search_top1 = eval.search.top1;
  return out;
}

EvalOutputs run_eval(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out_dir,
                     bool use_cws, bool force) {
  if (!fs::exists(ckpt)) throw InputError("checkpoint not found: " + ckpt.string());
  prepare_out_dir(out_dir, force);
  IniFile empty;
  write_manifest(out_dir, std::string("eval --ckpt ") + ckpt.string() + (use_cws ? " --cws" : ""),
                 std::nullopt, empty, 0);
  const Dataset data = load_dataset(data_dir);
  LoadedCheckpoint loaded = load_checkpoint(ckpt);

  SearchOptions opts;
  opts.use_cws = use_cws;
  EvalOutputs out;
  out.eval = eval_and_write(loaded.model, data, opts, out_dir);
  out.metrics_file = out_dir / "metrics.json";
  write_gallery_dumps(loaded.model, data.gallery, out_dir / "detections.jsonl",
                      out_dir / "embeddings.jsonl");
  return out;
}

CompareOutputs run_compare(const IniFile& config, const std::optional<fs::path>& config_path,
                           const fs::path& data_dir, const fs::path& out_dir,
                           std::optional<std::uint64_t> seed_override, bool force) {
  TrainConfig tcfg = train_config_from_ini(config);
  if (seed_override) tcfg.seed = *seed_override;
  ModelConfig mcfg = model_config_from_ini(config);
  if (seed_override) mcfg.init_seed = *seed_override;
  const SearchOptions search_opts = search_options_from_ini(config);
  consume_all_sections(config);

  prepare_out_dir(out_dir, force);
  write_manifest(out_dir, "compare", config_path, config, tcfg.seed);
  const Dataset data = load_dataset(data_dir);

  const auto make_oim = [&]() {
    OimConfig oc;
    oc.num_labeled = static_cast<int>(data.train_identities().size());
    oc.queue_size = tcfg.oim_queue_size;
    oc.momentum = tcfg.oim_momentum;
    oc.temperature = tcfg.oim_temperature;
    return OimState(oc);
  };

  CompareOutputs out;

  // shared stage 1
  PersonSearchModel stage1_model(mcfg);
  const StageArtifacts s1 = train_detector(data, stage1_model, tcfg, out_dir / "stage1");
  {
    const auto m = eval_detection(stage1_model, data.gallery);
    out.stage1_detection_ap = m ? m->ap : 0.0;
  }

  const auto eval_row = [&](PersonSearchModel& model, const std::string& name) {
    const PersonSearchEval ev = evaluate_person_search(model, data, search_opts);
    RegimeRow row;
    row.regime = name;
    row.detection_ap = ev.detection ? ev.detection->ap : 0.0;
    row.detection_recall = ev.detection ? ev.detection->recall : 0.0;
    row.map = ev.search.map;
    row.top1 = ev.search.top1;
    return row;
  };

  {  // incremental: stage 2 on the frozen stage-1 detector
    PersonSearchModel model(read_checkpoint_model_config(s1.checkpoint));
    load_checkpoint(s1.checkpoint, model);
    OimState oim = make_oim();
    train_reid(data, model, oim, tcfg, out_dir / "incremental");
    out.rows.push_back(eval_row(model, "incremental"));
  }
  {  // joint: fresh model, both losses
    PersonSearchModel model(mcfg);
    OimState oim = make_oim();
    train_joint(data, model, oim, tcfg, out_dir / "joint");
    out.rows.push_back(eval_row(model, "joint"));
  }
  {  // hybrid: stage-2 style with tiny detector lr
    PersonSearchModel model(read_checkpoint_model_config(s1.checkpoint));
    load_checkpoint(s1.checkpoint, model);
    OimState oim = make_oim();
    train_hybrid(data, model, oim, tcfg, out_dir / "hybrid");
    out.rows.push_back(eval_row(model, "hybrid"));
  }

  out.incremental_ge_joint_ap = out.rows[0].detection_ap >= out.rows[1].detection_ap;
  out.incremental_gt_hybrid_ap = out.rows[0].detection_ap > out.rows[2].detection_ap;

  json rep;
  rep["seed"] = tcfg.seed;
  rep["stage1_detection_ap"] = out.stage1_detection_ap;
  json rows = json::array();
  for (const auto& r : out.rows) {
    rows.push_back(json{{"regime", r.regime},
                        {"detection_ap", r.detection_ap},
                        {"detection_recall", r.detection_recall},
                        {"map", r.map},
                        {"top1", r.top1}});
  }
  rep["rows"] = std::move(rows);
  rep["ordering"] = {{"incremental_ge_joint_detection_ap", out.incremental_ge_joint_ap},
                     {"incremental_gt_hybrid_detection_ap", out.incremental_gt_hybrid_ap}};
  out.report_json = out_dir / "report.json";
  std::ofstream js(out.report_json);
  js << rep.dump(2) << "\n";

  out.report_md = out_dir / "report.md";
  std::ofstream md(out.report_md);
  md << "# Training regime comparison (seed " << tcfg.seed << ")\n\n";
  md << "| Training | AP | Recall | mAP | top-1 |\n";
  md << "|---|---|---|---|---|\n";
  md.precision(4);
  for (const auto& r : out.rows) {
    md << "| " << r.regime << " | " << r.detection_ap << " | " << r.detection_recall << " | "
       << r.map << " | " << r.top1 << " |\n";
  }
  md << "\nOrdering checks: incremental >= joint detection AP: "
     << (out.incremental_ge_joint_ap ? "pass" : "fail")
     << "; incremental > hybrid detection AP: "
     << (out.incremental_gt_hybrid_ap ? "pass" : "fail") << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// argv entry point
// ---------------------------------------------------------------------------

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"desk-scale fully decoupled person search"};
  app.require_subcommand(1);

  std::string spec_path, config_path, data_dir, out_dir, ckpt_path, det_ckpt, regime_str;
  std::uint64_t seed = 0;
  bool has_seed = false, force = false, use_cws = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "dataset spec file (ini)")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite an existing run directory");

  auto* train = app.add_subcommand("train", "train a person search model");
  train->add_option("--regime", regime_str, "incremental|joint|hybrid")->required();
  train->add_option("--config", config_path, "training config file (ini)")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--det-ckpt", det_ckpt, "stage-1 checkpoint to resume from");
  train->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
    has_seed = true;
  });
  train->add_flag("--force", force, "overwrite an existing run directory");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_flag("--cws", use_cws, "weight similarities by detection scores");
  ev->add_flag("--force", force, "overwrite an existing run directory");

  auto* cmp = app.add_subcommand("compare", "run all three regimes and report");
  cmp->add_option("--config", config_path, "training config file (ini)")->required();
  cmp->add_option("--data", data_dir, "dataset directory")->required();
  cmp->add_option("--out", out_dir, "output directory")->required();
  cmp->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
    has_seed = true;
  });
  cmp->add_flag("--force", force, "overwrite an existing run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const std::optional<std::uint64_t> seed_opt =
        has_seed ? std::optional<std::uint64_t>(seed) : std::nullopt;
    if (gen->parsed()) {
      run_gen_data(spec_path, out_dir, force);
      char hex[24];
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(dataset_hash(out_dir)));
      std::cout << "dataset written to " << out_dir << "\n"
                << "dataset_hash=" << hex << "\n";
    } else if (train->parsed()) {
      const Regime regime = regime_from_string(regime_str);
      const IniFile ini = IniFile::parse_file(config_path);
      const auto res = run_train(regime, ini, fs::path(config_path), data_dir, out_dir,
                                 det_ckpt.empty() ? std::nullopt
                                                  : std::optional<fs::path>(det_ckpt),
                                 seed_opt, force);
      std::cout << "detection_ap=" << res.detection_ap << " map=" << res.search_map
                << " top1=" << res.search_top1 << "\n"
                << "metrics: " << res.metrics_file << "\n";
    } else if (ev->parsed()) {
      const auto res = run_eval(ckpt_path, data_dir, out_dir, use_cws, force);
      std::cout << "detection_ap=" << (res.eval.detection ? res.eval.detection->ap : 0.0)
                << " map=" << res.eval.search.map << " top1=" << res.eval.search.top1 << "\n"
                << "metrics: " << res.metrics_file << "\n";
    } else if (cmp->parsed()) {
      const IniFile ini = IniFile::parse_file(config_path);
      const auto res = run_compare(ini, fs::path(config_path), data_dir, out_dir, seed_opt, force);
      std::cout << "report: " << res.report_md << "\n";
      for (const auto& r : res.rows) {
        std::cout << r.regime << ": ap=" << r.detection_ap << " map=" << r.map
                  << " top1=" << r.top1 << "\n";
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace psearch
