#pragma once

// Command-line front end: gen-data, meta-train, attack, eval, transfer.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsl/attacks.hpp"
#include "fsl/config.hpp"
#include "fsl/core.hpp"
#include "fsl/evaluation.hpp"
#include "fsl/model.hpp"
#include "fsl/taskdata.hpp"

namespace fsl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericError = 4, kOtherError = 1 };

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  int workers = default_workers();
  bool force = false;
  bool print_config = false;
  std::vector<std::string> overrides;  // "a.b=value"
};

// spdlog level from FSL_LOG (error, info, debug); info when unset.
inline spdlog::level::level_enum log_level_from_env() {
  const char* v = std::getenv("FSL_LOG");
  if (!v || !*v) return spdlog::level::info;
  const std::string s(v);
  if (s == "error") return spdlog::level::err;
  if (s == "info") return spdlog::level::info;
  if (s == "debug") return spdlog::level::debug;
  throw ConfigError("FSL_LOG must be one of error, info, debug (got '" + s + "')");
}

inline std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> log = [] {
    auto l = spdlog::stderr_color_mt("fsl");
    l->set_pattern("[%l] %v");
    return l;
  }();
  return log;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// User config from file, completed from defaults, then dotted overrides, then
// --seed, validated again after every step.
inline json load_config(const std::string& command, const CommonOptions& opt) {
  json user = opt.config_path.empty() ? json::object() : read_json_file(opt.config_path);
  json cfg = config::resolve(command, user);
  for (const auto& o : opt.overrides) config::apply_override(cfg, o);
  if (opt.seed) {
    if (command == "gen-data")
      cfg["dataset"]["seed"] = *opt.seed;
    else if (command == "eval" || command == "transfer")
      cfg["scenario"]["seed"] = *opt.seed;
    else
      cfg["seed"] = *opt.seed;
  }
  return config::resolve(command, cfg);
}

// Output paths of one command run. Refuses to clobber without --force.
class OutputDir {
 public:
  OutputDir(const std::string& dir, bool force) : dir_(dir), force_(force) {}

  fs::path claim(const std::string& relative) {
    const fs::path p = dir_ / relative;
    if (fs::exists(p) && !force_)
      throw ConfigError("refusing to overwrite " + p.string() + " (use --force)");
    fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
    return p;
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  bool force_;
};

inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::io, "cannot read back " + p.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(data));
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(DataErrorKind::io, "cannot open for writing: " + p.string());
  out << text;
  if (!out) throw DataError(DataErrorKind::io, "write failed: " + p.string());
}

// manifest.json: command, resolved config, its hash, and a hash per artifact.
// FSDS and FSCK have no metadata slot, so the manifest is where their config
// hash lives.
struct Manifest {
  std::string command;
  json config;
  json artifacts = json::array();

  void add(const OutputDir& out, const fs::path& p, const std::string& hash) {
    artifacts.push_back({{"path", fs::relative(p, out.dir()).generic_string()}, {"fnv1a64", hash}});
  }
  void add(const OutputDir& out, const fs::path& p) { add(out, p, file_hash(p)); }

  void write(OutputDir& out) const {
    const fs::path p = out.claim("manifest.json");
    json j = {{"command", command},
              {"config", config},
              {"config_hash", config::config_hash(config)},
              {"artifacts", artifacts}};
    write_text(p, j.dump(2) + "\n");
  }
};

// Report name of a checkpoint: its path without the extension.
inline std::string model_name(const std::string& path) { return fs::path(path).replace_extension().generic_string(); }

inline Dataset load_dataset_checked(const std::string& path) {
  Dataset ds = load_dataset(path);
  logger()->info("dataset {}: {} classes, shape {}", path, ds.num_classes(), to_string(ds.shape));
  return ds;
}

inline ModelWeights load_model_for(const std::string& path, const Dataset& ds) {
  ModelWeights w = load_checkpoint(path);
  if (w.config.input != ds.shape)
    throw DataError(DataErrorKind::dimension_mismatch,
                    path + ": model input " + to_string(w.config.input) + " does not match dataset " +
                        to_string(ds.shape));
  return w;
}

// ---------------------------------------------------------------------------
// Commands

inline int cmd_gen_data(const CommonOptions& opt) {
  const json cfg = load_config("gen-data", opt);
  if (opt.print_config) {
    std::cout << cfg.dump(2) << "\n";
    return kOk;
  }
  const SyntheticSpec spec = config::synthetic_spec(cfg["dataset"]);
  OutputDir out(opt.out, opt.force);
  const fs::path path = out.claim(cfg["output"].get<std::string>());
  const Dataset ds = generate_synthetic_dataset(spec);
  save_dataset(ds, path.string());
  Manifest m{"gen-data", cfg};
  m.add(out, path);
  m.write(out);
  std::size_t instances = 0;
  for (const auto& c : ds.classes) instances += c.size();
  std::cout << "wrote " << path.string() << ": " << ds.num_classes() << " classes, " << instances
            << " images, shape " << to_string(ds.shape) << ", " << ds.provenance << "\n";
  return kOk;
}

inline int cmd_meta_train(const CommonOptions& opt) {
  const json cfg = load_config("meta-train", opt);
  if (opt.print_config) {
    std::cout << cfg.dump(2) << "\n";
    return kOk;
  }
  config::require_paths(cfg, {"dataset"});
  const auto seed = cfg["seed"].get<std::uint64_t>();
  const TrainConfig tc = config::train_config(cfg["train"], seed);
  OutputDir out(opt.out, opt.force);
  const fs::path ck_path = out.claim(cfg["output"].get<std::string>());
  const fs::path log_path = out.claim(cfg["log"].get<std::string>());
  const Dataset ds = load_dataset_checked(cfg["dataset"].get<std::string>());

  NetConfig nc;
  nc.input = ds.shape;
  nc.blocks = cfg["model"]["blocks"].get<int>();
  nc.channels = cfg["model"]["channels"].get<int>();
  nc.film = cfg["model"]["film"].get<bool>();
  nc.validate();

  std::ostringstream log;
  log.precision(17);
  log << "episode,loss\n";
  const int every = std::max(1, tc.episodes / 20);
  const ModelWeights w = meta_train(init_weights(nc, seed), ds, tc, [&](int ep, double loss) {
    log << ep << ',' << loss << '\n';
    if ((ep + 1) % every == 0) logger()->info("episode {}/{} loss {:.4f}", ep + 1, tc.episodes, loss);
  });
  save_checkpoint(w, ck_path.string());
  write_text(log_path, log.str());
  Manifest m{"meta-train", cfg};
  m.add(out, ck_path);
  m.add(out, log_path);
  m.write(out);
  std::cout << "wrote " << ck_path.string() << " (" << checkpoint_id(w) << ")\n";
  return kOk;
}

inline int cmd_attack(const CommonOptions& opt) {
  const json cfg = load_config("attack", opt);
  if (opt.print_config) {
    std::cout << cfg.dump(2) << "\n";
    return kOk;
  }
  config::require_paths(cfg, {"checkpoint", "dataset"});
  const AttackKind kind = parse_attack_kind(cfg["kind"].get<std::string>());
  const AttackConfig base = config::attack_config(cfg["attack"], kind, 0);
  const EpisodeShape episode = config::episode_shape(cfg["episode"]);
  const double fraction = cfg["poison_fraction"].get<double>();
  const int tasks = cfg["tasks"].get<int>();
  require(tasks >= 1, "attack: tasks must be >= 1");
  require(fraction > 0.0 && fraction <= 1.0, "attack: poison_fraction must lie in (0, 1]");
  const auto master = cfg["seed"].get<std::uint64_t>();
  const std::string hash = config::config_hash(cfg);

  OutputDir out(opt.out, opt.force);
  std::vector<fs::path> paths;
  for (int i = 0; i < tasks; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "attacks/task_%05d.fsas", i);
    paths.push_back(out.claim(name));
  }
  const Dataset ds = load_dataset_checked(cfg["dataset"].get<std::string>());
  const std::string ck_path = cfg["checkpoint"].get<std::string>();
  const ModelWeights surrogate = load_model_for(ck_path, ds);
  std::optional<ModelWeights> relabel_target;
  if (base.relabel) {
    config::require_paths(cfg, {"relabel_target"});
    relabel_target = load_model_for(cfg["relabel_target"].get<std::string>(), ds);
  }

  std::vector<std::string> hashes(paths.size());
  std::mutex log_mutex;
  parallel_for(paths.size(), opt.workers, [&](std::size_t i) {
    PoisonMask mask;
    const Task task = indexed_task(ds, episode, fraction, master, i, mask);
    AttackConfig ac = base;
    ac.seed = indexed_attack_seed(master, i);
    AdversarialSupport adv;
    if (kind == AttackKind::query) {
      std::vector<std::size_t> targets(task.seed_query.size());
      std::iota(targets.begin(), targets.end(), std::size_t{0});
      adv.kind = AttackKind::query;
      adv.config = ac;
      adv.surrogate_id = surrogate.id;
      adv.support = pgd_query(surrogate, task, targets, ac, &adv.gradient_evaluations);
      adv.mask = PoisonMask::all(targets.size());
    } else {
      adv = generate_attack(kind, surrogate, task, mask, ac, relabel_target ? &*relabel_target : nullptr);
    }
    adv.extra["task_index"] = i;
    adv.extra["config_hash"] = hash;
    save_adversarial_support(adv, paths[i].string());
    hashes[i] = file_hash(paths[i]);
    std::lock_guard lock(log_mutex);
    logger()->debug("task {}: loss {} -> {}", i, adv.initial_loss, adv.final_loss);
  });
  Manifest m{"attack", cfg};
  for (std::size_t i = 0; i < paths.size(); ++i) m.add(out, paths[i], hashes[i]);
  m.write(out);
  std::cout << "wrote " << paths.size() << " " << to_string(kind) << " artifacts under "
            << (out.dir() / "attacks").string() << "\n";
  return kOk;
}

inline void write_report(OutputDir& out, const std::string& command, const json& cfg,
                         const ExperimentReport& rep) {
  const fs::path jp = out.claim("report.json");
  const fs::path cp = out.claim("report.csv");
  json j = to_json(rep);
  j["run_config_hash"] = config::config_hash(cfg);
  write_text(jp, j.dump(2) + "\n");
  write_text(cp, to_csv(rep));
  Manifest m{command, cfg};
  // report.json carries a timestamp; its entry hashes the timestamp-free content.
  json content = to_json(rep, false);
  content["run_config_hash"] = config::config_hash(cfg);
  m.add(out, jp, hex64(fnv1a64(content.dump())));
  m.add(out, cp);
  m.write(out);
  for (const auto& c : rep.cells)
    logger()->info("{:>12} {:>10} {:>9}  {:.4f} +- {:.4f}  (n={})", c.attack, c.target, c.metric, c.stat.mean,
                   std::isfinite(c.stat.ci95) ? c.stat.ci95 : 0.0, c.stat.n);
  if (!rep.failures.empty()) logger()->error("{} task(s) failed and were excluded", rep.failures.size());
  std::cout << "wrote " << jp.string() << " and " << cp.string() << "\n";
}

// Evaluates saved attack artifacts: tasks are rebuilt from the attack run's
// manifest and checked against the stored support before scoring.
inline ExperimentReport eval_artifacts(const std::string& dir, const ModelWeights& target,
                                       const std::string& target_name, const Dataset& ds, int workers) {
  const json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
  if (manifest.value("command", "") != "attack")
    throw DataError(DataErrorKind::invalid_value, dir + ": not an attack run directory");
  const json acfg = manifest.at("config");
  const EpisodeShape episode = config::episode_shape(acfg.at("episode"));
  const double fraction = acfg.at("poison_fraction").get<double>();
  const auto master = acfg.at("seed").get<std::uint64_t>();
  const std::string kind = acfg.at("kind").get<std::string>();
  if (kind == "query") throw ConfigError("eval: query-attack artifacts perturb queries, not supports");
  const auto& files = manifest.at("artifacts");

  struct Outcome {
    std::optional<AccuracyRecord> record;
    std::string failure;
  };
  std::vector<Outcome> outcomes(files.size());
  parallel_for(files.size(), workers, [&](std::size_t i) {
    try {
      const AdversarialSupport adv =
          load_adversarial_support((fs::path(dir) / files[i].at("path").get<std::string>()).string());
      const std::size_t index = adv.extra.at("task_index").get<std::size_t>();
      PoisonMask mask;
      const Task task = indexed_task(ds, episode, fraction, master, index, mask);
      if (adv.mask.indices != mask.indices || adv.support.labels != task.support.labels)
        throw DataError(DataErrorKind::invalid_value,
                        "artifact " + std::to_string(i) + " does not match its rebuilt task");
      AccuracyRecord r = eval_attack(target, task, adv);
      r.task = index;
      outcomes[i].record = r;
    } catch (const Error& e) {
      outcomes[i].failure = e.what();
    }
  });
  ExperimentReport rep;
  rep.scenario = "artifacts";
  rep.kind = "artifacts";
  rep.config = {{"artifacts_config_hash", manifest.value("config_hash", "")}, {"target", target_name}};
  rep.config_hash = config::config_hash(rep.config);
  rep.surrogate = acfg.at("checkpoint").get<std::string>();
  auto& recs = rep.records[kind][target_name];
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].record)
      recs.push_back(*outcomes[i].record);
    else
      rep.failures.push_back({i, outcomes[i].failure});
  }
  detail::aggregate_report(rep);
  rep.timestamp = detail::utc_timestamp();
  return rep;
}

inline detail::ProgressFn progress_logger(const std::string& label) {
  return [label](std::size_t done, std::size_t total) {
    const std::size_t every = std::max<std::size_t>(1, total / 10);
    if (done % every == 0 || done == total) logger()->info("{}: {}/{} tasks", label, done, total);
  };
}

inline int cmd_eval(const CommonOptions& opt) {
  const json cfg = load_config("eval", opt);
  if (opt.print_config) {
    std::cout << cfg.dump(2) << "\n";
    return kOk;
  }
  config::require_paths(cfg, {"checkpoint", "dataset"});
  OutputDir out(opt.out, opt.force);
  out.claim("report.json");
  out.claim("report.csv");
  out.claim("manifest.json");
  const Dataset ds = load_dataset_checked(cfg["dataset"].get<std::string>());
  const std::string ck = cfg["checkpoint"].get<std::string>();
  const ModelWeights model = load_model_for(ck, ds);
  ExperimentReport rep;
  if (!cfg["artifacts"].get<std::string>().empty()) {
    rep = eval_artifacts(cfg["artifacts"].get<std::string>(), model, model_name(ck), ds, opt.workers);
  } else {
    const ScenarioConfig sc = config::scenario_config(cfg["scenario"], opt.workers);
    rep = run_white_box({model_name(ck), &model}, ds, sc, progress_logger(sc.name));
  }
  write_report(out, "eval", cfg, rep);
  return rep.failures.empty() || !rep.cells.empty() ? kOk : kNumericError;
}

inline int cmd_transfer(const CommonOptions& opt) {
  const json cfg = load_config("transfer", opt);
  if (opt.print_config) {
    std::cout << cfg.dump(2) << "\n";
    return kOk;
  }
  config::require_paths(cfg, {"surrogate", "dataset"});
  const auto target_paths = cfg["targets"].get<std::vector<std::string>>();
  require(!target_paths.empty(), "transfer: 'targets' must list at least one checkpoint");
  for (const auto& t : target_paths) require(!t.empty(), "transfer: empty target path");
  OutputDir out(opt.out, opt.force);
  out.claim("report.json");
  out.claim("report.csv");
  out.claim("manifest.json");
  const Dataset ds = load_dataset_checked(cfg["dataset"].get<std::string>());
  const std::string sp = cfg["surrogate"].get<std::string>();
  const ModelWeights surrogate = load_model_for(sp, ds);
  std::vector<ModelWeights> targets;
  targets.reserve(target_paths.size());
  for (const auto& t : target_paths) targets.push_back(load_model_for(t, ds));
  std::vector<NamedModel> named;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::string name = model_name(target_paths[i]);
    for (const auto& n : named)
      if (n.name == name) name += "#" + std::to_string(i);
    named.push_back({name, &targets[i]});
  }
  const ScenarioConfig sc = config::scenario_config(cfg["scenario"], opt.workers);
  const ExperimentReport rep =
      run_transfer({model_name(sp), &surrogate}, named, ds, sc, progress_logger(sc.name));
  write_report(out, "transfer", cfg, rep);
  return rep.failures.empty() || !rep.cells.empty() ? kOk : kNumericError;
}

// ---------------------------------------------------------------------------
// Entry point

// Splits "--a.b=value" / "--a.b value" tokens left over by the parser into
// override assignments.
inline std::vector<std::string> collect_overrides(const std::vector<std::string>& extras) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() < 3)
      throw ConfigError("unexpected argument '" + tok + "'");
    std::string body = tok.substr(2);
    if (body.find('=') == std::string::npos) {
      if (i + 1 >= extras.size()) throw ConfigError("override '" + tok + "' has no value");
      body += "=" + extras[++i];
    }
    out.push_back(body);
  }
  return out;
}

inline int run(int argc, char** argv) {
  CLI::App app{"Poisoning attacks on few-shot meta-learners"};
  app.require_subcommand(1);
  CommonOptions opt;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic FSDS dataset"},
      {"meta-train", "episodically train a model and write an FSCK checkpoint"},
      {"attack", "generate attack artifacts for a run of tasks"},
      {"eval", "white-box evaluation, or evaluation of saved attack artifacts"},
      {"transfer", "surrogate-to-target transfer evaluation"}};
  std::vector<CLI::App*> subs;
  std::uint64_t seed = 0;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config_path, "JSON config file");
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--workers", opt.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_flag("--force", opt.force, "overwrite existing outputs");
    sub->add_flag("--print-config", opt.print_config, "print the resolved config and exit");
    sub->allow_extras();
    sub->footer("Any scalar config field can be overridden as --path.to.field=value.");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }
  try {
    logger()->set_level(log_level_from_env());
    CLI::App* sub = nullptr;
    for (auto* s : subs)
      if (s->parsed()) sub = s;
    if (sub->count("--seed")) opt.seed = seed;
    opt.overrides = collect_overrides(sub->remaining());
    const std::string name = sub->get_name();
    if (name == "gen-data") return cmd_gen_data(opt);
    if (name == "meta-train") return cmd_meta_train(opt);
    if (name == "attack") return cmd_attack(opt);
    if (name == "eval") return cmd_eval(opt);
    return cmd_transfer(opt);
  } catch (const ConfigError& e) {
    logger()->error("config error: {}", e.what());
    return kConfigError;
  } catch (const DataError& e) {
    logger()->error("data error ({}): {}", to_string(e.kind()), e.what());
    return kDataError;
  } catch (const NumericError& e) {
    logger()->error("numeric failure: {}", e.what());
    return kNumericError;
  } catch (const nlohmann::json::exception& e) {
    logger()->error("config error: {}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    logger()->error("error: {}", e.what());
    return kOtherError;
  }
}

}  // namespace fsl::cli
