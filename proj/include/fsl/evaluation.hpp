#pragma once

#include <atomic>
#include <chrono>
#include <ctime>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fsl/attacks.hpp"
#include "fsl/core.hpp"
#include "fsl/model.hpp"
#include "fsl/taskdata.hpp"

namespace fsl {

inline double accuracy(const ModelWeights& model, const LabeledSet& support, int way,
                       const LabeledSet& query) {
  if (query.empty()) throw ConfigError("accuracy: empty query set");
  const TaskParams psi = adapt(model, support, way);
  const Matrix logits = predict_logits(model, psi, query.images);
  std::size_t correct = 0;
  for (std::size_t m = 0; m < logits.size(); ++m)
    if (argmax(logits[m]) == query.labels[m]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(query.size());
}

struct AccuracyRecord {
  std::size_t task = 0;
  double clean = 0.0;     // clean support, mean over eval query sets
  double specific = 0.0;  // attacked support, seed query set
  double general = 0.0;   // attacked support, mean over eval query sets
  std::optional<double> swap;  // swap-attacked support, mean over eval query sets
  std::vector<double> per_eval_set;
};

namespace detail {

inline std::vector<double> eval_set_accuracies(const ModelWeights& model, const LabeledSet& support,
                                               const Task& task) {
  const TaskParams psi = adapt(model, support, task.way);
  std::vector<double> out;
  for (const auto& q : task.eval_queries) {
    const Matrix logits = predict_logits(model, psi, q.images);
    std::size_t correct = 0;
    for (std::size_t m = 0; m < logits.size(); ++m)
      if (argmax(logits[m]) == q.labels[m]) ++correct;
    out.push_back(static_cast<double>(correct) / static_cast<double>(q.size()));
  }
  return out;
}

inline double plain_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

// The target adapts separately on the clean support, the attacked support and,
// when given, the swap-attacked support.
inline AccuracyRecord eval_attack(const ModelWeights& target, const Task& task,
                                  const AdversarialSupport& adv,
                                  const AdversarialSupport* swap = nullptr) {
  if (task.eval_queries.empty()) throw ConfigError("eval_attack: task has no eval query sets");
  if (adv.support.size() != task.support.size())
    throw ConfigError("eval_attack: attacked support does not match the task");
  AccuracyRecord r;
  r.clean = detail::plain_mean(detail::eval_set_accuracies(target, task.support, task));
  r.specific = accuracy(target, adv.support, task.way, task.seed_query);
  r.per_eval_set = detail::eval_set_accuracies(target, adv.support, task);
  r.general = detail::plain_mean(r.per_eval_set);
  if (swap) r.swap = detail::plain_mean(detail::eval_set_accuracies(target, swap->support, task));
  return r;
}

// Percent drop 100 * (clean - attack) / clean; empty when clean is zero.
inline std::optional<double> relative_drop(double a_clean, double a_attack) {
  if (!(a_clean > 0.0)) return std::nullopt;
  return 100.0 * (a_clean - a_attack) / a_clean;
}

struct AggregateStat {
  double mean = 0.0;
  double ci95 = std::numeric_limits<double>::quiet_NaN();  // NaN when n < 2
  std::size_t n = 0;
  double lower() const { return mean - ci95; }
  double upper() const { return mean + ci95; }
};

// Mean and normal-approximation half-width 1.96 * s / sqrt(n), s with n - 1.
inline AggregateStat mean_ci95(const std::vector<double>& values) {
  if (values.size() < 2) throw ConfigError("mean_ci95: needs at least 2 values");
  AggregateStat a;
  a.n = values.size();
  a.mean = detail::plain_mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  const double s = std::sqrt(ss / static_cast<double>(a.n - 1));
  a.ci95 = 1.96 * s / std::sqrt(static_cast<double>(a.n));
  return a;
}

// Like mean_ci95 but tolerates n < 2 (no interval).
inline AggregateStat aggregate(const std::vector<double>& values) {
  if (values.size() >= 2) return mean_ci95(values);
  AggregateStat a;
  a.n = values.size();
  a.mean = values.empty() ? std::numeric_limits<double>::quiet_NaN() : values.front();
  return a;
}

// ---------------------------------------------------------------------------
// Worker pool

// Calls fn(i) for i in [0, n) on up to `workers` threads. The first exception
// escaping fn is rethrown after all threads finish.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads =
      std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline int default_workers() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// ---------------------------------------------------------------------------
// Scenarios

struct AttackVariant {
  std::string name;
  AttackKind kind = AttackKind::asp;
  AttackConfig config;  // config.seed is replaced by a per-task seed
};

struct NamedModel {
  std::string name;
  const ModelWeights* weights = nullptr;
};

struct ScenarioConfig {
  std::string name = "scenario";
  EpisodeShape episode;
  double poison_fraction = 1.0;
  int tasks = 100;
  std::uint64_t seed = 0;
  int workers = 1;
  std::vector<AttackVariant> attacks;
  // Variant whose general accuracy fills the swap column; empty for none.
  std::string swap_variant = "swap";

  void validate() const {
    require(episode.way >= 1 && episode.shots >= 1 && episode.queries >= 1,
            "scenario: way, shots and queries must be positive");
    require(episode.eval_sets >= 1, "scenario: need at least one eval query set");
    require(poison_fraction > 0.0 && poison_fraction <= 1.0, "scenario: poison_fraction must lie in (0, 1]");
    require(tasks >= 1, "scenario: tasks must be >= 1");
    require(!attacks.empty(), "scenario: no attack variants");
    std::map<std::string, int> seen;
    for (const auto& a : attacks) {
      require(!a.name.empty(), "scenario: attack variant without a name");
      require(seen[a.name]++ == 0, "scenario: duplicate attack variant '" + a.name + "'");
      require(a.kind != AttackKind::query, "scenario: the query attack is not a support attack");
      AttackConfig c = a.config;
      c.validate();
    }
    if (!swap_variant.empty()) {
      bool found = false;
      for (const auto& a : attacks) found |= a.name == swap_variant;
      require(found, "scenario: swap_variant '" + swap_variant + "' is not an attack variant");
    }
  }
};

struct TaskFailure {
  std::size_t task = 0;
  std::string reason;
};

struct Cell {
  std::string attack;
  std::string target;
  std::string metric;
  AggregateStat stat;
};

struct DropCell {
  std::string attack;
  std::string target;
  std::string metric;  // "specific" or "general"
  std::optional<double> percent;
};

struct ExperimentReport {
  std::string scenario;
  std::string kind;  // "white_box" or "transfer"
  std::string config_hash;
  nlohmann::json config;
  std::string surrogate;
  // records[attack][target] holds one record per successful task, in task order.
  std::map<std::string, std::map<std::string, std::vector<AccuracyRecord>>> records;
  std::vector<TaskFailure> failures;
  std::vector<Cell> cells;
  std::vector<DropCell> drops;
  std::string timestamp;

  const Cell* find(const std::string& attack, const std::string& target, const std::string& metric) const {
    for (const auto& c : cells)
      if (c.attack == attack && c.target == target && c.metric == metric) return &c;
    return nullptr;
  }
  std::optional<double> drop(const std::string& attack, const std::string& target,
                             const std::string& metric) const {
    for (const auto& d : drops)
      if (d.attack == attack && d.target == target && d.metric == metric) return d.percent;
    return std::nullopt;
  }
};

inline nlohmann::json to_json(const AttackVariant& v) {
  return {{"name", v.name}, {"kind", to_string(v.kind)}, {"config", to_json(v.config)}};
}

inline nlohmann::json to_json(const ScenarioConfig& s) {
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : s.attacks) attacks.push_back(to_json(a));
  return {{"name", s.name},
          {"episode",
           {{"way", s.episode.way},
            {"shots", s.episode.shots},
            {"queries", s.episode.queries},
            {"eval_sets", s.episode.eval_sets}}},
          {"poison_fraction", s.poison_fraction},
          {"tasks", s.tasks},
          {"seed", s.seed},
          {"attacks", attacks},
          {"swap_variant", s.swap_variant}};
}

namespace detail {

inline nlohmann::json num_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
}

inline void aggregate_report(ExperimentReport& rep) {
  rep.cells.clear();
  rep.drops.clear();
  for (const auto& [attack, by_target] : rep.records)
    for (const auto& [target, recs] : by_target) {
      std::vector<double> clean, specific, general, swap;
      for (const auto& r : recs) {
        clean.push_back(r.clean);
        specific.push_back(r.specific);
        general.push_back(r.general);
        if (r.swap) swap.push_back(*r.swap);
      }
      const auto add = [&](const char* metric, const std::vector<double>& v) {
        if (!v.empty()) rep.cells.push_back({attack, target, metric, aggregate(v)});
      };
      add("clean", clean);
      add("specific", specific);
      add("general", general);
      add("swap", swap);
      if (recs.empty()) continue;
      const double mc = aggregate(clean).mean;
      rep.drops.push_back({attack, target, "specific", relative_drop(mc, aggregate(specific).mean)});
      rep.drops.push_back({attack, target, "general", relative_drop(mc, aggregate(general).mean)});
    }
}

struct TaskSeeds {
  std::uint64_t task;
  std::uint64_t sample;
  std::uint64_t mask;
  std::uint64_t attack;
};

inline TaskSeeds task_seeds(std::uint64_t master, std::size_t index) {
  const std::uint64_t t = derive_seed(master, {0x7a5c, index});
  return {t, derive_seed(t, {1}), derive_seed(t, {2}), derive_seed(t, {3})};
}

}  // namespace detail

// Task `index` of a run with master seed `master`, with its poison mask.
// Attack generation and evaluation reproduce the same task from these inputs.
inline Task indexed_task(const Dataset& ds, const EpisodeShape& episode, double poison_fraction,
                         std::uint64_t master, std::size_t index, PoisonMask& mask) {
  const auto seeds = detail::task_seeds(master, index);
  std::mt19937_64 sample_rng(seeds.sample);
  Task task = sample_task(ds, episode, sample_rng);
  std::mt19937_64 mask_rng(seeds.mask);
  mask = make_poison_mask(task, poison_fraction, mask_rng);
  return task;
}

inline std::uint64_t indexed_attack_seed(std::uint64_t master, std::size_t index) {
  return detail::task_seeds(master, index).attack;
}

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

// Shared driver: for every task, generate each variant on the surrogate (once
// per target for relabel variants) and evaluate on every target.
inline ExperimentReport run_scenario(const char* kind, const NamedModel& surrogate,
                                     const std::vector<NamedModel>& targets, const Dataset& ds,
                                     const ScenarioConfig& s, const ProgressFn& progress) {
  s.validate();
  require(surrogate.weights != nullptr, "scenario: surrogate model missing");
  require(!targets.empty(), "scenario: no target models");
  for (const auto& t : targets) require(t.weights != nullptr, "scenario: target '" + t.name + "' missing");
  for (const auto& t : targets)
    if (t.weights->config.input != ds.shape || surrogate.weights->config.input != ds.shape)
      throw DataError(DataErrorKind::dimension_mismatch,
                      "scenario: model input " + to_string(t.weights->config.input) +
                          " does not match dataset " + to_string(ds.shape));

  struct Outcome {
    // per (attack, target)
    std::vector<std::pair<std::pair<std::string, std::string>, AccuracyRecord>> records;
    std::optional<std::string> failure;
  };
  const auto n = static_cast<std::size_t>(s.tasks);
  std::vector<Outcome> outcomes(n);
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;

  parallel_for(n, s.workers, [&](std::size_t i) {
    Outcome& out = outcomes[i];
    try {
      PoisonMask mask;
      const Task task = indexed_task(ds, s.episode, s.poison_fraction, s.seed, i, mask);
      // generated[variant][target], blind variants keyed by "" and shared.
      std::map<std::string, std::map<std::string, AdversarialSupport>> generated;
      for (const auto& v : s.attacks) {
        AttackConfig cfg = v.config;
        cfg.seed = indexed_attack_seed(s.seed, i);
        if (cfg.relabel) {
          for (const auto& t : targets)
            generated[v.name][t.name] =
                generate_attack(v.kind, *surrogate.weights, task, mask, cfg, t.weights);
        } else {
          generated[v.name][""] = generate_attack(v.kind, *surrogate.weights, task, mask, cfg);
        }
      }
      for (const auto& v : s.attacks)
        for (const auto& t : targets) {
          auto& g = generated[v.name];
          const AdversarialSupport& adv = g.count(t.name) ? g[t.name] : g[""];
          const AdversarialSupport* swap = nullptr;
          if (!s.swap_variant.empty()) {
            auto& sg = generated[s.swap_variant];
            swap = sg.count(t.name) ? &sg[t.name] : &sg[""];
          }
          AccuracyRecord r = eval_attack(*t.weights, task, adv, swap);
          r.task = i;
          out.records.push_back({{v.name, t.name}, std::move(r)});
        }
    } catch (const Error& e) {
      out.records.clear();
      out.failure = e.what();
    }
    if (progress) {
      std::lock_guard lock(progress_mutex);
      progress(++done, n);
    }
  });

  ExperimentReport rep;
  rep.scenario = s.name;
  rep.kind = kind;
  rep.config = to_json(s);
  rep.config["surrogate"] = surrogate.name;
  nlohmann::json tnames = nlohmann::json::array();
  for (const auto& t : targets) tnames.push_back(t.name);
  rep.config["targets"] = tnames;
  rep.config["dataset"] = ds.provenance;
  rep.config_hash = hex64(fnv1a64(rep.config.dump()));
  rep.surrogate = surrogate.name;
  for (const auto& v : s.attacks)
    for (const auto& t : targets) rep.records[v.name][t.name];
  for (std::size_t i = 0; i < n; ++i) {
    if (outcomes[i].failure) {
      rep.failures.push_back({i, *outcomes[i].failure});
      continue;
    }
    for (auto& [key, rec] : outcomes[i].records) rep.records[key.first][key.second].push_back(rec);
  }
  aggregate_report(rep);
  rep.timestamp = utc_timestamp();
  return rep;
}

}  // namespace detail

// Attacks generated and evaluated on the same model.
inline ExperimentReport run_white_box(const NamedModel& model, const Dataset& ds,
                                      const ScenarioConfig& s,
                                      const detail::ProgressFn& progress = {}) {
  return detail::run_scenario("white_box", model, {model}, ds, s, progress);
}

// Attacks generated on the surrogate, each instance evaluated on every target.
// Variants with relabel set are regenerated per target from its predictions.
inline ExperimentReport run_transfer(const NamedModel& surrogate, const std::vector<NamedModel>& targets,
                                     const Dataset& ds, const ScenarioConfig& s,
                                     const detail::ProgressFn& progress = {}) {
  return detail::run_scenario("transfer", surrogate, targets, ds, s, progress);
}

// Canonical JSON. The timestamp is kept out of the numeric content so two runs
// of one scenario differ only in that field.
inline nlohmann::json to_json(const ExperimentReport& rep, bool with_timestamp = true) {
  nlohmann::json j;
  j["scenario"] = rep.scenario;
  j["kind"] = rep.kind;
  j["config"] = rep.config;
  j["config_hash"] = rep.config_hash;
  j["surrogate"] = rep.surrogate;
  nlohmann::json records = nlohmann::json::array();
  for (const auto& [attack, by_target] : rep.records)
    for (const auto& [target, recs] : by_target)
      for (const auto& r : recs) {
        nlohmann::json jr = {{"task", r.task},
                             {"attack", attack},
                             {"target", target},
                             {"clean", r.clean},
                             {"specific", r.specific},
                             {"general", r.general},
                             {"per_eval_set", r.per_eval_set}};
        jr["swap"] = r.swap ? nlohmann::json(*r.swap) : nlohmann::json();
        records.push_back(jr);
      }
  j["records"] = records;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : rep.cells)
    cells.push_back({{"attack", c.attack},
                     {"target", c.target},
                     {"metric", c.metric},
                     {"mean", detail::num_or_null(c.stat.mean)},
                     {"ci95", detail::num_or_null(c.stat.ci95)},
                     {"n", c.stat.n}});
  j["aggregates"] = cells;
  nlohmann::json drops = nlohmann::json::array();
  for (const auto& d : rep.drops)
    drops.push_back({{"attack", d.attack},
                     {"target", d.target},
                     {"metric", d.metric},
                     {"percent", d.percent ? nlohmann::json(*d.percent) : nlohmann::json()}});
  j["relative_drops"] = drops;
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : rep.failures) failures.push_back({{"task", f.task}, {"reason", f.reason}});
  j["failures"] = failures;
  j["failure_count"] = rep.failures.size();
  if (with_timestamp) j["timestamp"] = rep.timestamp;
  return j;
}

inline std::string to_csv(const ExperimentReport& rep) {
  std::ostringstream os;
  os.precision(17);
  os << "scenario,attack,target,metric,mean,ci95,n\n";
  for (const auto& c : rep.cells) {
    os << rep.scenario << ',' << c.attack << ',' << c.target << ',' << c.metric << ',' << c.stat.mean << ',';
    if (std::isfinite(c.stat.ci95)) os << c.stat.ci95;
    os << ',' << c.stat.n << '\n';
  }
  return os.str();
}

}  // namespace fsl
