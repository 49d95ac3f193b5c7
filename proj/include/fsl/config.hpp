#pragma once

// JSON run configs. Each command has a default tree that doubles as its
// schema: user keys must exist in the defaults and carry a compatible type.
// A null default means "optional number"; the two step settings may also be
// nulled so either one can be chosen.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fsl/attacks.hpp"
#include "fsl/core.hpp"
#include "fsl/evaluation.hpp"
#include "fsl/model.hpp"
#include "fsl/net.hpp"
#include "fsl/taskdata.hpp"

namespace fsl::config {

using nlohmann::json;

inline json attack_defaults() {
  return {{"epsilon", 0.3},
          {"iterations", 100},
          {"step_scale", 3.0},
          {"step", nullptr},
          {"hot_start_fraction", 0.5},
          {"shuffle", {{"clean_pool_ratio", 0.5}, {"reshuffle_period", 1}}},
          {"dropout", {{"strategy", "none"}, {"rate", 0.0}}},
          {"relabel", false}};
}

inline json episode_defaults() {
  return {{"way", 5}, {"shots", 5}, {"queries", 10}, {"eval_sets", 5}};
}

inline json scenario_defaults() {
  return {{"name", "white_box"},
          {"episode", episode_defaults()},
          {"poison_fraction", 1.0},
          {"tasks", 100},
          {"seed", 0},
          {"attack", attack_defaults()},
          {"variants",
           json::array({{{"name", "asp"}, {"kind", "asp"}, {"attack", json::object()}},
                        {{"name", "swap"}, {"kind", "swap"}, {"attack", json::object()}}})},
          {"swap_variant", "swap"}};
}

inline json defaults(const std::string& command) {
  if (command == "gen-data")
    return {{"dataset",
             {{"classes", 32},
              {"instances_per_class", 40},
              {"channels", 1},
              {"height", 16},
              {"width", 16},
              {"smoothness", 2},
              {"noise_sigma", 0.1},
              {"max_translation", 1},
              {"seed", 1}}},
            {"output", "dataset.fsds"}};
  if (command == "meta-train")
    return {{"dataset", ""},
            {"model", {{"blocks", 3}, {"channels", 8}, {"film", true}}},
            {"train",
             {{"episodes", 2000},
              {"way_min", 5},
              {"way_max", 5},
              {"shot_min", 5},
              {"shot_max", 5},
              {"queries", 10},
              {"learning_rate", 0.01}}},
            {"seed", 0},
            {"output", "model.fsck"},
            {"log", "train_log.csv"}};
  if (command == "attack")
    return {{"checkpoint", ""},
            {"dataset", ""},
            {"kind", "asp"},
            {"attack", attack_defaults()},
            {"relabel_target", ""},
            {"episode", episode_defaults()},
            {"poison_fraction", 1.0},
            {"tasks", 10},
            {"seed", 0}};
  if (command == "eval")
    return {{"checkpoint", ""}, {"dataset", ""}, {"artifacts", ""}, {"scenario", scenario_defaults()}};
  if (command == "transfer") {
    json s = scenario_defaults();
    s["name"] = "transfer";
    s["poison_fraction"] = 0.5;
    return {{"surrogate", ""},
            {"targets", json::array({""})},
            {"dataset", ""},
            {"scenario", s}};
  }
  throw ConfigError("unknown command '" + command + "'");
}

namespace detail {

inline const char* type_name(const json& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

inline bool nullable(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
  return key == "step" || key == "step_scale";
}

inline bool compatible(const json& schema, const json& v, const std::string& path) {
  if (schema.is_null() || (v.is_null() && nullable(path))) return v.is_null() || v.is_number();
  if (schema.is_number_float()) return v.is_number();
  if (schema.is_number_integer()) return v.is_number_integer();
  if (schema.is_boolean()) return v.is_boolean();
  if (schema.is_string()) return v.is_string();
  if (schema.is_array()) return v.is_array();
  return v.is_object();
}

}  // namespace detail

// Checks `value` against `schema`, rejecting unknown keys. Missing keys are
// allowed; merge() fills them. An empty object in the schema accepts any
// object and leaves checking to the consumer (variant attack overrides).
inline void validate(const json& schema, const json& value, const std::string& path = "") {
  const std::string where = path.empty() ? "config" : path;
  if (!detail::compatible(schema, value, where))
    throw ConfigError(where + ": expected " + detail::type_name(schema) + ", got " +
                      detail::type_name(value));
  if (schema.is_object() && !schema.empty()) {
    for (auto it = value.begin(); it != value.end(); ++it) {
      const std::string key = path.empty() ? it.key() : path + "." + it.key();
      if (!schema.contains(it.key())) throw ConfigError("unknown key '" + key + "'");
      validate(schema[it.key()], it.value(), key);
    }
  } else if (schema.is_array() && !schema.empty()) {
    for (std::size_t i = 0; i < value.size(); ++i)
      validate(schema[0], value[i], path + "." + std::to_string(i));
  }
}

// Defaults overlaid with user values. Arrays are replaced; their object
// elements are completed from the schema's first element.
inline json merge(const json& schema, const json& value) {
  if (schema.is_object() && value.is_object() && !schema.empty()) {
    json out = schema;
    for (auto it = value.begin(); it != value.end(); ++it) out[it.key()] = merge(schema[it.key()], it.value());
    return out;
  }
  if (schema.is_array() && value.is_array() && !schema.empty() && schema[0].is_object()) {
    json out = json::array();
    for (const auto& v : value) out.push_back(merge(schema[0], v));
    return out;
  }
  return value;
}

// Parses the right-hand side of --a.b=value: JSON when it parses, otherwise
// a plain string.
inline json parse_scalar(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return std::string(text);
  }
}

// Applies "a.b.c=value" to `cfg`. Numeric path components index arrays.
inline void apply_override(json& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form key.path=value");
  const std::string path(assignment.substr(0, eq));
  json value = parse_scalar(assignment.substr(eq + 1));
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + path + "': empty path component");
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(part);
      } catch (const std::exception&) {
        throw ConfigError("override '" + path + "': '" + part + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override '" + path + "': index out of range");
      node = &(*node)[idx];
    } else {
      if (!node->is_object()) throw ConfigError("override '" + path + "': '" + part + "' is not an object");
      node = &(*node)[part];
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object() || node->is_array())
    throw ConfigError("override '" + path + "': only scalar fields can be overridden");
  *node = std::move(value);
}

// Validates `user` for `command` and returns the completed config.
inline json resolve(const std::string& command, const json& user) {
  const json schema = defaults(command);
  validate(schema, user);
  json cfg = merge(schema, user);
  validate(schema, cfg);
  return cfg;
}

inline std::string config_hash(const json& cfg) { return hex64(fnv1a64(cfg.dump())); }

// ---------------------------------------------------------------------------
// Builders

inline SyntheticSpec synthetic_spec(const json& d) {
  SyntheticSpec s;
  s.classes = d.at("classes").get<int>();
  s.instances_per_class = d.at("instances_per_class").get<int>();
  s.shape = {d.at("channels").get<int>(), d.at("height").get<int>(), d.at("width").get<int>()};
  s.smoothness = d.at("smoothness").get<int>();
  s.noise_sigma = d.at("noise_sigma").get<double>();
  s.max_translation = d.at("max_translation").get<int>();
  s.seed = d.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

inline TrainConfig train_config(const json& t, std::uint64_t seed) {
  TrainConfig c;
  c.episodes = t.at("episodes").get<int>();
  c.way_min = t.at("way_min").get<int>();
  c.way_max = t.at("way_max").get<int>();
  c.shot_min = t.at("shot_min").get<int>();
  c.shot_max = t.at("shot_max").get<int>();
  c.queries = t.at("queries").get<int>();
  c.learning_rate = t.at("learning_rate").get<double>();
  c.seed = seed;
  c.validate();
  return c;
}

inline EpisodeShape episode_shape(const json& e) {
  EpisodeShape s;
  s.way = e.at("way").get<int>();
  s.shots = e.at("shots").get<int>();
  s.queries = e.at("queries").get<int>();
  s.eval_sets = e.at("eval_sets").get<int>();
  require(s.way >= 1 && s.shots >= 1 && s.queries >= 1 && s.eval_sets >= 0,
          "episode: way, shots and queries must be positive");
  return s;
}

// The shuffle block only takes effect for the asp_shuffle attack.
inline AttackConfig attack_config(const json& a, AttackKind kind, std::uint64_t seed) {
  AttackConfig c;
  c.epsilon = a.at("epsilon").get<double>();
  c.iterations = a.at("iterations").get<int>();
  if (!a.at("step_scale").is_null()) c.step_scale = a["step_scale"].get<double>();
  if (!a.at("step").is_null()) c.step = a["step"].get<double>();
  c.hot_start_fraction = a.at("hot_start_fraction").get<double>();
  if (kind == AttackKind::asp_shuffle)
    c.shuffle = ShuffleConfig{a.at("shuffle").at("clean_pool_ratio").get<double>(),
                              a.at("shuffle").at("reshuffle_period").get<int>()};
  c.dropout.strategy = parse_dropout_strategy(a.at("dropout").at("strategy").get<std::string>());
  c.dropout.rate = a.at("dropout").at("rate").get<double>();
  c.relabel = a.at("relabel").get<bool>();
  c.seed = seed;
  c.validate();
  return c;
}

inline ScenarioConfig scenario_config(const json& s, int workers) {
  ScenarioConfig c;
  c.name = s.at("name").get<std::string>();
  c.episode = episode_shape(s.at("episode"));
  c.poison_fraction = s.at("poison_fraction").get<double>();
  c.tasks = s.at("tasks").get<int>();
  c.seed = s.at("seed").get<std::uint64_t>();
  c.workers = workers;
  const json schema = attack_defaults();
  for (const auto& v : s.at("variants")) {
    AttackVariant av;
    av.name = v.at("name").get<std::string>();
    av.kind = parse_attack_kind(v.at("kind").get<std::string>());
    const json& partial = v.at("attack");
    validate(schema, partial, "scenario.variants." + av.name + ".attack");
    av.config = attack_config(merge(s.at("attack"), partial), av.kind, 0);
    c.attacks.push_back(std::move(av));
  }
  c.swap_variant = s.at("swap_variant").get<std::string>();
  c.validate();
  return c;
}

// Non-empty string fields that must be set before a command can run.
inline void require_paths(const json& cfg, std::initializer_list<const char*> keys) {
  for (const char* k : keys)
    if (cfg.at(k).get<std::string>().empty()) throw ConfigError(std::string("config: '") + k + "' is required");
}

}  // namespace fsl::config
