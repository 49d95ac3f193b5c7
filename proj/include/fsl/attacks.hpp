#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsl/core.hpp"
#include "fsl/model.hpp"
#include "fsl/net.hpp"
#include "fsl/taskdata.hpp"

namespace fsl {

enum class AttackKind { asp, query, swap, hot_start, asp_shuffle };

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::asp: return "asp";
    case AttackKind::query: return "query";
    case AttackKind::swap: return "swap";
    case AttackKind::hot_start: return "hot_start";
    case AttackKind::asp_shuffle: return "asp_shuffle";
  }
  return "asp";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  if (s == "asp") return AttackKind::asp;
  if (s == "query") return AttackKind::query;
  if (s == "swap") return AttackKind::swap;
  if (s == "hot_start") return AttackKind::hot_start;
  if (s == "asp_shuffle") return AttackKind::asp_shuffle;
  throw ConfigError("unknown attack '" + s + "'");
}

struct ShuffleConfig {
  double clean_pool_ratio = 0.5;  // clean : poisoned images per draw
  int reshuffle_period = 1;       // iterations between redraws
  bool operator==(const ShuffleConfig&) const = default;
};

struct AttackConfig {
  double epsilon = 0.3;
  int iterations = 100;
  std::optional<double> step_scale;  // r, giving step = r * epsilon / iterations
  std::optional<double> step;        // explicit step size
  double hot_start_fraction = 0.5;
  std::optional<ShuffleConfig> shuffle;
  DropoutSpec dropout;
  bool relabel = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epsilon > 0.0 && std::isfinite(epsilon), "attack: epsilon must be > 0");
    require(iterations >= 1, "attack: iterations must be >= 1");
    require(step_scale.has_value() != step.has_value(),
            "attack: exactly one of step_scale (r) and step (gamma) must be set");
    if (step_scale) require(*step_scale > 0.0, "attack: step_scale must be > 0");
    if (step) require(*step > 0.0, "attack: step must be > 0");
    require(hot_start_fraction >= 0.0 && hot_start_fraction <= 1.0,
            "attack: hot_start_fraction must lie in [0, 1]");
    if (shuffle) {
      require(shuffle->clean_pool_ratio >= 0.0, "attack: clean_pool_ratio must be >= 0");
      require(shuffle->reshuffle_period >= 1, "attack: reshuffle_period must be >= 1");
    }
    dropout.validate();
  }
  bool operator==(const AttackConfig&) const = default;
};

// gamma = r * epsilon / L, or the explicit step when one is configured.
inline double step_size(const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.step) return *cfg.step;
  return *cfg.step_scale * (cfg.epsilon / static_cast<double>(cfg.iterations));
}

inline nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json j;
  j["epsilon"] = c.epsilon;
  j["iterations"] = c.iterations;
  if (c.step_scale) j["step_scale"] = *c.step_scale;
  if (c.step) j["step"] = *c.step;
  j["hot_start_fraction"] = c.hot_start_fraction;
  if (c.shuffle)
    j["shuffle"] = {{"clean_pool_ratio", c.shuffle->clean_pool_ratio},
                    {"reshuffle_period", c.shuffle->reshuffle_period}};
  j["dropout"] = {{"strategy", to_string(c.dropout.strategy)}, {"rate", c.dropout.rate}};
  j["relabel"] = c.relabel;
  j["seed"] = c.seed;
  return j;
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.epsilon = j.at("epsilon").get<double>();
  c.iterations = j.at("iterations").get<int>();
  if (j.contains("step_scale")) c.step_scale = j["step_scale"].get<double>();
  if (j.contains("step")) c.step = j["step"].get<double>();
  c.hot_start_fraction = j.value("hot_start_fraction", 0.5);
  if (j.contains("shuffle"))
    c.shuffle = ShuffleConfig{j["shuffle"].at("clean_pool_ratio").get<double>(),
                              j["shuffle"].at("reshuffle_period").get<int>()};
  if (j.contains("dropout")) {
    c.dropout.strategy = parse_dropout_strategy(j["dropout"].at("strategy").get<std::string>());
    c.dropout.rate = j["dropout"].at("rate").get<double>();
  }
  c.relabel = j.value("relabel", false);
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

struct AdversarialSupport {
  AttackKind kind = AttackKind::asp;
  LabeledSet support;  // perturbed images, labels as presented to the target
  PoisonMask mask;
  AttackConfig config;
  std::string surrogate_id;
  int gradient_evaluations = 0;
  double initial_loss = std::numeric_limits<double>::quiet_NaN();  // seed-query loss, first iterate
  double final_loss = std::numeric_limits<double>::quiet_NaN();    // seed-query loss, last iterate
  std::vector<std::vector<std::size_t>> shuffle_draws;              // clean-pool indices per draw
  nlohmann::json extra = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Projected sign-gradient steps

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x1417a;
inline constexpr std::uint64_t kDropoutStream = 0xd80;
inline constexpr std::uint64_t kShuffleStream = 0x5f1e;
inline constexpr std::uint64_t kQueryStream = 0x9e7;

inline double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

// x' = clip(x + U(-eps, eps), I_min, I_max)
template <class Rng>
Image random_start(const Image& x, double eps, Rng& rng) {
  std::uniform_real_distribution<double> u(-eps, eps);
  Image out = x;
  for (auto& v : out.pixels) v = std::clamp(v + u(rng), kIntensityMin, kIntensityMax);
  return out;
}

// One PGD update of `current` around `original`:
//   x~ <- clip(x~ + gamma * sgn(g), I_min, I_max)
//   x~ <- x + clip(x~ - x, -eps, eps)
// followed by a final intensity clamp that only guards against rounding in the
// second line.
inline void pgd_step(Image& current, const Image& original, std::span<const double> grad,
                     double gamma, double eps) {
  for (std::size_t i = 0; i < current.pixels.size(); ++i) {
    double v = std::clamp(current.pixels[i] + gamma * detail::sign(grad[i]), kIntensityMin,
                          kIntensityMax);
    v = original.pixels[i] + std::clamp(v - original.pixels[i], -eps, eps);
    current.pixels[i] = std::clamp(v, kIntensityMin, kIntensityMax);
  }
}

inline void check_finite(const Matrix& grads, int iteration) {
  for (const auto& g : grads)
    for (double v : g)
      if (!std::isfinite(v))
        throw NumericError("attack: non-finite gradient at iteration " + std::to_string(iteration));
}

// Runs `iterations` projected sign-gradient ascent steps. `grad(current, i)`
// returns one gradient per image. Returns the number of gradient evaluations.
template <class GradFn>
int pgd_ascent(std::span<const Image> original, std::vector<Image>& current, double gamma,
               double eps, int iterations, GradFn&& grad) {
  int evaluations = 0;
  for (int it = 0; it < iterations; ++it) {
    const Matrix g = grad(current, it);
    ++evaluations;
    check_finite(g, it);
    for (std::size_t k = 0; k < current.size(); ++k) pgd_step(current[k], original[k], g[k], gamma, eps);
  }
  return evaluations;
}

namespace detail {

// Independent query attacks on `images` under frozen psi. `streams` names the
// random stream of each image so results do not depend on batching.
inline std::vector<Image> query_attack_images(const ModelWeights& model, const TaskParams& psi,
                                              std::span<const Image> images, std::span<const int> labels,
                                              std::span<const std::size_t> streams,
                                              const AttackConfig& cfg, int iterations,
                                              int* evaluations) {
  std::vector<Image> current;
  current.reserve(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) {
    std::mt19937_64 rng(derive_seed(cfg.seed, {kQueryStream, streams[k]}));
    current.push_back(random_start(images[k], cfg.epsilon, rng));
  }
  const int evals = pgd_ascent(images, current, step_size(cfg), cfg.epsilon, iterations,
                               [&](const std::vector<Image>& cur, int) {
                                 Matrix g;
                                 g.reserve(cur.size());
                                 for (std::size_t k = 0; k < cur.size(); ++k)
                                   g.push_back(grad_query(model, psi, cur[k], labels[k]).grad);
                                 return g;
                               });
  if (evaluations) *evaluations += evals;
  return current;
}

inline LabeledSet with_images(const LabeledSet& base, std::span<const std::size_t> positions,
                              const std::vector<Image>& images) {
  LabeledSet out = base;
  for (std::size_t k = 0; k < positions.size(); ++k) out.images[positions[k]] = images[k];
  return out;
}

inline std::vector<Image> gather(const LabeledSet& set, std::span<const std::size_t> positions) {
  std::vector<Image> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(set.images[p]);
  return out;
}

inline double seed_query_loss(const ModelWeights& model, const LabeledSet& support, int way,
                              const LabeledSet& query) {
  return run_episode(model, support, way, query).loss;
}

// ASP iterations from a given starting support. `original` holds the clean
// images at the masked positions; only those positions move.
inline int asp_iterate(const ModelWeights& model, LabeledSet& support, int way, const PoisonMask& mask,
                       const LabeledSet& seed_query, std::span<const Image> original,
                       const AttackConfig& cfg, int iterations) {
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, {kDropoutStream}));
  std::vector<Image> current = gather(support, mask.indices);
  const int evals = pgd_ascent(original, current, step_size(cfg), cfg.epsilon, iterations,
                               [&](const std::vector<Image>& cur, int) {
                                 for (std::size_t k = 0; k < cur.size(); ++k)
                                   support.images[mask.indices[k]] = cur[k];
                                 return grad_support(model, support, way, mask, seed_query,
                                                     cfg.dropout, dropout_rng)
                                     .grads;
                               });
  for (std::size_t k = 0; k < current.size(); ++k) support.images[mask.indices[k]] = current[k];
  return evals;
}

inline void check_attack_inputs(const Task& task, const PoisonMask& mask, const AttackConfig& cfg) {
  cfg.validate();
  validate_mask(mask, task.support.size());
  if (mask.empty()) throw ConfigError("attack: poison mask is empty");
  if (task.seed_query.empty()) throw ConfigError("attack: seed query set is empty");
}

}  // namespace detail

// Query attack on the seed query images at `targets` with psi = g(clean support).
inline LabeledSet pgd_query(const ModelWeights& model, const Task& task,
                            std::span<const std::size_t> targets, const AttackConfig& cfg,
                            int* evaluations = nullptr) {
  cfg.validate();
  for (auto t : targets)
    if (t >= task.seed_query.size()) throw ConfigError("pgd_query: target index out of range");
  const TaskParams psi = adapt(model, task.support, task.way);
  const auto images = detail::gather(task.seed_query, targets);
  std::vector<int> labels;
  for (auto t : targets) labels.push_back(task.seed_query.labels[t]);
  auto adv = detail::query_attack_images(model, psi, images, labels, targets, cfg, cfg.iterations,
                                         evaluations);
  return detail::with_images(task.seed_query, targets, adv);
}

// Adversarial support poisoning: the masked support images are optimised
// jointly through adaptation to raise the seed-query loss.
inline AdversarialSupport asp(const ModelWeights& model, const Task& task, const PoisonMask& mask,
                              const AttackConfig& cfg) {
  detail::check_attack_inputs(task, mask, cfg);
  const auto original = detail::gather(task.support, mask.indices);
  AdversarialSupport out;
  out.kind = AttackKind::asp;
  out.mask = mask;
  out.config = cfg;
  out.surrogate_id = model.id;
  out.support = task.support;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, {detail::kInitStream}));
  for (auto i : mask.indices) out.support.images[i] = random_start(task.support.images[i], cfg.epsilon, init_rng);
  out.initial_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  out.gradient_evaluations = detail::asp_iterate(model, out.support, task.way, mask, task.seed_query,
                                                 original, cfg, cfg.iterations);
  out.final_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  return out;
}

// Swap baseline: each masked support image is attacked as a query point
// against psi = g(clean support) and re-inserted at its position.
inline AdversarialSupport swap_attack(const ModelWeights& model, const Task& task,
                                      const PoisonMask& mask, const AttackConfig& cfg) {
  detail::check_attack_inputs(task, mask, cfg);
  const TaskParams psi = adapt(model, task.support, task.way);
  const auto images = detail::gather(task.support, mask.indices);
  std::vector<int> labels;
  for (auto i : mask.indices) labels.push_back(task.support.labels[i]);
  AdversarialSupport out;
  out.kind = AttackKind::swap;
  out.mask = mask;
  out.config = cfg;
  out.surrogate_id = model.id;
  auto adv = detail::query_attack_images(model, psi, images, labels, mask.indices, cfg,
                                         cfg.iterations, &out.gradient_evaluations);
  out.support = detail::with_images(task.support, mask.indices, adv);
  out.initial_loss = detail::seed_query_loss(model, task.support, task.way, task.seed_query);
  out.final_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  return out;
}

// Phase 1: swap-style query attack for floor(L * hot_start_fraction) steps.
// Phase 2: ASP from that point, without a new random start, for the rest.
inline AdversarialSupport hot_start_asp(const ModelWeights& model, const Task& task,
                                        const PoisonMask& mask, const AttackConfig& cfg) {
  detail::check_attack_inputs(task, mask, cfg);
  if (cfg.iterations < 2) throw ConfigError("hot_start: needs at least 2 iterations");
  const int phase1 =
      static_cast<int>(std::floor(cfg.iterations * cfg.hot_start_fraction));
  const int phase2 = cfg.iterations - phase1;
  const auto original = detail::gather(task.support, mask.indices);
  AdversarialSupport out;
  out.kind = AttackKind::hot_start;
  out.mask = mask;
  out.config = cfg;
  out.surrogate_id = model.id;

  const TaskParams psi = adapt(model, task.support, task.way);
  std::vector<int> labels;
  for (auto i : mask.indices) labels.push_back(task.support.labels[i]);
  std::vector<Image> warm = original;
  if (phase1 > 0)
    warm = detail::query_attack_images(model, psi, original, labels, mask.indices, cfg, phase1,
                                       &out.gradient_evaluations);
  out.support = detail::with_images(task.support, mask.indices, warm);
  out.initial_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  out.gradient_evaluations += detail::asp_iterate(model, out.support, task.way, mask, task.seed_query,
                                                  original, cfg, phase2);
  out.final_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  out.extra["phase1_iterations"] = phase1;
  out.extra["phase2_iterations"] = phase2;
  return out;
}

// The clean support images (unmasked positions), used as the shuffling pool.
inline LabeledSet clean_portion(const Task& task, const PoisonMask& mask) {
  LabeledSet pool;
  for (std::size_t i = 0; i < task.support.size(); ++i)
    if (!mask.contains(i))
      pool.push_back(task.support.images[i], task.support.labels[i],
                     i < task.support.ids.size() ? task.support.ids[i] : InstanceId{});
  return pool;
}

// ASP where the clean part of the surrogate's support is redrawn from
// `clean_pool` every reshuffle_period iterations. The poisoned subset is fixed.
inline AdversarialSupport asp_with_shuffle(const ModelWeights& model, const Task& task,
                                           const PoisonMask& mask, const LabeledSet& clean_pool,
                                           const AttackConfig& cfg) {
  detail::check_attack_inputs(task, mask, cfg);
  if (!cfg.shuffle) throw ConfigError("asp_shuffle: shuffle settings missing");
  const auto& sh = *cfg.shuffle;
  const auto draw = static_cast<std::size_t>(
      round_half_even(sh.clean_pool_ratio * static_cast<double>(mask.size())));
  if (draw > clean_pool.size())
    throw ConfigError("asp_shuffle: clean pool has " + std::to_string(clean_pool.size()) +
                      " images, each draw needs " + std::to_string(draw));

  const auto original = detail::gather(task.support, mask.indices);
  std::vector<Image> current;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, {detail::kInitStream}));
  for (const auto& x : original) current.push_back(random_start(x, cfg.epsilon, init_rng));

  AdversarialSupport out;
  out.kind = AttackKind::asp_shuffle;
  out.mask = mask;
  out.config = cfg;
  out.surrogate_id = model.id;

  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {detail::kShuffleStream}));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, {detail::kDropoutStream}));
  const PoisonMask leading = PoisonMask::all(mask.size());
  LabeledSet working;
  auto redraw = [&] {
    std::vector<std::size_t> idx(clean_pool.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), shuffle_rng);
    idx.resize(draw);
    std::sort(idx.begin(), idx.end());
    working = LabeledSet{};
    for (std::size_t k = 0; k < mask.size(); ++k)
      working.push_back(current[k], task.support.labels[mask.indices[k]]);
    for (auto i : idx) working.push_back(clean_pool.images[i], clean_pool.labels[i]);
    out.shuffle_draws.push_back(std::move(idx));
  };

  out.gradient_evaluations = pgd_ascent(
      original, current, step_size(cfg), cfg.epsilon, cfg.iterations,
      [&](const std::vector<Image>& cur, int it) {
        if (it % sh.reshuffle_period == 0) {
          redraw();
          if (it == 0)
            out.initial_loss = detail::seed_query_loss(model, working, task.way, task.seed_query);
        }
        for (std::size_t k = 0; k < cur.size(); ++k) working.images[k] = cur[k];
        return grad_support(model, working, task.way, leading, task.seed_query, cfg.dropout,
                            dropout_rng)
            .grads;
      });
  out.support = detail::with_images(task.support, mask.indices, current);
  out.final_loss = detail::seed_query_loss(model, out.support, task.way, task.seed_query);
  out.extra["clean_per_draw"] = draw;
  return out;
}

// Labels the target model assigns to the support images after adapting on
// the clean support with the true labels.
inline LabeledSet relabel_support(const ModelWeights& target, const Task& task) {
  const TaskParams psi = adapt(target, task.support, task.way);
  const Matrix logits = predict_logits(target, psi, task.support.images);
  LabeledSet out = task.support;
  for (std::size_t i = 0; i < logits.size(); ++i) out.labels[i] = argmax(logits[i]);
  return out;
}

// Runs one support attack on the surrogate. With cfg.relabel, the surrogate
// sees the support labelled by `relabel_target`; the returned support always
// carries the task's true labels.
inline AdversarialSupport generate_attack(AttackKind kind, const ModelWeights& surrogate,
                                          const Task& task, const PoisonMask& mask,
                                          const AttackConfig& cfg,
                                          const ModelWeights* relabel_target = nullptr) {
  const Task* view = &task;
  Task relabeled;
  if (cfg.relabel) {
    if (!relabel_target) throw ConfigError("attack: relabel requested without a target model");
    relabeled = task;
    relabeled.support = relabel_support(*relabel_target, task);
    std::vector<int> counts(static_cast<std::size_t>(task.way), 0);
    for (int y : relabeled.support.labels) ++counts[static_cast<std::size_t>(y)];
    for (int c = 0; c < task.way; ++c)
      if (counts[static_cast<std::size_t>(c)] == 0)
        throw DataError(DataErrorKind::invalid_value,
                        "relabel: target assigns no support image to class " + std::to_string(c));
    view = &relabeled;
  }
  AdversarialSupport out;
  switch (kind) {
    case AttackKind::asp: out = asp(surrogate, *view, mask, cfg); break;
    case AttackKind::swap: out = swap_attack(surrogate, *view, mask, cfg); break;
    case AttackKind::hot_start: out = hot_start_asp(surrogate, *view, mask, cfg); break;
    case AttackKind::asp_shuffle:
      out = asp_with_shuffle(surrogate, *view, mask, clean_portion(*view, mask), cfg);
      break;
    case AttackKind::query:
      throw ConfigError("attack: the query attack perturbs query images, not the support set");
  }
  out.support.labels = task.support.labels;
  if (cfg.relabel) out.extra["relabeled_labels"] = relabeled.support.labels;
  return out;
}

// ---------------------------------------------------------------------------
// FSAS container: perturbed images at f32 precision, mask and metadata JSON.
//   "FSAS" u32 version=1, u32 N, u32 ch, u32 H, u32 W,
//   N x (u32 label, ch*H*W f32 pixels), u32 mask count, mask count x u32 index,
//   u32 json length, json bytes (canonical, sorted keys).

inline nlohmann::json attack_metadata(const AdversarialSupport& a) {
  nlohmann::json j;
  j["kind"] = to_string(a.kind);
  j["config"] = to_json(a.config);
  j["surrogate"] = a.surrogate_id;
  j["gradient_evaluations"] = a.gradient_evaluations;
  j["initial_loss"] = std::isfinite(a.initial_loss) ? nlohmann::json(a.initial_loss) : nlohmann::json();
  j["final_loss"] = std::isfinite(a.final_loss) ? nlohmann::json(a.final_loss) : nlohmann::json();
  j["shuffle_draws"] = a.shuffle_draws;
  j["extra"] = a.extra;
  return j;
}

inline std::string encode_adversarial_support(const AdversarialSupport& a) {
  BinaryWriter w;
  w.bytes("FSAS");
  w.u32(1);
  const Shape shape = a.support.empty() ? Shape{} : a.support.images.front().shape;
  w.u32(static_cast<std::uint32_t>(a.support.size()));
  w.u32(static_cast<std::uint32_t>(shape.channels));
  w.u32(static_cast<std::uint32_t>(shape.height));
  w.u32(static_cast<std::uint32_t>(shape.width));
  for (std::size_t i = 0; i < a.support.size(); ++i) {
    if (a.support.images[i].shape != shape)
      throw DataError(DataErrorKind::dimension_mismatch, "FSAS: mixed image shapes");
    w.u32(static_cast<std::uint32_t>(a.support.labels[i]));
    for (double p : a.support.images[i].pixels) w.f32(static_cast<float>(p));
  }
  w.u32(static_cast<std::uint32_t>(a.mask.size()));
  for (auto i : a.mask.indices) w.u32(static_cast<std::uint32_t>(i));
  const std::string meta = attack_metadata(a).dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  return w.data();
}

inline void save_adversarial_support(const AdversarialSupport& a, const std::string& path) {
  BinaryWriter w;
  w.bytes(encode_adversarial_support(a));
  w.write_file(path);
}

inline AdversarialSupport decode_adversarial_support(BinaryReader& r) {
  if (r.remaining() < 4 || r.bytes(4) != "FSAS")
    throw DataError(DataErrorKind::bad_magic, r.origin() + ": not an FSAS file");
  const auto version = r.u32();
  if (version != 1)
    throw DataError(DataErrorKind::unsupported_version,
                    r.origin() + ": FSAS version " + std::to_string(version));
  AdversarialSupport a;
  const auto n = r.u32();
  Shape shape;
  shape.channels = static_cast<int>(r.u32());
  shape.height = static_cast<int>(r.u32());
  shape.width = static_cast<int>(r.u32());
  for (std::uint32_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(r.u32());
    Image img(shape);
    r.need(shape.size() * 4);
    for (auto& p : img.pixels) p = static_cast<double>(r.f32());
    a.support.push_back(std::move(img), label);
  }
  const auto m = r.u32();
  for (std::uint32_t i = 0; i < m; ++i) a.mask.indices.push_back(r.u32());
  try {
    validate_mask(a.mask, a.support.size());
  } catch (const ConfigError& e) {
    throw DataError(DataErrorKind::invalid_value, r.origin() + ": " + e.what());
  }
  const auto len = r.u32();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.bytes(len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorKind::invalid_value, r.origin() + ": bad FSAS metadata: " + e.what());
  }
  if (r.remaining() != 0)
    throw DataError(DataErrorKind::dimension_mismatch, r.origin() + ": trailing bytes in FSAS file");
  a.kind = parse_attack_kind(j.at("kind").get<std::string>());
  a.config = attack_config_from_json(j.at("config"));
  a.surrogate_id = j.at("surrogate").get<std::string>();
  a.gradient_evaluations = j.at("gradient_evaluations").get<int>();
  if (!j["initial_loss"].is_null()) a.initial_loss = j["initial_loss"].get<double>();
  if (!j["final_loss"].is_null()) a.final_loss = j["final_loss"].get<double>();
  a.shuffle_draws = j.at("shuffle_draws").get<std::vector<std::vector<std::size_t>>>();
  a.extra = j.at("extra");
  return a;
}

inline AdversarialSupport load_adversarial_support(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  return decode_adversarial_support(r);
}

}  // namespace fsl
