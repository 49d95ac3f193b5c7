#pragma once

// Small models and data shared by the test suites.

#include <cmath>
#include <random>
#include <cstring>
#include <string>
#include <vector>

#include "fsl/model.hpp"
#include "fsl/taskdata.hpp"

namespace fsl::fixture {

inline NetConfig tiny_config(bool film = true) {
  NetConfig c;
  c.input = {1, 8, 8};
  c.blocks = 2;
  c.channels = 3;
  c.film = film;
  return c;
}

// Weights with every tensor populated, including biases and FiLM generators.
inline ModelWeights random_weights(const NetConfig& cfg, std::uint64_t seed, double film_scale = 0.3) {
  ModelWeights w = init_weights(cfg, seed);
  std::mt19937_64 rng(seed * 31 + 5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int b = 0; b < cfg.blocks; ++b) {
    for (auto& v : w.bias(b).values) v = 0.2 * u(rng);
    if (cfg.film) {
      for (auto& v : w.film_weight(b).values) v = film_scale * u(rng);
      for (auto& v : w.film_bias(b).values) v = film_scale * u(rng);
    }
  }
  return w;
}

inline Image random_image(const Shape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Image img(s);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

inline LabeledSet random_set(const Shape& s, int way, int per_class, std::mt19937_64& rng) {
  LabeledSet out;
  for (int c = 0; c < way; ++c)
    for (int i = 0; i < per_class; ++i) out.push_back(random_image(s, rng), c);
  return out;
}

inline FilmParams random_film(const NetConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  FilmParams f = FilmParams::identity(cfg);
  for (auto& l : f.layers) {
    for (auto& v : l.scale) v = 1.0 + u(rng);
    for (auto& v : l.shift) v = u(rng);
  }
  return f;
}

inline Dataset tiny_dataset(int classes = 6, int per_class = 30, std::uint64_t seed = 7) {
  SyntheticSpec s;
  s.classes = classes;
  s.instances_per_class = per_class;
  s.shape = {1, 8, 8};
  s.seed = seed;
  return generate_synthetic_dataset(s);
}

inline Task tiny_task(const Dataset& ds, int way, int shots, int queries, std::uint64_t seed,
                      int eval_sets = 1) {
  std::mt19937_64 rng(seed);
  return sample_task(ds, EpisodeShape{way, shots, queries, eval_sets}, rng);
}

// Empty when `adv` is a valid perturbation of `clean`: masked images within
// eps (plus `slack`) and inside the intensity range, everything else
// bit-identical. Otherwise a description of the first violation.
inline std::string perturbation_violation(const LabeledSet& clean, const LabeledSet& adv,
                                          const std::vector<std::size_t>& moved, double eps,
                                          double slack = std::ldexp(1.0, -20)) {
  if (clean.size() != adv.size()) return "size changed";
  std::vector<char> is_moved(clean.size(), 0);
  for (auto i : moved) is_moved[i] = 1;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    if (clean.labels[n] != adv.labels[n]) return "label changed at " + std::to_string(n);
    const auto& a = clean.images[n].pixels;
    const auto& b = adv.images[n].pixels;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (!is_moved[n]) {
        if (std::memcmp(&a[k], &b[k], sizeof(double)) != 0)
          return "unmasked image " + std::to_string(n) + " changed";
        continue;
      }
      if (!(b[k] >= kIntensityMin && b[k] <= kIntensityMax))
        return "pixel outside intensity range in image " + std::to_string(n);
      if (std::abs(b[k] - a[k]) > eps + slack) return "l_inf bound exceeded in image " + std::to_string(n);
    }
  }
  return {};
}

}  // namespace fsl::fixture
