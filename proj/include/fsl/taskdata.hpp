#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fsl/core.hpp"

namespace fsl {

inline constexpr double kIntensityMin = -1.0;
inline constexpr double kIntensityMax = 1.0;

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

// Pixels in (channel, row, column) order, intensities in [-1, 1].
struct Image {
  Shape shape;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(Shape s, double fill = 0.0) : shape(s), pixels(s.size(), fill) {}
  Image(Shape s, std::vector<double> p) : shape(s), pixels(std::move(p)) {
    if (pixels.size() != shape.size())
      throw DataError(DataErrorKind::dimension_mismatch, "image pixel count does not match shape");
  }
  bool operator==(const Image&) const = default;
};

// Identity of an instance inside its dataset: (original class, index in class list).
struct InstanceId {
  int class_id = -1;
  int index = -1;
  auto operator<=>(const InstanceId&) const = default;
};

struct LabeledSet {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<InstanceId> ids;  // metadata only; empty for externally built sets

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  void push_back(Image img, int label, InstanceId id = {}) {
    images.push_back(std::move(img));
    labels.push_back(label);
    ids.push_back(id);
  }
};

inline void validate_labeled_set(const LabeledSet& set, int way) {
  if (set.images.size() != set.labels.size())
    throw ConfigError("labeled set: images and labels differ in length");
  for (int y : set.labels)
    if (y < 0 || y >= way)
      throw ConfigError("labeled set: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(way) + ")");
}

struct Task {
  int way = 0;
  LabeledSet support;
  LabeledSet seed_query;
  std::vector<LabeledSet> eval_queries;
  std::vector<int> class_ids;  // original dataset class for each task label
};

struct Dataset {
  Shape shape;
  std::vector<std::vector<Image>> classes;
  std::string provenance;

  int num_classes() const { return static_cast<int>(classes.size()); }
};

struct SyntheticSpec {
  int classes = 8;
  int instances_per_class = 40;
  Shape shape{1, 28, 28};
  int smoothness = 2;           // box-blur radius applied twice to the template noise
  double noise_sigma = 0.1;
  int max_translation = 1;      // pixels, circular shift
  std::uint64_t seed = 1;

  void validate() const {
    require(classes > 0, "synthetic: classes must be positive");
    require(instances_per_class > 0, "synthetic: instances_per_class must be positive");
    require(shape.channels > 0 && shape.height > 0 && shape.width > 0,
            "synthetic: dims must be positive");
    require(smoothness >= 0, "synthetic: smoothness must be non-negative");
    require(noise_sigma >= 0.0, "synthetic: noise_sigma must be non-negative");
    require(max_translation >= 0, "synthetic: max_translation must be non-negative");
  }

  std::string describe() const {
    return "synthetic:c" + std::to_string(classes) + ":n" + std::to_string(instances_per_class) +
           ":" + to_string(shape) + ":s" + std::to_string(smoothness) + ":sigma" +
           std::to_string(noise_sigma) + ":t" + std::to_string(max_translation) + ":seed" +
           std::to_string(seed);
  }
};

namespace detail {

// Circular box blur along rows and columns of one channel plane.
inline void box_blur(std::vector<double>& plane, int h, int w, int radius) {
  if (radius <= 0) return;
  std::vector<double> tmp(plane.size());
  const double norm = 1.0 / (2 * radius + 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += plane[y * w + ((x + k) % w + w) % w];
      tmp[y * w + x] = s * norm;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -radius; k <= radius; ++k) s += tmp[(((y + k) % h + h) % h) * w + x];
      plane[y * w + x] = s * norm;
    }
}

}  // namespace detail

// Template amplitude; leaves headroom below the intensity bound for noise.
inline constexpr double kTemplateAmplitude = 0.8;

inline Image make_class_template(const SyntheticSpec& spec, int c) {
  std::mt19937_64 rng(derive_seed(spec.seed, {0x7e3a, static_cast<std::uint64_t>(c)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  const Shape& s = spec.shape;
  Image t(s);
  for (auto& v : t.pixels) v = normal(rng);
  const std::size_t plane = static_cast<std::size_t>(s.height) * static_cast<std::size_t>(s.width);
  for (int ch = 0; ch < s.channels; ++ch) {
    std::vector<double> p(t.pixels.begin() + ch * plane, t.pixels.begin() + (ch + 1) * plane);
    detail::box_blur(p, s.height, s.width, spec.smoothness);
    detail::box_blur(p, s.height, s.width, spec.smoothness);
    std::copy(p.begin(), p.end(), t.pixels.begin() + ch * plane);
  }
  double mean = std::accumulate(t.pixels.begin(), t.pixels.end(), 0.0) / t.pixels.size();
  double peak = 0.0;
  for (auto& v : t.pixels) {
    v -= mean;
    peak = std::max(peak, std::abs(v));
  }
  if (peak > 0.0)
    for (auto& v : t.pixels) v *= kTemplateAmplitude / peak;
  return t;
}

inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.shape = spec.shape;
  ds.provenance = spec.describe();
  ds.classes.resize(static_cast<std::size_t>(spec.classes));
  const Shape& s = spec.shape;
  for (int c = 0; c < spec.classes; ++c) {
    const Image tmpl = make_class_template(spec, c);
    auto& instances = ds.classes[static_cast<std::size_t>(c)];
    instances.reserve(static_cast<std::size_t>(spec.instances_per_class));
    for (int i = 0; i < spec.instances_per_class; ++i) {
      std::mt19937_64 rng(derive_seed(spec.seed, {0x1a57, static_cast<std::uint64_t>(c),
                                                  static_cast<std::uint64_t>(i)}));
      std::uniform_int_distribution<int> shift(-spec.max_translation, spec.max_translation);
      std::normal_distribution<double> normal(0.0, 1.0);
      const int dy = shift(rng);
      const int dx = shift(rng);
      Image img(s);
      for (int ch = 0; ch < s.channels; ++ch)
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x) {
            const int sy = ((y - dy) % s.height + s.height) % s.height;
            const int sx = ((x - dx) % s.width + s.width) % s.width;
            double v = tmpl.pixels[(static_cast<std::size_t>(ch) * s.height + sy) * s.width + sx];
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * normal(rng);
            img.pixels[(static_cast<std::size_t>(ch) * s.height + y) * s.width + x] =
                std::clamp(v, kIntensityMin, kIntensityMax);
          }
      instances.push_back(std::move(img));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// FSDS container

inline std::uint8_t quantize_pixel(double x) {
  const double v = std::round((std::clamp(x, kIntensityMin, kIntensityMax) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

inline double dequantize_pixel(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }

inline std::string encode_dataset(const Dataset& ds) {
  BinaryWriter w;
  w.bytes("FSDS");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(ds.classes.size()));
  w.u32(static_cast<std::uint32_t>(ds.shape.channels));
  w.u32(static_cast<std::uint32_t>(ds.shape.height));
  w.u32(static_cast<std::uint32_t>(ds.shape.width));
  for (const auto& cls : ds.classes) {
    w.u32(static_cast<std::uint32_t>(cls.size()));
    for (const auto& img : cls) {
      if (img.shape != ds.shape)
        throw DataError(DataErrorKind::dimension_mismatch,
                        "image " + to_string(img.shape) + " in dataset " + to_string(ds.shape));
      for (double p : img.pixels) w.u8(quantize_pixel(p));
    }
  }
  return w.data();
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  BinaryWriter w;
  w.bytes(encode_dataset(ds));
  w.write_file(path);
}

inline Dataset decode_dataset(BinaryReader& r, std::optional<Shape> expected = std::nullopt) {
  if (r.remaining() < 4 || r.bytes(4) != "FSDS")
    throw DataError(DataErrorKind::bad_magic, r.origin() + ": not an FSDS file");
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError(DataErrorKind::unsupported_version,
                    r.origin() + ": FSDS version " + std::to_string(version));
  Dataset ds;
  const std::uint32_t classes = r.u32();
  ds.shape.channels = static_cast<int>(r.u32());
  ds.shape.height = static_cast<int>(r.u32());
  ds.shape.width = static_cast<int>(r.u32());
  if (ds.shape.channels <= 0 || ds.shape.height <= 0 || ds.shape.width <= 0)
    throw DataError(DataErrorKind::dimension_mismatch,
                    r.origin() + ": zero dimension in header " + to_string(ds.shape));
  if (expected && *expected != ds.shape)
    throw DataError(DataErrorKind::dimension_mismatch,
                    r.origin() + ": dims " + to_string(ds.shape) + ", expected " +
                        to_string(*expected));
  ds.classes.resize(classes);
  const std::size_t px = ds.shape.size();
  for (std::uint32_t c = 0; c < classes; ++c) {
    const std::uint32_t count = r.u32();
    r.need(static_cast<std::size_t>(count) * px);
    auto& instances = ds.classes[c];
    instances.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      auto raw = r.bytes(px);
      Image img(ds.shape);
      for (std::size_t k = 0; k < px; ++k)
        img.pixels[k] = dequantize_pixel(static_cast<std::uint8_t>(raw[k]));
      instances.push_back(std::move(img));
    }
  }
  if (r.remaining() != 0)
    throw DataError(DataErrorKind::dimension_mismatch,
                    r.origin() + ": " + std::to_string(r.remaining()) +
                        " trailing bytes after declared payload");
  ds.provenance = r.origin();
  return ds;
}

inline Dataset load_dataset(const std::string& path, std::optional<Shape> expected = std::nullopt) {
  auto r = BinaryReader::from_file(path);
  return decode_dataset(r, expected);
}

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeShape {
  int way = 5;
  int shots = 5;             // per class
  int queries = 10;          // per class, per query set
  int eval_sets = 5;

  int required_per_class() const { return shots + queries * (1 + eval_sets); }
};

template <class Rng>
Task sample_task(const Dataset& ds, const EpisodeShape& ep, Rng& rng) {
  require(ep.way >= 1 && ep.shots >= 1 && ep.queries >= 1 && ep.eval_sets >= 0,
          "sample_task: way, shots and queries must be positive");
  if (ep.way > ds.num_classes())
    throw DataError(DataErrorKind::insufficient_data,
                    "sample_task: way " + std::to_string(ep.way) + " exceeds " +
                        std::to_string(ds.num_classes()) + " classes");
  std::vector<int> order(static_cast<std::size_t>(ds.num_classes()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(ep.way));

  const int need = ep.required_per_class();
  for (int cls : order) {
    const int have = static_cast<int>(ds.classes[static_cast<std::size_t>(cls)].size());
    if (have < need)
      throw DataError(DataErrorKind::insufficient_data,
                      "sample_task: class " + std::to_string(cls) + " has " +
                          std::to_string(have) + " instances, episode needs " +
                          std::to_string(need));
  }

  Task task;
  task.way = ep.way;
  task.class_ids = order;
  task.eval_queries.resize(static_cast<std::size_t>(ep.eval_sets));
  for (int label = 0; label < ep.way; ++label) {
    const int cls = order[static_cast<std::size_t>(label)];
    const auto& instances = ds.classes[static_cast<std::size_t>(cls)];
    std::vector<int> idx(instances.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t cursor = 0;
    auto take = [&](LabeledSet& dst, int n) {
      for (int k = 0; k < n; ++k, ++cursor) {
        const int i = idx[cursor];
        dst.push_back(instances[static_cast<std::size_t>(i)], label, InstanceId{cls, i});
      }
    };
    take(task.support, ep.shots);
    take(task.seed_query, ep.queries);
    for (auto& q : task.eval_queries) take(q, ep.queries);
  }
  return task;
}

// ---------------------------------------------------------------------------
// Poison masks

struct PoisonMask {
  std::vector<std::size_t> indices;  // sorted, unique positions into the support set

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  bool contains(std::size_t i) const {
    return std::binary_search(indices.begin(), indices.end(), i);
  }
  bool operator==(const PoisonMask&) const = default;

  static PoisonMask all(std::size_t n) {
    PoisonMask m;
    m.indices.resize(n);
    std::iota(m.indices.begin(), m.indices.end(), std::size_t{0});
    return m;
  }
};

inline void validate_mask(const PoisonMask& mask, std::size_t support_size) {
  for (std::size_t k = 0; k < mask.indices.size(); ++k) {
    if (mask.indices[k] >= support_size)
      throw ConfigError("poison mask index " + std::to_string(mask.indices[k]) +
                        " outside support of size " + std::to_string(support_size));
    if (k > 0 && mask.indices[k] <= mask.indices[k - 1])
      throw ConfigError("poison mask indices must be sorted and unique");
  }
}

// Poisoned shots per class: round-half-even(fraction * shots_c).
inline long poisoned_per_class(double fraction, long shots) {
  return std::min(shots, round_half_even(fraction * static_cast<double>(shots)));
}

template <class Rng>
PoisonMask make_poison_mask(const LabeledSet& support, int way, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("poison fraction must lie in (0, 1], got " + std::to_string(fraction));
  PoisonMask mask;
  for (int c = 0; c < way; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < support.labels.size(); ++i)
      if (support.labels[i] == c) members.push_back(i);
    const auto k = static_cast<std::size_t>(poisoned_per_class(fraction, static_cast<long>(members.size())));
    std::shuffle(members.begin(), members.end(), rng);
    mask.indices.insert(mask.indices.end(), members.begin(), members.begin() + static_cast<long>(k));
  }
  if (mask.indices.empty())
    throw ConfigError("poison fraction " + std::to_string(fraction) +
                      " rounds to zero poisoned shots in every class");
  std::sort(mask.indices.begin(), mask.indices.end());
  return mask;
}

template <class Rng>
PoisonMask make_poison_mask(const Task& task, double fraction, Rng& rng) {
  return make_poison_mask(task.support, task.way, fraction, rng);
}

}  // namespace fsl
