#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsl/core.hpp"
#include "fsl/taskdata.hpp"

namespace fsl {

// Backbone: `blocks` x [conv3x3 (same padding) -> FiLM -> ReLU -> avgpool 2x2],
// final map flattened into the embedding.
struct NetConfig {
  Shape input{1, 32, 32};
  int blocks = 4;
  int channels = 32;
  bool film = true;

  void validate() const {
    require(blocks >= 1, "net: block count must be >= 1");
    require(channels >= 1, "net: channels must be >= 1");
    require(input.channels >= 1, "net: input channels must be >= 1");
    const int div = 1 << blocks;
    require(input.height % div == 0 && input.width % div == 0,
            "net: input " + to_string(input) + " not divisible by 2^" + std::to_string(blocks));
  }
  int block_in_channels(int b) const { return b == 0 ? input.channels : channels; }
  int block_height(int b) const { return input.height >> b; }
  int block_width(int b) const { return input.width >> b; }
  int embedding_dim() const {
    return channels * (input.height >> blocks) * (input.width >> blocks);
  }
  bool operator==(const NetConfig&) const = default;
};

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

// Parameter layout:
//   block{b}.kernel    [channels, in_channels, 3, 3]
//   block{b}.bias      [channels]
//   film_gen{b}.weight [2*channels, embedding_dim]   (only when config.film)
//   film_gen{b}.bias   [2*channels]
// The generator emits (scale - 1, shift), so all-zero generator weights yield
// identity modulation.
struct ModelWeights {
  NetConfig config;
  std::string id;
  std::vector<Tensor> tensors;

  Tensor& kernel(int b) { return tensors[static_cast<std::size_t>(2 * b)]; }
  const Tensor& kernel(int b) const { return tensors[static_cast<std::size_t>(2 * b)]; }
  Tensor& bias(int b) { return tensors[static_cast<std::size_t>(2 * b + 1)]; }
  const Tensor& bias(int b) const { return tensors[static_cast<std::size_t>(2 * b + 1)]; }
  Tensor& film_weight(int b) { return tensors[static_cast<std::size_t>(2 * config.blocks + 2 * b)]; }
  const Tensor& film_weight(int b) const {
    return tensors[static_cast<std::size_t>(2 * config.blocks + 2 * b)];
  }
  Tensor& film_bias(int b) { return tensors[static_cast<std::size_t>(2 * config.blocks + 2 * b + 1)]; }
  const Tensor& film_bias(int b) const {
    return tensors[static_cast<std::size_t>(2 * config.blocks + 2 * b + 1)];
  }

  static ModelWeights zeros(const NetConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.config = cfg;
    auto add = [&](std::string name, std::vector<std::uint32_t> dims) {
      std::size_t n = 1;
      for (auto d : dims) n *= d;
      w.tensors.push_back(Tensor{std::move(name), std::move(dims), std::vector<double>(n, 0.0)});
    };
    const auto c = static_cast<std::uint32_t>(cfg.channels);
    for (int b = 0; b < cfg.blocks; ++b) {
      add("block" + std::to_string(b) + ".kernel",
          {c, static_cast<std::uint32_t>(cfg.block_in_channels(b)), 3, 3});
      add("block" + std::to_string(b) + ".bias", {c});
    }
    if (cfg.film) {
      const auto e = static_cast<std::uint32_t>(cfg.embedding_dim());
      for (int b = 0; b < cfg.blocks; ++b) {
        add("film_gen" + std::to_string(b) + ".weight", {2 * c, e});
        add("film_gen" + std::to_string(b) + ".bias", {2 * c});
      }
    }
    return w;
  }

  void set_zero() {
    for (auto& t : tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      for (double v : t.values)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

// He-style uniform fan-in initialisation for conv kernels; biases and FiLM
// generators start at zero.
inline ModelWeights init_weights(const NetConfig& cfg, std::uint64_t seed) {
  ModelWeights w = ModelWeights::zeros(cfg);
  std::mt19937_64 rng(derive_seed(seed, {0x1417}));
  for (int b = 0; b < cfg.blocks; ++b) {
    const double fan_in = cfg.block_in_channels(b) * 9.0;
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    for (auto& v : w.kernel(b).values) v = u(rng);
  }
  return w;
}

// ---------------------------------------------------------------------------
// FiLM

struct FilmLayer {
  std::vector<double> scale;
  std::vector<double> shift;
  bool operator==(const FilmLayer&) const = default;
};

struct FilmParams {
  std::vector<FilmLayer> layers;

  static FilmParams identity(const NetConfig& cfg) {
    FilmParams f;
    f.layers.resize(static_cast<std::size_t>(cfg.blocks));
    for (auto& l : f.layers) {
      l.scale.assign(static_cast<std::size_t>(cfg.channels), 1.0);
      l.shift.assign(static_cast<std::size_t>(cfg.channels), 0.0);
    }
    return f;
  }
  static FilmParams zeros(const NetConfig& cfg) {
    FilmParams f = identity(cfg);
    for (auto& l : f.layers) std::fill(l.scale.begin(), l.scale.end(), 0.0);
    return f;
  }
  bool is_identity() const {
    for (const auto& l : layers) {
      for (double s : l.scale)
        if (s != 1.0) return false;
      for (double b : l.shift)
        if (b != 0.0) return false;
    }
    return true;
  }
  bool operator==(const FilmParams&) const = default;
};

enum class DropoutStrategy { none, block_wise, layer_wise, gaussian };

inline const char* to_string(DropoutStrategy s) {
  switch (s) {
    case DropoutStrategy::none: return "none";
    case DropoutStrategy::block_wise: return "block_wise";
    case DropoutStrategy::layer_wise: return "layer_wise";
    case DropoutStrategy::gaussian: return "gaussian";
  }
  return "none";
}

inline DropoutStrategy parse_dropout_strategy(const std::string& s) {
  if (s == "none") return DropoutStrategy::none;
  if (s == "block_wise") return DropoutStrategy::block_wise;
  if (s == "layer_wise") return DropoutStrategy::layer_wise;
  if (s == "gaussian") return DropoutStrategy::gaussian;
  throw ConfigError("unknown dropout strategy '" + s + "'");
}

struct DropoutSpec {
  DropoutStrategy strategy = DropoutStrategy::none;
  double rate = 0.0;

  void validate() const {
    // Masking strategies accept d = 1 (everything dropped); the Gaussian std is
    // undefined there.
    const bool masking =
        strategy == DropoutStrategy::block_wise || strategy == DropoutStrategy::layer_wise;
    require(rate >= 0.0 && (rate < 1.0 || (masking && rate == 1.0)),
            "dropout rate must lie in [0, 1)");
  }
  bool active() const { return strategy != DropoutStrategy::none && rate > 0.0; }
  bool operator==(const DropoutSpec&) const = default;
};

// Standard deviation of the multiplicative Gaussian noise for dropout rate d.
inline double gaussian_dropout_std(double d) {
  if (!(d >= 0.0 && d < 1.0)) throw ConfigError("gaussian dropout std undefined for d outside [0, 1)");
  return std::sqrt(d / (1.0 - d));
}

// Affine perturbation of generated FiLM parameters:
//   scale' = scale_mul * scale + scale_add,  shift' = shift_mul * shift.
struct FilmNoise {
  std::vector<FilmLayer> mul;  // .scale = scale_mul, .shift = shift_mul
  std::vector<std::vector<double>> scale_add;

  static FilmNoise none(const NetConfig& cfg) {
    FilmNoise n;
    const auto c = static_cast<std::size_t>(cfg.channels);
    n.mul.resize(static_cast<std::size_t>(cfg.blocks), FilmLayer{std::vector<double>(c, 1.0),
                                                                     std::vector<double>(c, 1.0)});
    n.scale_add.assign(static_cast<std::size_t>(cfg.blocks), std::vector<double>(c, 0.0));
    return n;
  }
};

template <class Rng>
FilmNoise sample_film_noise(const NetConfig& cfg, const DropoutSpec& spec, Rng& rng) {
  spec.validate();
  FilmNoise n = FilmNoise::none(cfg);
  if (!spec.active()) return n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int b = 0; b < cfg.blocks; ++b) {
    auto& mul = n.mul[static_cast<std::size_t>(b)];
    auto& add = n.scale_add[static_cast<std::size_t>(b)];
    switch (spec.strategy) {
      case DropoutStrategy::block_wise: {
        if (u(rng) < spec.rate) {
          std::fill(mul.scale.begin(), mul.scale.end(), 0.0);
          std::fill(mul.shift.begin(), mul.shift.end(), 0.0);
          std::fill(add.begin(), add.end(), 1.0);
        }
        break;
      }
      case DropoutStrategy::layer_wise: {
        for (std::size_t c = 0; c < add.size(); ++c)
          if (u(rng) < spec.rate) {
            mul.scale[c] = 0.0;
            mul.shift[c] = 0.0;
            add[c] = 1.0;
          }
        break;
      }
      case DropoutStrategy::gaussian: {
        std::normal_distribution<double> normal(0.0, gaussian_dropout_std(spec.rate));
        for (auto& v : mul.scale) v = 1.0 + normal(rng);
        for (auto& v : mul.shift) v = 1.0 + normal(rng);
        break;
      }
      case DropoutStrategy::none: break;
    }
  }
  return n;
}

inline FilmParams apply_film_noise(const FilmParams& film, const FilmNoise& noise) {
  FilmParams out = film;
  for (std::size_t b = 0; b < out.layers.size(); ++b) {
    auto& l = out.layers[b];
    for (std::size_t c = 0; c < l.scale.size(); ++c) {
      l.scale[c] = noise.mul[b].scale[c] * l.scale[c] + noise.scale_add[b][c];
      l.shift[c] = noise.mul[b].shift[c] * l.shift[c];
    }
  }
  return out;
}

template <class Rng>
FilmParams apply_film_dropout(const NetConfig& cfg, const FilmParams& film, const DropoutSpec& spec,
                              Rng& rng) {
  return apply_film_noise(film, sample_film_noise(cfg, spec, rng));
}

// ---------------------------------------------------------------------------
// Layer kernels

namespace detail {

// The 3x3 same-padding convolutions run on a zero-padded copy of the input with
// row stride w + 2; outputs are produced in the same stride so every tap is a
// single contiguous multiply-add over the plane. Columns >= w are scratch.

inline std::vector<double> pad_planes(const double* in, int c, int h, int w) {
  const int wp = w + 2, hp = h + 2;
  std::vector<double> out(static_cast<std::size_t>(c * hp * wp), 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      std::copy(in + (ch * h + y) * w, in + (ch * h + y + 1) * w,
                out.begin() + (ch * hp + y + 1) * wp + 1);
  return out;
}

inline void conv3x3_forward(const double* in, int cin, int h, int w, const double* kernel,
                            const double* bias, int cout, double* out) {
  const int wp = w + 2, hp = h + 2;
  const int span = (h - 1) * wp + w;
  const auto padded = pad_planes(in, cin, h, w);
  std::vector<double> acc(static_cast<std::size_t>(h * wp));
  for (int oc = 0; oc < cout; ++oc) {
    std::fill(acc.begin(), acc.end(), 0.0);
    double* a = acc.data();
    for (int ic = 0; ic < cin; ++ic) {
      const double* ip = padded.data() + ic * hp * wp;
      const double* k = kernel + (oc * cin + ic) * 9;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double kv = k[ky * 3 + kx];
          const double* src = ip + ky * wp + kx;
          for (int i = 0; i < span; ++i) a[i] += kv * src[i];
        }
    }
    double* o = out + oc * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) o[y * w + x] = a[y * wp + x] + bias[oc];
  }
}

// d_kernel, d_bias, d_in are accumulated into when non-null.
inline void conv3x3_backward(const double* in, int cin, int h, int w, const double* kernel,
                             int cout, const double* d_out, double* d_kernel, double* d_bias,
                             double* d_in) {
  const int wp = w + 2, hp = h + 2;
  const int span = (h - 1) * wp + w;
  std::vector<double> padded;
  if (d_kernel) padded = pad_planes(in, cin, h, w);
  std::vector<double> dpad;
  if (d_in) dpad.assign(static_cast<std::size_t>(cin * hp * wp), 0.0);
  std::vector<double> g(static_cast<std::size_t>(h * wp), 0.0);
  for (int oc = 0; oc < cout; ++oc) {
    const double* go = d_out + oc * h * w;
    double gsum = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        g[static_cast<std::size_t>(y * wp + x)] = go[y * w + x];
        gsum += go[y * w + x];
      }
    if (d_bias) d_bias[oc] += gsum;
    const double* gp = g.data();
    for (int ic = 0; ic < cin; ++ic) {
      const double* k = kernel + (oc * cin + ic) * 9;
      double* dk = d_kernel ? d_kernel + (oc * cin + ic) * 9 : nullptr;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int off = ic * hp * wp + ky * wp + kx;
          if (dk) {
            const double* src = padded.data() + off;
            double acc = 0.0;
            for (int i = 0; i < span; ++i) acc += gp[i] * src[i];
            dk[ky * 3 + kx] += acc;
          }
          if (d_in) {
            const double kv = k[ky * 3 + kx];
            double* dst = dpad.data() + off;
            for (int i = 0; i < span; ++i) dst[i] += kv * gp[i];
          }
        }
    }
  }
  if (d_in)
    for (int ch = 0; ch < cin; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          d_in[(ch * h + y) * w + x] += dpad[static_cast<std::size_t>((ch * hp + y + 1) * wp + x + 1)];
}

inline void avgpool2_forward(const double* in, int c, int h, int w, double* out) {
  const int oh = h / 2, ow = w / 2;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const double* p = in + (ch * h + 2 * y) * w + 2 * x;
        out[(ch * oh + y) * ow + x] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
}

}  // namespace detail

struct BlockTrace {
  std::vector<double> input;      // block input
  std::vector<double> conv;       // conv output before FiLM
  std::vector<double> modulated;  // after FiLM, before ReLU
};

using ForwardTrace = std::vector<BlockTrace>;

// Forward pass of one image. When `trace` is non-null the intermediates needed
// by `backward_image` are recorded.
inline std::vector<double> forward_image(const ModelWeights& w, const FilmParams& film,
                                         std::span<const double> image, ForwardTrace* trace) {
  const NetConfig& cfg = w.config;
  if (image.size() != cfg.input.size())
    throw ConfigError("forward: image has " + std::to_string(image.size()) + " values, net expects " +
                      to_string(cfg.input));
  if (film.layers.size() != static_cast<std::size_t>(cfg.blocks))
    throw ConfigError("forward: FiLM parameters do not match block count");
  if (trace) trace->resize(static_cast<std::size_t>(cfg.blocks));
  std::vector<double> h(image.begin(), image.end());
  std::vector<double> z, u;
  for (int b = 0; b < cfg.blocks; ++b) {
    const int cin = cfg.block_in_channels(b), H = cfg.block_height(b), W = cfg.block_width(b);
    const int C = cfg.channels, plane = H * W;
    z.assign(static_cast<std::size_t>(C * plane), 0.0);
    detail::conv3x3_forward(h.data(), cin, H, W, w.kernel(b).values.data(), w.bias(b).values.data(),
                            C, z.data());
    u.resize(z.size());
    const auto& layer = film.layers[static_cast<std::size_t>(b)];
    for (int c = 0; c < C; ++c) {
      const double s = layer.scale[static_cast<std::size_t>(c)];
      const double t = layer.shift[static_cast<std::size_t>(c)];
      for (int i = 0; i < plane; ++i) u[c * plane + i] = s * z[c * plane + i] + t;
    }
    std::vector<double> a(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) a[i] = u[i] > 0.0 ? u[i] : 0.0;
    std::vector<double> pooled(static_cast<std::size_t>(C * plane / 4));
    detail::avgpool2_forward(a.data(), C, H, W, pooled.data());
    if (trace) {
      auto& t = (*trace)[static_cast<std::size_t>(b)];
      t.input = std::move(h);
      t.conv = z;
      t.modulated = u;
    }
    h = std::move(pooled);
  }
  return h;
}

// Reverse pass for one image. Gradients are accumulated into the non-null
// outputs: d_weights (block tensors only), d_film (scale/shift of `film`) and
// d_image.
inline void backward_image(const ModelWeights& w, const FilmParams& film, const ForwardTrace& trace,
                           std::span<const double> d_embedding, ModelWeights* d_weights,
                           FilmParams* d_film, std::vector<double>* d_image) {
  const NetConfig& cfg = w.config;
  std::vector<double> dh(d_embedding.begin(), d_embedding.end());
  for (int b = cfg.blocks - 1; b >= 0; --b) {
    const auto& t = trace[static_cast<std::size_t>(b)];
    const int cin = cfg.block_in_channels(b), H = cfg.block_height(b), W = cfg.block_width(b);
    const int C = cfg.channels, plane = H * W, oh = H / 2, ow = W / 2;
    const auto& layer = film.layers[static_cast<std::size_t>(b)];
    std::vector<double> dz(static_cast<std::size_t>(C * plane));
    for (int c = 0; c < C; ++c) {
      double ds = 0.0, dt = 0.0;
      const double s = layer.scale[static_cast<std::size_t>(c)];
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int i = c * plane + y * W + x;
          if (t.modulated[static_cast<std::size_t>(i)] <= 0.0) continue;
          const double du = 0.25 * dh[static_cast<std::size_t>((c * oh + y / 2) * ow + x / 2)];
          ds += du * t.conv[static_cast<std::size_t>(i)];
          dt += du;
          dz[static_cast<std::size_t>(i)] = s * du;
        }
      if (d_film) {
        d_film->layers[static_cast<std::size_t>(b)].scale[static_cast<std::size_t>(c)] += ds;
        d_film->layers[static_cast<std::size_t>(b)].shift[static_cast<std::size_t>(c)] += dt;
      }
    }
    const bool need_input = b > 0 || d_image != nullptr;
    std::vector<double> din;
    if (need_input) din.assign(t.input.size(), 0.0);
    detail::conv3x3_backward(t.input.data(), cin, H, W, w.kernel(b).values.data(), C, dz.data(),
                             d_weights ? d_weights->kernel(b).values.data() : nullptr,
                             d_weights ? d_weights->bias(b).values.data() : nullptr,
                             need_input ? din.data() : nullptr);
    if (b == 0) {
      if (d_image) {
        if (d_image->size() != din.size()) d_image->assign(din.size(), 0.0);
        for (std::size_t i = 0; i < din.size(); ++i) (*d_image)[i] += din[i];
      }
    } else {
      dh = std::move(din);
    }
  }
}

}  // namespace fsl
