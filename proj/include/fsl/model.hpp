#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsl/core.hpp"
#include "fsl/net.hpp"
#include "fsl/taskdata.hpp"

namespace fsl {

// Adapted task state: generated FiLM parameters and one prototype per class.
struct TaskParams {
  FilmParams film;
  std::vector<std::vector<double>> prototypes;

  int way() const { return static_cast<int>(prototypes.size()); }
  bool operator==(const TaskParams&) const = default;
};

using Matrix = std::vector<std::vector<double>>;

// Embeds a batch; each image is processed independently.
inline Matrix embed(const ModelWeights& w, const FilmParams& film, std::span<const Image> images) {
  Matrix out;
  out.reserve(images.size());
  for (const auto& img : images) {
    if (img.shape != w.config.input)
      throw ConfigError("embed: image " + to_string(img.shape) + " does not match net input " +
                        to_string(w.config.input));
    out.push_back(forward_image(w, film, img.pixels, nullptr));
  }
  return out;
}

namespace detail {

inline void check_support(const LabeledSet& support, int way, const NetConfig& cfg) {
  if (support.empty()) throw ConfigError("adapt: empty support set");
  if (way < 1) throw ConfigError("adapt: way must be >= 1");
  validate_labeled_set(support, way);
  std::vector<int> counts(static_cast<std::size_t>(way), 0);
  for (int y : support.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c = 0; c < way; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw ConfigError("adapt: class " + std::to_string(c) + " has no support examples");
  for (const auto& img : support.images)
    if (img.shape != cfg.input)
      throw ConfigError("adapt: support image " + to_string(img.shape) +
                        " does not match net input " + to_string(cfg.input));
}

// Column-wise mean over rows, independent of row order.
inline std::vector<double> order_invariant_mean(const Matrix& rows,
                                                std::span<const std::size_t> members) {
  const std::size_t dim = rows[members[0]].size();
  std::vector<double> out(dim);
  std::vector<double> scratch(members.size());
  for (std::size_t k = 0; k < dim; ++k) {
    for (std::size_t i = 0; i < members.size(); ++i) scratch[i] = rows[members[i]][k];
    out[k] = order_invariant_sum(scratch) / static_cast<double>(members.size());
  }
  return out;
}

inline FilmParams generate_film(const ModelWeights& w, std::span<const double> set_encoding) {
  const NetConfig& cfg = w.config;
  FilmParams film = FilmParams::identity(cfg);
  if (!cfg.film) return film;
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  const std::size_t E = set_encoding.size();
  for (int b = 0; b < cfg.blocks; ++b) {
    const auto& W = w.film_weight(b).values;
    const auto& bias = w.film_bias(b).values;
    auto& layer = film.layers[static_cast<std::size_t>(b)];
    for (std::size_t j = 0; j < 2 * C; ++j) {
      double acc = bias[j];
      const double* row = W.data() + j * E;
      for (std::size_t k = 0; k < E; ++k) acc += row[k] * set_encoding[k];
      if (j < C)
        layer.scale[j] = 1.0 + acc;
      else
        layer.shift[j - C] = acc;
    }
  }
  return film;
}

struct AdaptState {
  std::vector<double> set_encoding;
  FilmParams film_used;  // generated parameters after any noise
  std::vector<ForwardTrace> identity_traces;
  std::vector<ForwardTrace> support_traces;
  Matrix support_embeddings;
  std::vector<std::vector<std::size_t>> members;  // support indices per class
  TaskParams params;
};

inline AdaptState adapt_forward(const ModelWeights& w, const LabeledSet& support, int way,
                                const FilmNoise* noise, bool keep_traces) {
  const NetConfig& cfg = w.config;
  check_support(support, way, cfg);
  const std::size_t N = support.size();
  AdaptState st;
  const FilmParams identity = FilmParams::identity(cfg);
  FilmParams film = identity;
  if (cfg.film) {
    Matrix id_emb(N);
    if (keep_traces) st.identity_traces.resize(N);
    for (std::size_t n = 0; n < N; ++n)
      id_emb[n] = forward_image(w, identity, support.images[n].pixels,
                                keep_traces ? &st.identity_traces[n] : nullptr);
    std::vector<std::size_t> all(N);
    for (std::size_t n = 0; n < N; ++n) all[n] = n;
    st.set_encoding = order_invariant_mean(id_emb, all);
    film = generate_film(w, st.set_encoding);
    if (noise) film = apply_film_noise(film, *noise);
  }
  st.film_used = film;
  st.support_embeddings.resize(N);
  if (keep_traces) st.support_traces.resize(N);
  for (std::size_t n = 0; n < N; ++n)
    st.support_embeddings[n] = forward_image(w, film, support.images[n].pixels,
                                             keep_traces ? &st.support_traces[n] : nullptr);
  st.members.resize(static_cast<std::size_t>(way));
  for (std::size_t n = 0; n < N; ++n)
    st.members[static_cast<std::size_t>(support.labels[n])].push_back(n);
  st.params.film = film;
  st.params.prototypes.resize(static_cast<std::size_t>(way));
  for (int c = 0; c < way; ++c)
    st.params.prototypes[static_cast<std::size_t>(c)] =
        order_invariant_mean(st.support_embeddings, st.members[static_cast<std::size_t>(c)]);
  return st;
}

}  // namespace detail

// psi = g(support): set encoder over identity-FiLM embeddings -> FiLM
// generators -> per-class means of the FiLM-adapted support embeddings.
inline TaskParams adapt(const ModelWeights& w, const LabeledSet& support, int way) {
  return detail::adapt_forward(w, support, way, nullptr, false).params;
}

// logit[m][c] = -||e_m - prototype_c||^2
inline std::vector<double> logits_from_embedding(std::span<const double> e, const TaskParams& psi) {
  std::vector<double> out(psi.prototypes.size());
  for (std::size_t c = 0; c < psi.prototypes.size(); ++c) {
    const auto& p = psi.prototypes[c];
    double d = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double diff = e[k] - p[k];
      d += diff * diff;
    }
    out[c] = -d;
  }
  return out;
}

inline Matrix predict_logits(const ModelWeights& w, const TaskParams& psi,
                             std::span<const Image> queries) {
  Matrix out;
  out.reserve(queries.size());
  for (const auto& e : embed(w, psi.film, queries)) out.push_back(logits_from_embedding(e, psi));
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

// Ties go to the lowest class index.
inline int argmax(std::span<const double> logits) {
  int best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  return best;
}

inline double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Mean cross-entropy over the batch.
inline double loss(const Matrix& logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) throw ConfigError("loss: logits/labels length mismatch");
  if (logits.empty()) throw ConfigError("loss: empty batch");
  double total = 0.0;
  for (std::size_t m = 0; m < logits.size(); ++m) {
    const int y = labels[m];
    if (y < 0 || static_cast<std::size_t>(y) >= logits[m].size())
      throw ConfigError("loss: label out of range");
    total += log_sum_exp(logits[m]) - logits[m][static_cast<std::size_t>(y)];
  }
  return total / static_cast<double>(logits.size());
}

// ---------------------------------------------------------------------------
// Episode forward/backward

struct EpisodeOptions {
  bool weight_grads = false;
  bool query_grads = false;
  const PoisonMask* support_grad_mask = nullptr;  // support images to differentiate
  const FilmNoise* noise = nullptr;               // perturbation of generated FiLM
};

struct EpisodeResult {
  double loss = 0.0;
  TaskParams params;
  Matrix logits;
  ModelWeights weight_grads;  // populated when requested
  Matrix support_grads;       // aligned with support_grad_mask->indices
  Matrix query_grads;         // one per query image
};

// Mean query cross-entropy of f(x*, g(support)) together with exact gradients
// through prototypes, FiLM generators and the set encoder.
inline EpisodeResult run_episode(const ModelWeights& w, const LabeledSet& support, int way,
                                 const LabeledSet& query, const EpisodeOptions& opt = {}) {
  const NetConfig& cfg = w.config;
  if (query.empty()) throw ConfigError("episode: query set must be non-empty");
  validate_labeled_set(query, way);
  if (opt.support_grad_mask) validate_mask(*opt.support_grad_mask, support.size());
  const bool want_support = opt.support_grad_mask != nullptr && !opt.support_grad_mask->empty();
  const bool need_grad = opt.weight_grads || opt.query_grads || want_support;
  const FilmNoise* noise = cfg.film ? opt.noise : nullptr;

  auto st = detail::adapt_forward(w, support, way, noise, need_grad);
  const std::size_t N = support.size(), M = query.size();
  const auto& psi = st.params;

  EpisodeResult res;
  std::vector<ForwardTrace> qtraces(need_grad ? M : 0);
  Matrix qemb(M);
  for (std::size_t m = 0; m < M; ++m) {
    if (query.images[m].shape != cfg.input)
      throw ConfigError("episode: query image does not match net input");
    qemb[m] = forward_image(w, st.film_used, query.images[m].pixels, need_grad ? &qtraces[m] : nullptr);
  }
  res.logits.resize(M);
  for (std::size_t m = 0; m < M; ++m) res.logits[m] = logits_from_embedding(qemb[m], psi);
  res.loss = loss(res.logits, query.labels);
  res.params = psi;
  if (!need_grad) return res;

  // d loss / d logits
  const std::size_t C = static_cast<std::size_t>(way);
  const std::size_t E = static_cast<std::size_t>(cfg.embedding_dim());
  Matrix dlog(M);
  for (std::size_t m = 0; m < M; ++m) {
    dlog[m] = softmax(res.logits[m]);
    dlog[m][static_cast<std::size_t>(query.labels[m])] -= 1.0;
    for (auto& v : dlog[m]) v /= static_cast<double>(M);
  }
  Matrix dproto(C, std::vector<double>(E, 0.0));
  Matrix dqemb(M, std::vector<double>(E, 0.0));
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dlog[m][c];
      const auto& p = psi.prototypes[c];
      for (std::size_t k = 0; k < E; ++k) {
        const double diff = qemb[m][k] - p[k];
        dqemb[m][k] -= 2.0 * g * diff;
        dproto[c][k] += 2.0 * g * diff;
      }
    }

  std::vector<char> support_dx(N, 0);
  if (want_support)
    for (auto i : opt.support_grad_mask->indices) support_dx[i] = 1;
  Matrix sdx(N);

  if (opt.weight_grads) res.weight_grads = ModelWeights::zeros(cfg);
  ModelWeights* wg = opt.weight_grads ? &res.weight_grads : nullptr;
  const bool need_film_grad = cfg.film && (opt.weight_grads || want_support);
  FilmParams dfilm = FilmParams::zeros(cfg);
  FilmParams* dfp = need_film_grad ? &dfilm : nullptr;

  if (opt.query_grads) res.query_grads.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    if (!wg && !dfp && !opt.query_grads) break;
    backward_image(w, st.film_used, qtraces[m], dqemb[m], wg, dfp,
                   opt.query_grads ? &res.query_grads[m] : nullptr);
  }
  for (std::size_t n = 0; n < N; ++n) {
    if (!wg && !dfp && !support_dx[n]) continue;
    const int y = support.labels[n];
    const auto& members = st.members[static_cast<std::size_t>(y)];
    std::vector<double> de(dproto[static_cast<std::size_t>(y)]);
    for (auto& v : de) v /= static_cast<double>(members.size());
    backward_image(w, st.film_used, st.support_traces[n], de, wg, dfp, support_dx[n] ? &sdx[n] : nullptr);
  }

  if (need_film_grad) {
    // Through the generators into the set encoding.
    std::vector<double> dset(E, 0.0);
    const std::size_t Ch = static_cast<std::size_t>(cfg.channels);
    for (int b = 0; b < cfg.blocks; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      std::vector<double> dout(2 * Ch);
      for (std::size_t j = 0; j < Ch; ++j) {
        const double ms = noise ? noise->mul[bi].scale[j] : 1.0;
        const double mt = noise ? noise->mul[bi].shift[j] : 1.0;
        dout[j] = dfilm.layers[bi].scale[j] * ms;
        dout[Ch + j] = dfilm.layers[bi].shift[j] * mt;
      }
      const auto& W = w.film_weight(b).values;
      for (std::size_t j = 0; j < 2 * Ch; ++j) {
        const double g = dout[j];
        if (g == 0.0) continue;
        const double* row = W.data() + j * E;
        for (std::size_t k = 0; k < E; ++k) dset[k] += row[k] * g;
        if (wg) {
          double* grow = wg->film_weight(b).values.data() + j * E;
          for (std::size_t k = 0; k < E; ++k) grow[k] += g * st.set_encoding[k];
          wg->film_bias(b).values[j] += g;
        }
      }
    }
    for (auto& v : dset) v /= static_cast<double>(N);
    const FilmParams identity = FilmParams::identity(cfg);
    for (std::size_t n = 0; n < N; ++n) {
      if (!wg && !support_dx[n]) continue;
      backward_image(w, identity, st.identity_traces[n], dset, wg, nullptr,
                     support_dx[n] ? &sdx[n] : nullptr);
    }
  }

  if (want_support) {
    res.support_grads.reserve(opt.support_grad_mask->size());
    for (auto i : opt.support_grad_mask->indices) res.support_grads.push_back(std::move(sdx[i]));
  }
  return res;
}

struct SupportGradient {
  double loss = 0.0;
  Matrix grads;  // aligned with mask.indices
};

// Gradient of the mean query loss with respect to the masked support images.
// Dropout noise on the FiLM path is drawn fresh from `rng` on every call.
template <class Rng>
SupportGradient grad_support(const ModelWeights& w, const LabeledSet& support, int way,
                             const PoisonMask& mask, const LabeledSet& query,
                             const DropoutSpec& dropout, Rng& rng) {
  std::optional<FilmNoise> noise;
  if (w.config.film && dropout.active()) noise = sample_film_noise(w.config, dropout, rng);
  EpisodeOptions opt;
  opt.support_grad_mask = &mask;
  opt.noise = noise ? &*noise : nullptr;
  auto r = run_episode(w, support, way, query, opt);
  return SupportGradient{r.loss, std::move(r.support_grads)};
}

inline SupportGradient grad_support(const ModelWeights& w, const LabeledSet& support, int way,
                                    const PoisonMask& mask, const LabeledSet& query) {
  std::mt19937_64 unused(0);
  return grad_support(w, support, way, mask, query, DropoutSpec{}, unused);
}

struct QueryGradient {
  double loss = 0.0;
  std::vector<double> grad;
};

// Gradient of the cross-entropy of one query image under frozen psi. Pixels
// where `pixel_mask` is zero receive exactly zero gradient.
inline QueryGradient grad_query(const ModelWeights& w, const TaskParams& psi, const Image& image,
                                int label, std::span<const std::uint8_t> pixel_mask = {}) {
  if (image.shape != w.config.input) throw ConfigError("grad_query: image shape mismatch");
  if (label < 0 || label >= psi.way()) throw ConfigError("grad_query: label out of range");
  if (!pixel_mask.empty() && pixel_mask.size() != image.pixels.size())
    throw ConfigError("grad_query: pixel mask size mismatch");
  ForwardTrace trace;
  const auto e = forward_image(w, psi.film, image.pixels, &trace);
  const auto logits = logits_from_embedding(e, psi);
  QueryGradient out;
  out.loss = log_sum_exp(logits) - logits[static_cast<std::size_t>(label)];
  auto g = softmax(logits);
  g[static_cast<std::size_t>(label)] -= 1.0;
  std::vector<double> de(e.size(), 0.0);
  for (std::size_t c = 0; c < g.size(); ++c)
    for (std::size_t k = 0; k < e.size(); ++k)
      de[k] -= 2.0 * g[c] * (e[k] - psi.prototypes[c][k]);
  out.grad.assign(image.pixels.size(), 0.0);
  backward_image(w, psi.film, trace, de, nullptr, nullptr, &out.grad);
  if (!pixel_mask.empty())
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      if (!pixel_mask[i]) out.grad[i] = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Meta-training

struct TrainConfig {
  int episodes = 2000;
  int way_min = 5, way_max = 5;
  int shot_min = 5, shot_max = 5;
  int queries = 10;  // per class
  double learning_rate = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    require(episodes >= 0, "train: episodes must be >= 0");
    require(way_min >= 1 && way_min <= way_max, "train: invalid way range");
    require(shot_min >= 1 && shot_min <= shot_max, "train: invalid shot range");
    require(queries >= 1, "train: queries must be >= 1");
    require(learning_rate > 0.0, "train: learning_rate must be > 0");
  }
};

// Episodic SGD over f and g. `on_episode(index, loss)` is invoked after each
// update when provided.
inline ModelWeights meta_train(ModelWeights w, const Dataset& ds, const TrainConfig& cfg,
                               const std::function<void(int, double)>& on_episode = {}) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, {0x7a1}));
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    EpisodeShape shape;
    shape.way = std::uniform_int_distribution<int>(cfg.way_min, cfg.way_max)(rng);
    shape.shots = std::uniform_int_distribution<int>(cfg.shot_min, cfg.shot_max)(rng);
    shape.queries = cfg.queries;
    shape.eval_sets = 0;
    const Task task = sample_task(ds, shape, rng);
    EpisodeOptions opt;
    opt.weight_grads = true;
    auto r = run_episode(w, task.support, task.way, task.seed_query, opt);
    if (!std::isfinite(r.loss) || !r.weight_grads.all_finite())
      throw NumericError("meta_train: non-finite loss or gradient at episode " + std::to_string(ep));
    for (std::size_t t = 0; t < w.tensors.size(); ++t) {
      auto& v = w.tensors[t].values;
      const auto& g = r.weight_grads.tensors[t].values;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.learning_rate * g[i];
    }
    if (on_episode) on_episode(ep, r.loss);
  }
  return w;
}

// ---------------------------------------------------------------------------
// FSCK checkpoints

inline constexpr const char* kInputShapeTensor = "config.input_shape";

inline std::string encode_checkpoint(const ModelWeights& w) {
  BinaryWriter out;
  out.bytes("FSCK");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(w.tensors.size() + 1));
  auto put = [&](const std::string& name, const std::vector<std::uint32_t>& dims,
                 const std::vector<double>& values) {
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.bytes(name);
    out.u8(static_cast<std::uint8_t>(dims.size()));
    for (auto d : dims) out.u32(d);
    for (double v : values) out.f32(static_cast<float>(v));
  };
  const auto& in = w.config.input;
  put(kInputShapeTensor, {3},
      {static_cast<double>(in.channels), static_cast<double>(in.height), static_cast<double>(in.width)});
  for (const auto& t : w.tensors) put(t.name, t.dims, t.values);
  return out.data();
}

inline void save_checkpoint(const ModelWeights& w, const std::string& path) {
  BinaryWriter out;
  out.bytes(encode_checkpoint(w));
  out.write_file(path);
}

inline ModelWeights decode_checkpoint(BinaryReader& r) {
  if (r.remaining() < 4 || r.bytes(4) != "FSCK")
    throw DataError(DataErrorKind::bad_magic, r.origin() + ": not an FSCK checkpoint");
  const auto version = r.u32();
  if (version != 1)
    throw DataError(DataErrorKind::unsupported_version,
                    r.origin() + ": FSCK version " + std::to_string(version));
  const auto count = r.u32();
  std::map<std::string, Tensor> found;
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto len = r.u16();
    t.name = std::string(r.bytes(len));
    const auto rank = r.u8();
    std::size_t n = 1;
    for (int k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    r.need(n * 4);
    t.values.resize(n);
    for (auto& v : t.values) v = static_cast<double>(r.f32());
    found[t.name] = std::move(t);
  }
  if (r.remaining() != 0)
    throw DataError(DataErrorKind::dimension_mismatch, r.origin() + ": trailing bytes in checkpoint");
  auto shape_it = found.find(kInputShapeTensor);
  if (shape_it == found.end() || shape_it->second.values.size() != 3)
    throw DataError(DataErrorKind::invalid_value, r.origin() + ": missing " + kInputShapeTensor);
  NetConfig cfg;
  cfg.input = Shape{static_cast<int>(shape_it->second.values[0]),
                    static_cast<int>(shape_it->second.values[1]),
                    static_cast<int>(shape_it->second.values[2])};
  cfg.blocks = 0;
  while (found.count("block" + std::to_string(cfg.blocks) + ".kernel")) ++cfg.blocks;
  if (cfg.blocks == 0)
    throw DataError(DataErrorKind::invalid_value, r.origin() + ": checkpoint has no conv blocks");
  cfg.channels = static_cast<int>(found["block0.kernel"].dims.at(0));
  cfg.film = found.count("film_gen0.weight") > 0;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError(DataErrorKind::dimension_mismatch, r.origin() + ": " + e.what());
  }
  ModelWeights w = ModelWeights::zeros(cfg);
  for (auto& t : w.tensors) {
    auto it = found.find(t.name);
    if (it == found.end())
      throw DataError(DataErrorKind::invalid_value, r.origin() + ": missing tensor " + t.name);
    if (it->second.dims != t.dims)
      throw DataError(DataErrorKind::dimension_mismatch, r.origin() + ": tensor " + t.name +
                                                             " has unexpected dims");
    t.values = std::move(it->second.values);
    found.erase(it);
  }
  found.erase(kInputShapeTensor);
  if (!found.empty())
    throw DataError(DataErrorKind::invalid_value,
                    r.origin() + ": unexpected tensor " + found.begin()->first);
  return w;
}

inline ModelWeights load_checkpoint(const std::string& path) {
  auto r = BinaryReader::from_file(path);
  ModelWeights w = decode_checkpoint(r);
  w.id = path;
  return w;
}

inline std::string checkpoint_id(const ModelWeights& w) {
  return "fsck:" + hex64(fnv1a64(encode_checkpoint(w)));
}

}  // namespace fsl
