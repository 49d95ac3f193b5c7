#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fsl/model.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fsl;
using namespace fsl::fixture;

TEST(Forward, MatchesNaiveConvolution) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelWeights w = random_weights(cfg, 100 + trial);
    const FilmParams film = random_film(cfg, rng);
    const Image img = random_image(cfg.input, rng);
    const auto fast = forward_image(w, film, img.pixels, nullptr);
    const auto slow = oracle::naive_forward(w, film, img.pixels);
    ASSERT_EQ(fast.size(), slow.size());
    EXPECT_LT(oracle::max_relative_error(fast, slow), 1e-12);
  }
}

TEST(Forward, MultiChannelInputAndWideMaps) {
  NetConfig cfg;
  cfg.input = {3, 8, 16};
  cfg.blocks = 3;
  cfg.channels = 4;
  const ModelWeights w = random_weights(cfg, 3);
  std::mt19937_64 rng(2);
  const FilmParams film = random_film(cfg, rng);
  const Image img = random_image(cfg.input, rng);
  EXPECT_LT(oracle::max_relative_error(forward_image(w, film, img.pixels, nullptr),
                                       oracle::naive_forward(w, film, img.pixels)),
            1e-12);
  EXPECT_EQ(cfg.embedding_dim(), 4 * 1 * 2);
}

TEST(Forward, IdentityFilmEqualsFilmFreeNetwork) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 4);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Image img = random_image(cfg.input, rng);
    EXPECT_LT(oracle::max_relative_error(forward_image(w, FilmParams::identity(cfg), img.pixels, nullptr),
                                         oracle::naive_forward(w, FilmParams::identity(cfg), img.pixels, false)),
              1e-12);
  }
}

TEST(Forward, ZeroInputZeroBiasGivesZeroEmbedding) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = init_weights(cfg, 9);
  const Image zero(cfg.input, 0.0);
  for (double v : forward_image(w, FilmParams::identity(cfg), zero.pixels, nullptr)) EXPECT_EQ(v, 0.0);
}

TEST(Forward, BatchEmbeddingIsPerImage) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 5);
  std::mt19937_64 rng(4);
  std::vector<Image> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_image(cfg.input, rng));
  const FilmParams film = random_film(cfg, rng);
  const Matrix all = embed(w, film, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::vector<Image> one{batch[i]};
    EXPECT_EQ(embed(w, film, one)[0], all[i]);
  }
}

TEST(Forward, RejectsWrongShape) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 5);
  const std::vector<Image> bad{Image({1, 4, 4})};
  EXPECT_THROW(embed(w, FilmParams::identity(cfg), bad), ConfigError);
  NetConfig odd = cfg;
  odd.input = {1, 6, 6};
  EXPECT_THROW(odd.validate(), ConfigError);
}

TEST(Adapt, MatchesNaiveAdaptation) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelWeights w = random_weights(cfg, 200 + trial);
    const LabeledSet s = random_set(cfg.input, 3, 2, rng);
    const TaskParams psi = adapt(w, s, 3);
    const auto ref = oracle::naive_adapt(w, s, 3);
    for (std::size_t b = 0; b < psi.film.layers.size(); ++b) {
      EXPECT_LT(oracle::max_relative_error(psi.film.layers[b].scale, ref.film.layers[b].scale), 1e-12);
      EXPECT_LT(oracle::max_relative_error(psi.film.layers[b].shift, ref.film.layers[b].shift), 1e-12);
    }
    for (int c = 0; c < 3; ++c)
      EXPECT_LT(oracle::max_relative_error(psi.prototypes[static_cast<std::size_t>(c)],
                                           ref.prototypes[static_cast<std::size_t>(c)]),
                1e-12);
  }
}

TEST(Adapt, SingletonSupportPrototypeIsEmbedding) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 7);
  std::mt19937_64 rng(7);
  LabeledSet s;
  s.push_back(random_image(cfg.input, rng), 0);
  const TaskParams psi = adapt(w, s, 1);
  const std::vector<Image> one{s.images[0]};
  EXPECT_EQ(psi.prototypes[0], embed(w, psi.film, one)[0]);
}

TEST(Adapt, DuplicatedSupportGivesSameParams) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 8);
  std::mt19937_64 rng(8);
  const LabeledSet s = random_set(cfg.input, 2, 2, rng);
  LabeledSet twice = s;
  for (std::size_t i = 0; i < s.size(); ++i) twice.push_back(s.images[i], s.labels[i]);
  const TaskParams a = adapt(w, s, 2), b = adapt(w, twice, 2);
  for (std::size_t l = 0; l < a.film.layers.size(); ++l)
    EXPECT_LT(oracle::max_relative_error(b.film.layers[l].scale, a.film.layers[l].scale), 1e-14);
  for (int c = 0; c < 2; ++c)
    EXPECT_LT(oracle::max_relative_error(b.prototypes[static_cast<std::size_t>(c)],
                                         a.prototypes[static_cast<std::size_t>(c)]),
              1e-14);
}

TEST(Adapt, PermutationInvariantBitwise) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelWeights w = random_weights(cfg, 300 + trial);
    const LabeledSet s = random_set(cfg.input, 3, 3, rng);
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    LabeledSet p;
    for (auto i : perm) p.push_back(s.images[i], s.labels[i]);
    EXPECT_EQ(adapt(w, s, 3), adapt(w, p, 3));
  }
}

TEST(Adapt, RejectsEmptyClassAndEmptySupport) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 10);
  std::mt19937_64 rng(10);
  LabeledSet s = random_set(cfg.input, 2, 1, rng);
  EXPECT_THROW(adapt(w, s, 3), ConfigError);
  EXPECT_THROW(adapt(w, LabeledSet{}, 1), ConfigError);
}

TEST(Adapt, FilmFreeModelKeepsIdentity) {
  const NetConfig cfg = tiny_config(false);
  const ModelWeights w = random_weights(cfg, 11);
  std::mt19937_64 rng(11);
  EXPECT_TRUE(adapt(w, random_set(cfg.input, 2, 2, rng), 2).film.is_identity());
}

TEST(Predict, QueryAtPrototypeScoresZero) {
  const NetConfig cfg = tiny_config();
  const ModelWeights w = random_weights(cfg, 12);
  std::mt19937_64 rng(12);
  LabeledSet s;
  for (int c = 0; c < 3; ++c) s.push_back(random_image(cfg.input, rng), c);
  const TaskParams psi = adapt(w, s, 3);
  const Matrix logits = predict_logits(w, psi, s.images);
  for (int c = 0; c < 3; ++c) {
    const auto& row = logits[static_cast<std::size_t>(c)];
    EXPECT_EQ(row[static_cast<std::size_t>(c)], 0.0);
    for (int k = 0; k < 3; ++k)
      if (k != c && psi.prototypes[static_cast<std::size_t>(k)] != psi.prototypes[static_cast<std::size_t>(c)]) {
        EXPECT_LT(row[static_cast<std::size_t>(k)], 0.0);
      }
    EXPECT_EQ(argmax(row), c);
  }
}

TEST(Predict, ArgmaxBreaksTiesToLowestIndex) {
  EXPECT_EQ(argmax(std::vector<double>{-1.0, -1.0, -2.0}), 0);
  EXPECT_EQ(argmax(std::vector<double>{-3.0, -1.0, -1.0}), 1);
  EXPECT_EQ(argmax(std::vector<double>{0.0}), 0);
}

TEST(Predict, LogitsMatchNaiveAndSoftmaxNormalises) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(13);
  const ModelWeights w = random_weights(cfg, 13);
  const LabeledSet s = random_set(cfg.input, 4, 2, rng);
  const LabeledSet q = random_set(cfg.input, 4, 3, rng);
  const TaskParams psi = adapt(w, s, 4);
  const auto ref = oracle::naive_adapt(w, s, 4);
  const Matrix logits = predict_logits(w, psi, q.images);
  for (std::size_t m = 0; m < q.size(); ++m) {
    const auto naive = oracle::naive_logits(ref, oracle::naive_forward(w, ref.film, q.images[m].pixels));
    EXPECT_LT(oracle::max_relative_error(logits[m], naive), 1e-12);
    const auto p = softmax(logits[m]);
    double total = 0.0;
    for (double v : p) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Loss, UniformLogitsGiveLogWay) {
  const Matrix logits(7, std::vector<double>(5, -2.5));
  const std::vector<int> labels{0, 1, 2, 3, 4, 0, 1};
  EXPECT_NEAR(loss(logits, labels), std::log(5.0), 1e-12);
}

TEST(Loss, ConfidentCorrectIsNearZero) {
  const Matrix logits{{0.0, -1000.0, -1000.0}};
  EXPECT_NEAR(loss(logits, std::vector<int>{0}), 0.0, 1e-12);
}

TEST(Loss, StableForLargeLogits) {
  const Matrix logits{{-1e6, -1e6 - 1.0}};
  const double l = loss(logits, std::vector<int>{1});
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 1.0 + std::log1p(std::exp(-1.0)), 1e-9);
}

TEST(Loss, EpisodeMatchesNaive) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelWeights w = random_weights(cfg, 400 + trial);
    const LabeledSet s = random_set(cfg.input, 3, 2, rng);
    const LabeledSet q = random_set(cfg.input, 3, 2, rng);
    const double fast = run_episode(w, s, 3, q).loss;
    const double slow = oracle::naive_episode_loss(w, s, 3, q);
    EXPECT_NEAR(fast, slow, 1e-12 * std::max(1.0, std::abs(slow)));
  }
}

// The episode loss is piecewise smooth in every input, so gradient checks
// use the kink-aware central difference oracle.
TEST(Gradients, SupportGradientMatchesFiniteDifferences) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(15);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelWeights w = random_weights(cfg, 500 + trial);
    LabeledSet s = random_set(cfg.input, 2, 2, rng);
    const LabeledSet q = random_set(cfg.input, 2, 2, rng);
    const PoisonMask mask{{static_cast<std::size_t>(trial % 4)}};
    const auto g = grad_support(w, s, 2, mask, q);
    auto& x = s.images[mask.indices[0]].pixels;
    const auto fd = oracle::central_difference_piecewise(
        x, [&](std::vector<char>* pat) { return oracle::naive_episode_loss(w, s, 2, q, nullptr, pat); }, 1e-5);
    EXPECT_LT(oracle::max_relative_error(g.grads[0], fd.grad), 1e-4) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(Gradients, SingleQueryAndAllMaskedSupport) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(16);
  const ModelWeights w = random_weights(cfg, 16);
  LabeledSet s = random_set(cfg.input, 2, 2, rng);
  LabeledSet q;
  q.push_back(random_image(cfg.input, rng), 1);
  const auto g = grad_support(w, s, 2, PoisonMask::all(s.size()), q);
  ASSERT_EQ(g.grads.size(), s.size());
  for (std::size_t n = 0; n < s.size(); ++n) {
    auto& x = s.images[n].pixels;
    const auto fd = oracle::central_difference_piecewise(
        x, [&](std::vector<char>* pat) { return oracle::naive_episode_loss(w, s, 2, q, nullptr, pat); }, 1e-5);
    EXPECT_LT(oracle::max_relative_error(g.grads[n], fd.grad), 1e-4);
  }
}

TEST(Gradients, FilmFreeSupportGradient) {
  const NetConfig cfg = tiny_config(false);
  std::mt19937_64 rng(17);
  const ModelWeights w = random_weights(cfg, 17);
  LabeledSet s = random_set(cfg.input, 2, 2, rng);
  const LabeledSet q = random_set(cfg.input, 2, 2, rng);
  const auto g = grad_support(w, s, 2, PoisonMask{{1}}, q);
  const auto fd = oracle::central_difference_piecewise(
      s.images[1].pixels,
      [&](std::vector<char>* pat) { return oracle::naive_episode_loss(w, s, 2, q, nullptr, pat); }, 1e-5);
  EXPECT_LT(oracle::max_relative_error(g.grads[0], fd.grad), 1e-4);
}

TEST(Gradients, SupportGradientUnderFixedNoise) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(18);
  const ModelWeights w = random_weights(cfg, 18);
  LabeledSet s = random_set(cfg.input, 2, 2, rng);
  const LabeledSet q = random_set(cfg.input, 2, 2, rng);
  const FilmNoise noise = sample_film_noise(cfg, DropoutSpec{DropoutStrategy::gaussian, 0.3}, rng);
  const PoisonMask mask{{0}};
  EpisodeOptions opt;
  opt.support_grad_mask = &mask;
  opt.noise = &noise;
  const auto r = run_episode(w, s, 2, q, opt);
  EXPECT_NEAR(r.loss, oracle::naive_episode_loss(w, s, 2, q, &noise), 1e-12);
  const auto fd = oracle::central_difference_piecewise(
      s.images[0].pixels,
      [&](std::vector<char>* pat) { return oracle::naive_episode_loss(w, s, 2, q, &noise, pat); }, 1e-5);
  EXPECT_LT(oracle::max_relative_error(r.support_grads[0], fd.grad), 1e-4);
}

TEST(Gradients, QueryGradientMatchesFiniteDifferences) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelWeights w = random_weights(cfg, 600 + trial);
    const LabeledSet s = random_set(cfg.input, 3, 2, rng);
    const TaskParams psi = adapt(w, s, 3);
    const auto ref = oracle::naive_adapt(w, s, 3);
    Image x = random_image(cfg.input, rng);
    const int label = trial % 3;
    const auto g = grad_query(w, psi, x, label);
    const auto fd = oracle::central_difference_piecewise(
        x.pixels,
        [&](std::vector<char>* pat) {
          return oracle::naive_ce(oracle::naive_logits(ref, oracle::naive_forward(w, ref.film, x.pixels, true, pat)),
                                  label);
        },
        1e-5);
    EXPECT_LT(oracle::max_relative_error(g.grad, fd.grad), 1e-4);
  }
}

TEST(Gradients, QueryGradientVanishesWithIdenticalPrototypes) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(20);
  const ModelWeights w = random_weights(cfg, 20);
  const Image a = random_image(cfg.input, rng);
  LabeledSet s;
  s.push_back(a, 0);
  s.push_back(a, 1);
  const TaskParams psi = adapt(w, s, 2);
  for (double v : grad_query(w, psi, random_image(cfg.input, rng), 1).grad) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, PixelMaskZeroesGradientExactly) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(21);
  const ModelWeights w = random_weights(cfg, 21);
  const TaskParams psi = adapt(w, random_set(cfg.input, 2, 2, rng), 2);
  const Image x = random_image(cfg.input, rng);
  std::vector<std::uint8_t> mask(x.pixels.size(), 0);
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
  const auto full = grad_query(w, psi, x, 0);
  const auto masked = grad_query(w, psi, x, 0, mask);
  for (std::size_t i = 0; i < mask.size(); ++i) EXPECT_EQ(masked.grad[i], mask[i] ? full.grad[i] : 0.0);
}

TEST(Gradients, WeightGradientMatchesFiniteDifferences) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(22);
  ModelWeights w = random_weights(cfg, 22);
  const LabeledSet s = random_set(cfg.input, 2, 2, rng);
  const LabeledSet q = random_set(cfg.input, 2, 2, rng);
  EpisodeOptions opt;
  opt.weight_grads = true;
  const auto r = run_episode(w, s, 2, q, opt);
  for (std::size_t t = 0; t < w.tensors.size(); ++t) {
    const auto fd = oracle::central_difference_piecewise(
        w.tensors[t].values,
        [&](std::vector<char>* pat) { return oracle::naive_episode_loss(w, s, 2, q, nullptr, pat); }, 1e-5);
    EXPECT_LT(oracle::max_relative_error(r.weight_grads.tensors[t].values, fd.grad), 1e-4) << w.tensors[t].name;
  }
}

TEST(Gradients, OnlyMaskedImagesReported) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(23);
  const ModelWeights w = random_weights(cfg, 23);
  const LabeledSet s = random_set(cfg.input, 2, 3, rng);
  const LabeledSet q = random_set(cfg.input, 2, 2, rng);
  const auto all = grad_support(w, s, 2, PoisonMask::all(s.size()), q);
  const auto some = grad_support(w, s, 2, PoisonMask{{1, 4}}, q);
  ASSERT_EQ(some.grads.size(), 2u);
  EXPECT_EQ(some.grads[0], all.grads[1]);
  EXPECT_EQ(some.grads[1], all.grads[4]);
  EXPECT_TRUE(grad_support(w, s, 2, PoisonMask{}, q).grads.empty());
}

TEST(Dropout, ZeroRateIsNoOp) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(24);
  const FilmParams film = random_film(cfg, rng);
  for (auto s : {DropoutStrategy::none, DropoutStrategy::block_wise, DropoutStrategy::layer_wise,
                 DropoutStrategy::gaussian})
    EXPECT_EQ(apply_film_dropout(cfg, film, DropoutSpec{s, 0.0}, rng), film);
}

TEST(Dropout, GaussianStd) {
  EXPECT_NEAR(gaussian_dropout_std(0.005), 0.0708881205008336, 1e-15);
  EXPECT_EQ(gaussian_dropout_std(0.0), 0.0);
  EXPECT_THROW(gaussian_dropout_std(1.0), ConfigError);
  NetConfig cfg = tiny_config();
  cfg.channels = 64;
  std::mt19937_64 rng(25);
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for (int i = 0; i < 200; ++i) {
    const FilmNoise noise = sample_film_noise(cfg, DropoutSpec{DropoutStrategy::gaussian, 0.2}, rng);
    for (const auto& l : noise.mul)
      for (double v : l.scale) {
        sum += v - 1.0;
        sq += (v - 1.0) * (v - 1.0);
        ++n;
      }
  }
  const double mean = sum / n;
  EXPECT_NEAR(std::sqrt(sq / n - mean * mean), std::sqrt(0.2 / 0.8), 0.01);
}

TEST(Dropout, FullBlockDropoutGivesFilmFreeNetwork) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(26);
  const FilmParams film = random_film(cfg, rng);
  for (auto s : {DropoutStrategy::block_wise, DropoutStrategy::layer_wise})
    EXPECT_TRUE(apply_film_dropout(cfg, film, DropoutSpec{s, 1.0}, rng).is_identity());
}

TEST(Dropout, LayerWiseDropsWholeChannels) {
  NetConfig cfg = tiny_config();
  cfg.channels = 32;
  std::mt19937_64 rng(27);
  const FilmParams film = random_film(cfg, rng);
  int dropped = 0, total = 0;
  for (int i = 0; i < 50; ++i) {
    const FilmParams d = apply_film_dropout(cfg, film, DropoutSpec{DropoutStrategy::layer_wise, 0.3}, rng);
    for (std::size_t b = 0; b < d.layers.size(); ++b)
      for (std::size_t c = 0; c < d.layers[b].scale.size(); ++c) {
        const bool off = d.layers[b].scale[c] == 1.0 && d.layers[b].shift[c] == 0.0;
        const bool kept = d.layers[b].scale[c] == film.layers[b].scale[c] &&
                          d.layers[b].shift[c] == film.layers[b].shift[c];
        EXPECT_TRUE(off || kept);
        dropped += off;
        ++total;
      }
  }
  EXPECT_NEAR(static_cast<double>(dropped) / total, 0.3, 0.05);
}

TEST(Dropout, RejectsInvalidRates) {
  EXPECT_THROW(DropoutSpec(DropoutStrategy::gaussian, 1.0).validate(), ConfigError);
  EXPECT_THROW(DropoutSpec(DropoutStrategy::block_wise, -0.1).validate(), ConfigError);
  EXPECT_NO_THROW(DropoutSpec(DropoutStrategy::block_wise, 1.0).validate());
  EXPECT_THROW(parse_dropout_strategy("channel"), ConfigError);
}

TEST(Dropout, SupportGradientIsSeedDeterministic) {
  const NetConfig cfg = tiny_config();
  std::mt19937_64 rng(28);
  const ModelWeights w = random_weights(cfg, 28);
  const LabeledSet s = random_set(cfg.input, 2, 2, rng);
  const LabeledSet q = random_set(cfg.input, 2, 2, rng);
  const DropoutSpec d{DropoutStrategy::gaussian, 0.2};
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(grad_support(w, s, 2, PoisonMask{{0}}, q, d, a).grads,
            grad_support(w, s, 2, PoisonMask{{0}}, q, d, b).grads);
}

TEST(Training, ZeroEpisodesLeavesWeights) {
  SyntheticSpec spec;
  spec.classes = 6;
  spec.instances_per_class = 20;
  spec.shape = {1, 8, 8};
  const Dataset ds = generate_synthetic_dataset(spec);
  const ModelWeights w = init_weights(tiny_config(), 1);
  TrainConfig tc;
  tc.episodes = 0;
  EXPECT_EQ(meta_train(w, ds, tc).tensors[0].values, w.tensors[0].values);
}

TEST(Training, DeterministicAndReducesLoss) {
  SyntheticSpec spec;
  spec.classes = 10;
  spec.instances_per_class = 30;
  spec.shape = {1, 8, 8};
  const Dataset ds = generate_synthetic_dataset(spec);
  const ModelWeights w0 = init_weights(tiny_config(), 2);
  TrainConfig tc;
  tc.episodes = 150;
  tc.queries = 5;
  tc.seed = 3;
  const ModelWeights a = meta_train(w0, ds, tc);
  const ModelWeights b = meta_train(w0, ds, tc);
  for (std::size_t t = 0; t < a.tensors.size(); ++t) EXPECT_EQ(a.tensors[t].values, b.tensors[t].values);

  std::mt19937_64 rng(99);
  double before = 0.0, after = 0.0;
  for (int i = 0; i < 30; ++i) {
    const Task t = sample_task(ds, EpisodeShape{5, 5, 5, 0}, rng);
    before += run_episode(w0, t.support, t.way, t.seed_query).loss;
    after += run_episode(a, t.support, t.way, t.seed_query).loss;
  }
  EXPECT_LT(after, before);
}

TEST(Checkpoint, RoundTripPreservesFloat32Values) {
  const ModelWeights w = random_weights(tiny_config(), 29);
  const std::string bytes = encode_checkpoint(w);
  BinaryReader r(bytes, "mem");
  const ModelWeights back = decode_checkpoint(r);
  EXPECT_EQ(back.config, w.config);
  for (std::size_t t = 0; t < w.tensors.size(); ++t) {
    EXPECT_EQ(back.tensors[t].name, w.tensors[t].name);
    for (std::size_t i = 0; i < w.tensors[t].values.size(); ++i)
      ASSERT_EQ(back.tensors[t].values[i], static_cast<double>(static_cast<float>(w.tensors[t].values[i])));
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(checkpoint_id(back), checkpoint_id(w));
}

TEST(Checkpoint, FilmFreeRoundTrip) {
  const ModelWeights w = random_weights(tiny_config(false), 30);
  const std::string bytes = encode_checkpoint(w);
  BinaryReader r(bytes, "mem");
  EXPECT_FALSE(decode_checkpoint(r).config.film);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const std::string good = encode_checkpoint(random_weights(tiny_config(), 31));
  auto kind = [](const std::string& bytes) {
    BinaryReader r(bytes, "mem");
    try {
      decode_checkpoint(r);
    } catch (const DataError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "decode succeeded";
    return DataErrorKind::io;
  };
  std::string magic = good;
  magic[1] = 'X';
  EXPECT_EQ(kind(magic), DataErrorKind::bad_magic);
  std::string version = good;
  version[4] = 9;
  EXPECT_EQ(kind(version), DataErrorKind::unsupported_version);
  EXPECT_EQ(kind(good.substr(0, good.size() - 3)), DataErrorKind::truncated);
  EXPECT_EQ(kind(good + "z"), DataErrorKind::dimension_mismatch);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.fsck"), DataError);
}
