/* Copyright 2026 The DSVB Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dsvb/model.hpp"
#include "test_support.hpp"

namespace dsvb {
namespace {

using testing::finite_difference_check;
using testing::random_tensor;
using testing::small_config;
using testing::toy_sequence;

// Loop-level attention oracle. Rows are nodes.
Tensor naive_attention(const Tensor& h, const Tensor& adj, const Tensor* edge, const AttentionWeights& w) {
  const Tensor &w1 = w.root.value(), &b = w.root_bias.value(), &w2 = w.value.value(), &w3 = w.query.value(),
               &w4 = w.key.value(), &w5 = w.edge.value();
  const std::size_t n = h.rows(), din = h.cols(), dout = w1.cols();
  auto project = [&](const Tensor& m, std::size_t i) {
    std::vector<double> r(dout, 0.0);
    for (std::size_t c = 0; c < dout; ++c)
      for (std::size_t k = 0; k < din; ++k) r[c] += h(i, k) * m(k, c);
    return r;
  };
  Tensor out(n, dout);
  for (std::size_t i = 0; i < n; ++i) {
    const auto self = project(w1, i);
    const auto q = project(w3, i);
    std::vector<std::size_t> nb;
    std::vector<double> score;
    for (std::size_t j = 0; j < n; ++j) {
      if (adj(i, j) == 0.0) continue;
      const double e = edge ? (*edge)(i, j) : 0.0;
      const auto kj = project(w4, j);
      double s = 0.0;
      for (std::size_t c = 0; c < dout; ++c) s += q[c] * (kj[c] + e * w5(0, c));
      nb.push_back(j);
      score.push_back(s / std::sqrt(static_cast<double>(dout)));
    }
    double z = 0.0;
    for (double s : score) z += std::exp(s);
    for (std::size_t c = 0; c < dout; ++c) out(i, c) = self[c] + b(0, c);
    for (std::size_t m = 0; m < nb.size(); ++m) {
      const double alpha = std::exp(score[m]) / z;
      const double e = edge ? (*edge)(i, nb[m]) : 0.0;
      const auto vj = project(w2, nb[m]);
      for (std::size_t c = 0; c < dout; ++c) out(i, c) += alpha * (vj[c] + e * w5(0, c));
    }
  }
  return out;
}

AttentionWeights scalar_attention(double w1, double b, double w2, double w3, double w4, double w5) {
  auto s = [](double v) { return Var::parameter(Tensor::scalar(v)); };
  return {s(w1), s(b), s(w2), s(w3), s(w4), s(w5)};
}

Tensor path3() {
  return Tensor::from_rows({{0, 1, 0}, {1, 0, 1}, {0, 1, 0}});
}

TEST(Attention, SingleNeighborTakesFullWeight) {
  std::mt19937_64 rng(1);
  Rng r(1);
  auto w = AttentionWeights::init(3, 2, r);
  const Tensor h = random_tensor(2, 3, rng);
  const Tensor adj = Tensor::from_rows({{0, 1}, {1, 0}});
  const Tensor out = attention_layer(Var::constant(h), GraphContext{adj, std::nullopt}, w).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double expect = w.root_bias.value()(0, c);
    for (std::size_t k = 0; k < 3; ++k) expect += h(0, k) * w.root.value()(k, c) + h(1, k) * w.value.value()(k, c);
    EXPECT_NEAR(out(0, c), expect, 1e-14);
  }
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
  // Zero key weights make every score 0.
  std::mt19937_64 rng(2);
  Rng r(2);
  auto w = AttentionWeights::init(2, 2, r);
  w.key.mutable_value().fill(0.0);
  const Tensor h = random_tensor(4, 2, rng);
  Tensor adj(4, 4, 1.0);
  for (std::size_t i = 0; i < 4; ++i) adj(i, i) = 0.0;
  const Tensor out = attention_layer(Var::constant(h), GraphContext{adj, std::nullopt}, w).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double expect = w.root_bias.value()(0, c);
    for (std::size_t k = 0; k < 2; ++k) {
      expect += h(0, k) * w.root.value()(k, c);
      for (std::size_t j = 1; j < 4; ++j) expect += h(j, k) * w.value.value()(k, c) / 3.0;
    }
    EXPECT_NEAR(out(0, c), expect, 1e-14);
  }
}

TEST(Attention, PathGraphHandEvaluation) {
  const Var h = Var::constant(Tensor::from_rows({{1}, {2}, {3}}));
  const Tensor out = attention_layer(h, GraphContext{path3(), std::nullopt},
                                     scalar_attention(0.5, 0.0, 1.0, 1.0, 1.0, 0.0)).value();
  // Node 1 scores: 2*1 and 2*3.
  const double a2 = std::exp(6.0) / (std::exp(2.0) + std::exp(6.0));
  EXPECT_NEAR(out(0, 0), 2.5, 1e-15);
  EXPECT_NEAR(out(1, 0), 1.0 + (1.0 - a2) * 1.0 + a2 * 3.0, 1e-15);
  EXPECT_NEAR(out(2, 0), 3.5, 1e-15);
}

TEST(Attention, PathGraphWithEdgeFeatures) {
  Tensor e(3, 3);
  e(0, 1) = e(1, 0) = 0.2;
  e(1, 2) = e(2, 1) = -0.4;
  const Var h = Var::constant(Tensor::from_rows({{1}, {2}, {3}}));
  const Tensor out = attention_layer(h, GraphContext{path3(), Var::constant(e)},
                                     scalar_attention(0.5, 0.1, 1.0, 1.0, 1.0, 0.5)).value();
  // Keys and values gain 0.5 * e_ij: node 1 sees 1.1 and 2.8.
  const double a0 = std::exp(2.2) / (std::exp(2.2) + std::exp(5.6));
  EXPECT_NEAR(out(0, 0), 0.5 + 0.1 + 2.1, 1e-14);
  EXPECT_NEAR(out(1, 0), 1.0 + 0.1 + a0 * 1.1 + (1.0 - a0) * 2.8, 1e-14);
  EXPECT_NEAR(out(2, 0), 1.5 + 0.1 + 1.8, 1e-14);
}

TEST(Attention, MatchesLoopOracleOnRandomGraphs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Rng r(trial);
    auto w = AttentionWeights::init(4, 3, r);
    auto seq = toy_sequence(6, 1, 100 + trial, 0, 0.4);
    const Tensor h = random_tensor(6, 4, rng);
    for (bool with_edges : {false, true}) {
      GraphContext g{seq.adjacency[0], std::nullopt};
      if (with_edges) g.edge_weights = Var::constant(seq.weights[0]);
      const Tensor got = attention_layer(Var::constant(h), g, w).value();
      const Tensor want = naive_attention(h, seq.adjacency[0], with_edges ? &seq.weights[0] : nullptr, w);
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(Attention, IsolatedNodeKeepsOnlySelfTerm) {
  std::mt19937_64 rng(4);
  Rng r(4);
  auto w = AttentionWeights::init(3, 2, r);
  const Tensor h = random_tensor(3, 3, rng);
  Tensor adj = Tensor::from_rows({{0, 1, 0}, {1, 0, 0}, {0, 0, 0}});
  const Tensor out = attention_layer(Var::constant(h), GraphContext{adj, Var::constant(Tensor(3, 3, 0.7))}, w).value();
  for (std::size_t c = 0; c < 2; ++c) {
    double expect = w.root_bias.value()(0, c);
    for (std::size_t k = 0; k < 3; ++k) expect += h(2, k) * w.root.value()(k, c);
    EXPECT_EQ(out(2, c), expect);
  }
}

TEST(Attention, ShapeMismatchThrows) {
  Rng r(5);
  auto w = AttentionWeights::init(3, 2, r);
  EXPECT_THROW(attention_layer(Var::constant(Tensor(4, 3)), GraphContext{Tensor(3, 3), std::nullopt}, w),
               DimensionError);
  EXPECT_THROW(attention_layer(Var::constant(Tensor(3, 4)), GraphContext{Tensor(3, 3), std::nullopt}, w),
               DimensionError);
}

TEST(Prior, ZeroInputsGiveLn2) {
  Dense d{Var::parameter(Tensor(3, 4)), Var::parameter(Tensor(1, 4))};
  const auto g = prior_net(Var::constant(Tensor(5, 3)), d, 2);
  for (double v : g.mu.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : g.sigma.value().values()) EXPECT_NEAR(v, std::log(2.0), 1e-15);
}

TEST(Prior, PerNodeMapCommutesWithPermutation) {
  std::mt19937_64 rng(6);
  Rng r(6);
  Dense d = Dense::init(3, 4, r);
  const Tensor h = random_tensor(4, 3, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor hp(4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) hp(i, c) = h(perm[i], c);
  const auto a = prior_net(Var::constant(h), d, 2), b = prior_net(Var::constant(hp), d, 2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      EXPECT_EQ(b.mu.value()(i, c), a.mu.value()(perm[i], c));
      EXPECT_EQ(b.sigma.value()(i, c), a.sigma.value()(perm[i], c));
    }
}

TEST(Prior, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Rng r(7);
  Dense d = Dense::init(3, 4, r);
  const Var h = Var::constant(random_tensor(4, 3, rng));
  const Var w = Var::constant(random_tensor(4, 2, rng));
  auto f = [&] {
    auto g = prior_net(h, d, 2);
    return sum(add(mul(g.mu, w), mul(g.sigma, g.sigma)));
  };
  backward(f());
  auto res = finite_difference_check({{"w", d.weight}, {"b", d.bias}}, [&] { return f().item(); });
  EXPECT_LT(res.max_rel, 1e-6) << res.worst;
}

TEST(Encoder, NoEdgesReducesToSelfTerms) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 8);
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor(4, cfg.feature_x_dim, rng), h = random_tensor(4, cfg.gru_dim, rng);
  const auto g = encode(Var::constant(x), Var::constant(h), GraphContext{Tensor(4, 4), std::nullopt}, p,
                        cfg.latent_dim);
  const Tensor in = concat_cols({Var::constant(x), Var::constant(h)}).value();
  auto affine = [](const Tensor& a, const AttentionWeights& w) {
    return add(matmul(Var::constant(a), w.root), w.root_bias).value();
  };
  Tensor h1 = affine(in, p.encoder1);
  for (auto& v : h1.values()) v = std::tanh(v);
  const Tensor h2 = affine(h1, p.encoder2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
      EXPECT_NEAR(g.mu.value()(i, c), h2(i, c), 1e-14);
      EXPECT_NEAR(g.sigma.value()(i, c), std::log1p(std::exp(h2(i, cfg.latent_dim + c))), 1e-14);
    }
}

TEST(Encoder, MatchesTwoLayerOracleComposition) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 9);
  auto seq = toy_sequence(4, 1, 9);
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor(4, cfg.feature_x_dim, rng), h = random_tensor(4, cfg.gru_dim, rng);
  const auto g = encode(Var::constant(x), Var::constant(h),
                        GraphContext::from_sequence(seq, 0, EdgeFeatureMode::correlation_scalar), p, cfg.latent_dim);
  const Tensor in = concat_cols({Var::constant(x), Var::constant(h)}).value();
  Tensor h1 = naive_attention(in, seq.adjacency[0], &seq.weights[0], p.encoder1);
  for (auto& v : h1.values()) v = std::tanh(v);
  const Tensor h2 = naive_attention(h1, seq.adjacency[0], &seq.weights[0], p.encoder2);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
      EXPECT_NEAR(g.mu.value()(i, c), h2(i, c), 1e-12);
      EXPECT_NEAR(g.sigma.value()(i, c), std::log1p(std::exp(h2(i, cfg.latent_dim + c))), 1e-12);
    }
}

TEST(Encoder, SigmaStrictlyPositive) {
  auto cfg = small_config();
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto p = ModelParams::init(cfg, 5, s);
    std::mt19937_64 rng(s);
    auto seq = toy_sequence(5, 1, s);
    const auto g = encode(Var::constant(random_tensor(5, cfg.feature_x_dim, rng, -5, 5)),
                          Var::constant(random_tensor(5, cfg.gru_dim, rng, -5, 5)),
                          GraphContext::from_sequence(seq, 0, cfg.edge_feature_mode), p, cfg.latent_dim);
    for (double v : g.sigma.value().values()) EXPECT_GT(v, 0.0);
  }
}

// Fills the six GRU maps with fixed gate biases and zero everything else.
void silence_gru(ModelParams& p) {
  for (auto* w : {&p.gru_xz, &p.gru_hz, &p.gru_xr, &p.gru_hr, &p.gru_xh, &p.gru_hh})
    for (Var* v : {&w->root, &w->root_bias, &w->value, &w->query, &w->key, &w->edge}) v->mutable_value().fill(0.0);
}

TEST(SpatialGru, SaturatedUpdateGateKeepsState) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 10);
  auto seq = toy_sequence(4, 1, 10);
  std::mt19937_64 rng(10);
  const Var x = Var::constant(random_tensor(4, cfg.feature_x_dim + cfg.feature_z_dim, rng));
  const Var h = Var::constant(random_tensor(4, cfg.gru_dim, rng, -1, 1));
  const auto g = GraphContext::from_sequence(seq, 0, cfg.edge_feature_mode);
  p.gru_xz.root_bias.mutable_value().fill(50.0);
  const Tensor keep = spatial_gru(x, h, g, p).value();
  for (std::size_t i = 0; i < keep.size(); ++i) EXPECT_NEAR(keep[i], h.value()[i], 1e-15);

  p.gru_xz.root_bias.mutable_value().fill(-50.0);
  const Tensor over = spatial_gru(x, h, g, p).value();
  const Var reset = sigmoid(add(attention_layer(x, g, p.gru_xr), attention_layer(h, g, p.gru_hr)));
  const Tensor cand =
      tanh(add(attention_layer(x, g, p.gru_xh), attention_layer(mul(reset, h), g, p.gru_hh))).value();
  for (std::size_t i = 0; i < over.size(); ++i) EXPECT_NEAR(over[i], cand[i], 1e-15);
}

TEST(SpatialGru, TwoNodeHandEvaluation) {
  ModelConfig cfg = small_config();
  cfg.gru_dim = 1;
  cfg.feature_x_dim = 1;
  cfg.feature_z_dim = 1;
  auto p = ModelParams::init(cfg, 2, 11);
  silence_gru(p);
  // With one neighbor each, every map is root * own + value * other + bias.
  auto set = [](AttentionWeights& w, std::vector<double> root, std::vector<double> value, double bias) {
    for (std::size_t k = 0; k < root.size(); ++k) {
      w.root.mutable_value()(k, 0) = root[k];
      w.value.mutable_value()(k, 0) = value[k];
    }
    w.root_bias.mutable_value()(0, 0) = bias;
  };
  set(p.gru_xz, {0.3, -0.2}, {0.1, 0.4}, 0.05);
  set(p.gru_hz, {0.7}, {-0.3}, 0.0);
  set(p.gru_xr, {-0.5, 0.2}, {0.6, 0.1}, -0.1);
  set(p.gru_hr, {0.2}, {0.9}, 0.0);
  set(p.gru_xh, {1.1, -0.4}, {0.2, 0.3}, 0.2);
  set(p.gru_hh, {-0.8}, {0.5}, 0.0);
  const Tensor x = Tensor::from_rows({{0.5, -1.0}, {1.5, 0.25}});
  const Tensor h = Tensor::from_rows({{0.4}, {-0.6}});
  const Tensor adj = Tensor::from_rows({{0, 1}, {1, 0}});
  const Tensor out = spatial_gru(Var::constant(x), Var::constant(h), GraphContext{adj, std::nullopt}, p).value();

  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t j = 1 - i;
    const double xi0 = x(i, 0), xi1 = x(i, 1), xj0 = x(j, 0), xj1 = x(j, 1), hi = h(i, 0), hj = h(j, 0);
    const double s = sig(0.3 * xi0 - 0.2 * xi1 + 0.1 * xj0 + 0.4 * xj1 + 0.05 + 0.7 * hi - 0.3 * hj);
    const double ri = sig(-0.5 * xi0 + 0.2 * xi1 + 0.6 * xj0 + 0.1 * xj1 - 0.1 + 0.2 * hi + 0.9 * hj);
    const double rj = sig(-0.5 * xj0 + 0.2 * xj1 + 0.6 * xi0 + 0.1 * xi1 - 0.1 + 0.2 * hj + 0.9 * hi);
    const double cand = std::tanh(1.1 * xi0 - 0.4 * xi1 + 0.2 * xj0 + 0.3 * xj1 + 0.2 - 0.8 * ri * hi + 0.5 * rj * hj);
    EXPECT_NEAR(out(i, 0), s * hi + (1.0 - s) * cand, 1e-14);
  }
}

TEST(Reparameterize, VanishingSigmaReturnsMean) {
  GaussianParams g{Var::constant(Tensor::from_rows({{1.5, -2.0}})), Var::constant(Tensor(1, 2, 1e-30))};
  const Tensor z = reparameterize(g, std::uint64_t{3}).value();
  EXPECT_NEAR(z[0], 1.5, 1e-20);
  EXPECT_NEAR(z[1], -2.0, 1e-20);
}

TEST(Reparameterize, SeededDrawsRepeat) {
  GaussianParams g{Var::constant(Tensor(3, 2, 0.1)), Var::constant(Tensor(3, 2, 2.0))};
  EXPECT_EQ(reparameterize(g, std::uint64_t{17}).value(), reparameterize(g, std::uint64_t{17}).value());
  EXPECT_NE(reparameterize(g, std::uint64_t{17}).value(), reparameterize(g, std::uint64_t{18}).value());
}

TEST(Reparameterize, SampleMomentsMatch) {
  const double mu[2] = {0.7, -3.0}, sd[2] = {0.5, 2.0};
  GaussianParams g{Var::constant(Tensor::from_rows({{mu[0], mu[1]}})),
                   Var::constant(Tensor::from_rows({{sd[0], sd[1]}}))};
  constexpr int kDraws = 100000;
  double s[2] = {0, 0}, ss[2] = {0, 0};
  for (int d = 0; d < kDraws; ++d) {
    const Tensor z = reparameterize(g, static_cast<std::uint64_t>(d)).value();
    for (int c = 0; c < 2; ++c) {
      s[c] += z[c];
      ss[c] += z[c] * z[c];
    }
  }
  for (int c = 0; c < 2; ++c) {
    const double mean = s[c] / kDraws, var = ss[c] / kDraws - mean * mean;
    EXPECT_LT(std::abs(mean - mu[c]), 5.0 * sd[c] / std::sqrt(double(kDraws)));
    EXPECT_LT(std::abs(var / (sd[c] * sd[c]) - 1.0), 0.05);
  }
}

TEST(Reparameterize, GradientFlowsToMeanAndScale) {
  Var m = Var::parameter(Tensor::from_rows({{0.2, 0.4}}));
  Var s = Var::parameter(Tensor::from_rows({{1.0, 3.0}}));
  const Tensor eps = Tensor::from_rows({{0.5, -1.5}});
  backward(sum(reparameterize(GaussianParams{m, s}, eps)));
  EXPECT_EQ(m.grad()[0], 1.0);
  EXPECT_EQ(s.grad()[0], 0.5);
  EXPECT_EQ(s.grad()[1], -1.5);
}

TEST(Decoder, ZeroEmbeddingsGiveHalf) {
  const Tensor a = decode_adjacency(Var::constant(Tensor(3, 2)), Var::constant(Tensor(3, 1))).value();
  for (double v : a.values()) EXPECT_EQ(v, 0.5);
}

TEST(Decoder, UnitInnerProduct) {
  const Tensor a =
      decode_adjacency(Var::constant(Tensor::from_rows({{1, 0}, {1, 0}})), Var::constant(Tensor(2, 1))).value();
  EXPECT_NEAR(a(0, 1), 0.7310585786300049, 1e-12);
}

TEST(Decoder, SymmetricAndOpenInterval) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = decode_adjacency(Var::constant(random_tensor(6, 3, rng)), Var::constant(random_tensor(6, 2, rng)))
                         .value();
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_EQ(a(i, j), a(j, i));
        EXPECT_GT(a(i, j), 0.0);
        EXPECT_LT(a(i, j), 1.0);
      }
  }
}

TEST(Bce, ZeroEmbeddingsGiveLn2PerEntry) {
  auto seq = toy_sequence(3, 1, 13);
  const double full = bce_loss(seq.adjacency[0], Var::constant(Tensor(3, 2)), Var::constant(Tensor(3, 2)),
                               BceMode::full).item();
  EXPECT_NEAR(full, 6.0 * std::log(2.0), 1e-14);
}

TEST(Bce, SaturatedPerfectReconstruction) {
  const double r = std::sqrt(50.0);
  const Var h = Var::constant(Tensor(2, 1));
  const double edge = bce_loss(Tensor::from_rows({{0, 1}, {1, 0}}), Var::constant(Tensor::from_rows({{r}, {r}})), h,
                               BceMode::full).item();
  const double none = bce_loss(Tensor::from_rows({{0, 0}, {0, 0}}), Var::constant(Tensor::from_rows({{r}, {-r}})), h,
                               BceMode::full).item();
  EXPECT_LT(edge / 2.0, 1e-20);
  EXPECT_LT(none / 2.0, 1e-20);
}

TEST(Bce, MatchesNaiveOracle) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    auto seq = toy_sequence(3, 1, 200 + trial);
    const Tensor z = random_tensor(3, 2, rng), h = random_tensor(3, 2, rng);
    Tensor logits(3, 3), full(3, 3), pos(3, 3);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t c = 0; c < 2; ++c) logits(i, j) += z(i, c) * z(j, c) + h(i, c) * h(j, c);
        full(i, j) = i == j ? 0.0 : 1.0;
        pos(i, j) = i == j ? 0.0 : seq.adjacency[0](i, j);
      }
    const Tensor& a = seq.adjacency[0];
    EXPECT_NEAR(bce_loss(a, Var::constant(z), Var::constant(h), BceMode::full).item(), testing::naive_bce(logits, a, full),
                1e-12);
    EXPECT_NEAR(bce_loss(a, Var::constant(z), Var::constant(h), BceMode::positive_only).item(),
                testing::naive_bce(logits, a, pos), 1e-12);
  }
}

TEST(Kld, HandValues) {
  auto g = [](double m, double s) {
    return GaussianParams{Var::constant(Tensor::scalar(m)), Var::constant(Tensor::scalar(s))};
  };
  EXPECT_EQ(kld_loss(g(0.3, 1.7), g(0.3, 1.7)).item(), 0.0);
  EXPECT_NEAR(kld_loss(g(1, 1), g(0, 1)).item(), 0.5, 1e-15);
  EXPECT_NEAR(kld_loss(g(0, 2), g(0, 1)).item(), (4.0 - std::log(4.0) - 1.0) / 2.0, 1e-15);
  EXPECT_NEAR(kld_loss(g(0, 2), g(0, 1)).item(), 0.8068528194400547, 1e-12);
}

TEST(Kld, NonNegativeAndMatchesOracle) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor mq = random_tensor(3, 2, rng), mp = random_tensor(3, 2, rng);
    const Tensor sq = random_tensor(3, 2, rng, 0.05, 3.0), sp = random_tensor(3, 2, rng, 0.05, 3.0);
    const double k = kld_loss({Var::constant(mq), Var::constant(sq)}, {Var::constant(mp), Var::constant(sp)}).item();
    EXPECT_GE(k, -1e-9);
    EXPECT_NEAR(k, testing::naive_kl(mq, sq, mp, sp), 1e-10 * std::max(1.0, k));
  }
}

TEST(Rollout, SingleGraphHasOneTermEach) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 5, 16);
  auto seq = toy_sequence(5, 1, 16);
  ZeroNoise zero;
  const auto r = rollout(seq, p, cfg, zero);
  ASSERT_EQ(r.steps(), 1u);
  const Var h0 = Var::constant(Tensor(5, cfg.gru_dim));
  const auto prior = prior_net(h0, p.prior, cfg.latent_dim);
  const auto g = GraphContext::from_sequence(seq, 0, cfg.edge_feature_mode);
  const auto post = encode(feature_x_net(Var::constant(seq.features[0]), p.feature_x), h0, g, p, cfg.latent_dim);
  EXPECT_EQ(r.kld.item(), kld_loss(post, prior).item());
  EXPECT_EQ(r.bce.item(), bce_loss(seq.adjacency[0], post.mu, h0, cfg.bce_mode).item());
  EXPECT_EQ(r.particles[0][0].prior.mu.value(), prior.mu.value());
}

TEST(Rollout, FiniteAndReproducible) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 6, 17);
  auto seq = toy_sequence(6, 4, 17);
  SeededNoise n1(5), n2(5);
  const auto a = rollout(seq, p, cfg, n1), b = rollout(seq, p, cfg, n2);
  EXPECT_TRUE(std::isfinite(a.bce.item()));
  EXPECT_TRUE(std::isfinite(a.kld.item()));
  EXPECT_EQ(a.bce.item(), b.bce.item());
  EXPECT_EQ(a.kld.item(), b.kld.item());
  EXPECT_EQ(a.final_states()[0].value(), b.final_states()[0].value());
}

TEST(Rollout, StateRecursionUsesPreviousStep) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 18);
  auto seq = toy_sequence(4, 3, 18);
  ZeroNoise zero;
  const auto r = rollout(seq, p, cfg, zero);
  for (std::size_t t = 1; t < 3; ++t) {
    const auto& prev = r.particles[0][t - 1];
    const Var x_in = concat_cols({feature_x_net(Var::constant(seq.features[t - 1]), p.feature_x),
                                  feature_z_net(prev.z, p.feature_z)});
    const Tensor h = spatial_gru(x_in, prev.h, GraphContext::from_sequence(seq, t - 1, cfg.edge_feature_mode), p).value();
    EXPECT_EQ(r.particles[0][t].h.value(), h);
  }
}

TEST(Rollout, IdenticalParticlesAverageToSingle) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 19);
  auto seq = toy_sequence(4, 3, 19);
  std::mt19937_64 rng(19);
  std::vector<std::vector<Tensor>> one, two;
  for (int t = 0; t < 3; ++t) {
    Tensor e = random_tensor(4, cfg.latent_dim, rng);
    one.push_back({e});
    two.push_back({e, e});
  }
  FixedNoise f1(one), f2(two);
  const auto a = rollout(seq, p, cfg, f1);
  cfg.particles = 2;
  const auto b = rollout(seq, p, cfg, f2);
  EXPECT_NEAR(a.bce.item(), b.bce.item(), 1e-12 * a.bce.item());
  EXPECT_NEAR(a.kld.item(), b.kld.item(), 1e-12 * a.kld.item());
}

TEST(Rollout, NodeCountMismatchIsDimensionError) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 20);
  ZeroNoise zero;
  EXPECT_THROW(rollout(toy_sequence(5, 2, 20), p, cfg, zero), DimensionError);
}

TEST(Rollout, FullGradientMatchesFiniteDifferences) {
  auto cfg = small_config();
  auto p = ModelParams::init(cfg, 4, 21);
  auto seq = toy_sequence(4, 3, 21);
  std::mt19937_64 rng(21);
  std::vector<std::vector<Tensor>> draws;
  for (int t = 0; t < 3; ++t) draws.push_back({random_tensor(4, cfg.latent_dim, rng, -1, 1)});
  auto loss = [&] {
    FixedNoise noise(draws);
    auto r = rollout(seq, p, cfg, noise);
    return add(r.bce, r.kld);
  };
  p.zero_grad();
  backward(loss());
  auto res = finite_difference_check(testing::as_pairs(p.encoder_side()), [&] { return loss().item(); }, 1e-5, 1e-6);
  EXPECT_LT(res.max_rel, 1e-4) << res.worst << " over " << res.checked;
  // The classifier does not take part in the reconstruction objective.
  for (const auto& np : p.classifier_side())
    for (double g : np.var.grad().values()) EXPECT_EQ(g, 0.0);
}

TEST(Rollout, NodePermutationEquivariance) {
  auto cfg = small_config();
  const std::size_t n = 5;
  auto p = ModelParams::init(cfg, n, 22);
  auto seq = toy_sequence(n, 3, 22);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};  // new row i = old row perm[i]
  DynamicGraphSequence ps = seq;
  std::mt19937_64 rng(22);
  std::vector<std::vector<Tensor>> draws, pdraws;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        ps.adjacency[t](i, j) = seq.adjacency[t](perm[i], perm[j]);
        ps.weights[t](i, j) = seq.weights[t](perm[i], perm[j]);
        ps.features[t](i, j) = seq.features[t](perm[i], j);  // feature columns are not node-indexed here
      }
    Tensor e = random_tensor(n, cfg.latent_dim, rng), pe(n, cfg.latent_dim);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cfg.latent_dim; ++c) pe(i, c) = e(perm[i], c);
    draws.push_back({e});
    pdraws.push_back({pe});
  }
  FixedNoise f(draws), pf(pdraws);
  const auto a = rollout(seq, p, cfg, f), b = rollout(ps, p, cfg, pf);
  for (std::size_t t = 0; t < seq.length(); ++t) {
    const auto &sa = a.particles[0][t], &sb = b.particles[0][t];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
        EXPECT_NEAR(sb.posterior.mu.value()(i, c), sa.posterior.mu.value()(perm[i], c), 1e-12);
        EXPECT_NEAR(sb.posterior.sigma.value()(i, c), sa.posterior.sigma.value()(perm[i], c), 1e-12);
      }
      for (std::size_t c = 0; c < cfg.gru_dim; ++c)
        EXPECT_NEAR(sb.h.value()(i, c), sa.h.value()(perm[i], c), 1e-12);
    }
  }
  EXPECT_NEAR(a.bce.item(), b.bce.item(), 1e-10);
  EXPECT_NEAR(a.kld.item(), b.kld.item(), 1e-10);
}

TEST(ModelParams, CloneIsDeep) {
  auto p = ModelParams::init(small_config(), 4, 23);
  auto c = p.clone();
  c.prior.weight.mutable_value()[0] += 1.0;
  EXPECT_NE(c.prior.weight.value()[0], p.prior.weight.value()[0]);
  EXPECT_EQ(c.named().size(), p.named().size());
}

TEST(ModelParams, InitIsSeeded) {
  auto a = ModelParams::init(small_config(), 4, 24), b = ModelParams::init(small_config(), 4, 24);
  const auto na = a.named(), nb = b.named();
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_EQ(na[i].var.value(), nb[i].var.value()) << na[i].name;
}

}  // namespace
}  // namespace dsvb
