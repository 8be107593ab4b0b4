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
#pragma once

// Probabilistic recurrent graph autoencoder.
//
// Per time step t, with recurrent state H_t (H_0 = 0):
//   prior      (mu_p, s_p) = prior_net(H_t)
//   posterior  (mu_q, s_q) = encoder([phi_x(X_t), H_t], A_t)   two attention layers
//   sample     Z_t = mu_q + s_q * eps
//   decode     A_hat_t = sigmoid([Z_t, H_t][Z_t, H_t]^T)
//   recurrence H_{t+1} = spatial_gru([phi_x(X_t), phi_z(Z_t)], H_t, A_t)
// and the loss is sum_t BCE(A_t, A_hat_t) + KL(posterior || prior).

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dsvb/classifier.hpp"
#include "dsvb/dynconn.hpp"
#include "dsvb/layers.hpp"

namespace dsvb {

enum class EdgeFeatureMode { off, correlation_scalar };
enum class BceMode { full, positive_only };

struct ModelConfig {
  std::size_t latent_dim = 16;
  std::size_t gru_dim = 16;
  std::size_t encoder_hidden_dim = 32;
  std::size_t feature_x_dim = 64;
  std::size_t feature_z_dim = 8;
  std::size_t classifier_hidden_dim = 32;
  std::size_t num_classes = 2;
  std::size_t particles = 1;
  EdgeFeatureMode edge_feature_mode = EdgeFeatureMode::correlation_scalar;
  BceMode bce_mode = BceMode::full;

  void validate() const {
    const auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(latent_dim, "latent_dim");
    positive(gru_dim, "gru_dim");
    positive(encoder_hidden_dim, "encoder_hidden_dim");
    positive(feature_x_dim, "feature_x_dim");
    positive(feature_z_dim, "feature_z_dim");
    positive(classifier_hidden_dim, "classifier_hidden_dim");
    positive(particles, "particles");
    if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  }

  std::size_t readout_dim(std::size_t num_nodes) const { return num_nodes * (latent_dim + gru_dim); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Attention message passing

/// Weights of one attention layer mapping D_in -> D_out. `root` is W1,
/// `value` W2, `query` W3, `key` W4 and `edge` W5 (edge features are scalar,
/// so W5 is a single row).
struct AttentionWeights {
  Var root;
  Var root_bias;
  Var value;
  Var query;
  Var key;
  Var edge;

  static AttentionWeights init(std::size_t in, std::size_t out, Rng& rng) {
    AttentionWeights w;
    w.root = Var::parameter(glorot_uniform(in, out, rng));
    w.root_bias = Var::parameter(Tensor(1, out));
    w.value = Var::parameter(glorot_uniform(in, out, rng));
    w.query = Var::parameter(glorot_uniform(in, out, rng));
    w.key = Var::parameter(glorot_uniform(in, out, rng));
    w.edge = Var::parameter(glorot_uniform(1, out, rng));
    return w;
  }

  std::size_t out_dim() const noexcept { return root.cols(); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.push_back({prefix + ".root", root});
    out.push_back({prefix + ".root_bias", root_bias});
    out.push_back({prefix + ".value", value});
    out.push_back({prefix + ".query", query});
    out.push_back({prefix + ".key", key});
    out.push_back({prefix + ".edge", edge});
  }
};

/// Topology of one graph as seen by the attention layers.
struct GraphContext {
  Tensor adjacency;                 // neighbor mask
  std::optional<Var> edge_weights;  // scalar edge feature h_ij, or none

  static GraphContext from_sequence(const DynamicGraphSequence& seq, std::size_t t,
                                    EdgeFeatureMode mode) {
    GraphContext g{seq.adjacency.at(t), std::nullopt};
    if (mode == EdgeFeatureMode::correlation_scalar) g.edge_weights = Var::constant(seq.weights.at(t));
    return g;
  }
};

/// h_i' = W1 h_i + b + sum_{j in N(i)} a_ij (W2 h_j + W5 e_ij), with
/// a_i. = softmax_j((W3 h_i)^T (W4 h_j + W5 e_ij) / sqrt(D_out)) over N(i).
/// A node without neighbors keeps only its self term.
inline Var attention_layer(const Var& h, const GraphContext& g, const AttentionWeights& w) {
  const std::size_t n = h.rows();
  if (g.adjacency.rows() != n || g.adjacency.cols() != n) {
    throw DimensionError("attention_layer: adjacency " + g.adjacency.shape_str() + " for " +
                         std::to_string(n) + " nodes");
  }
  if (h.cols() != w.root.rows()) {
    throw DimensionError("attention_layer: input width " + std::to_string(h.cols()) +
                         " but weights expect " + std::to_string(w.root.rows()));
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(w.out_dim()));
  Var q = matmul(h, w.query);
  Var k = matmul(h, w.key);
  Var v = matmul(h, w.value);
  Var scores = matmul_nt(q, k);
  if (g.edge_weights) {
    // q_i . (W5 e_ij) = e_ij * (q_i . W5)
    scores = add(scores, mul(*g.edge_weights, matmul_nt(q, w.edge)));
  }
  Var alpha = masked_row_softmax(scale(scores, inv_scale), g.adjacency, true);
  Var out = add(add(matmul(h, w.root), w.root_bias), matmul(alpha, v));
  if (g.edge_weights) out = add(out, matmul(row_sum(mul(alpha, *g.edge_weights)), w.edge));
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

struct ModelParams {
  std::size_t num_nodes = 0;
  Dense feature_x;  // phi_x: N -> feature_x_dim
  Dense feature_z;  // phi_z: latent_dim -> feature_z_dim
  Dense prior;      // gru_dim -> 2 * latent_dim
  AttentionWeights encoder1;
  AttentionWeights encoder2;
  AttentionWeights gru_xz, gru_hz, gru_xr, gru_hr, gru_xh, gru_hh;
  ClassifierParams classifier;

  static ModelParams init(const ModelConfig& cfg, std::size_t num_nodes, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams p;
    p.num_nodes = num_nodes;
    p.feature_x = Dense::init(num_nodes, cfg.feature_x_dim, rng);
    p.feature_z = Dense::init(cfg.latent_dim, cfg.feature_z_dim, rng);
    p.prior = Dense::init(cfg.gru_dim, 2 * cfg.latent_dim, rng);
    const std::size_t enc_in = cfg.feature_x_dim + cfg.gru_dim;
    p.encoder1 = AttentionWeights::init(enc_in, cfg.encoder_hidden_dim, rng);
    p.encoder2 = AttentionWeights::init(cfg.encoder_hidden_dim, 2 * cfg.latent_dim, rng);
    const std::size_t x_in = cfg.feature_x_dim + cfg.feature_z_dim;
    p.gru_xz = AttentionWeights::init(x_in, cfg.gru_dim, rng);
    p.gru_hz = AttentionWeights::init(cfg.gru_dim, cfg.gru_dim, rng);
    p.gru_xr = AttentionWeights::init(x_in, cfg.gru_dim, rng);
    p.gru_hr = AttentionWeights::init(cfg.gru_dim, cfg.gru_dim, rng);
    p.gru_xh = AttentionWeights::init(x_in, cfg.gru_dim, rng);
    p.gru_hh = AttentionWeights::init(cfg.gru_dim, cfg.gru_dim, rng);
    p.classifier = ClassifierParams::init(cfg.readout_dim(num_nodes), cfg.classifier_hidden_dim,
                                          cfg.num_classes, rng);
    return p;
  }

  /// Generative and inference networks (theta, vartheta).
  NamedParams encoder_side() const {
    NamedParams out;
    feature_x.collect("feature_x", out);
    feature_z.collect("feature_z", out);
    prior.collect("prior", out);
    encoder1.collect("encoder1", out);
    encoder2.collect("encoder2", out);
    gru_xz.collect("gru_xz", out);
    gru_hz.collect("gru_hz", out);
    gru_xr.collect("gru_xr", out);
    gru_hr.collect("gru_hr", out);
    gru_xh.collect("gru_xh", out);
    gru_hh.collect("gru_hh", out);
    return out;
  }

  /// Classifier (tau).
  NamedParams classifier_side() const {
    NamedParams out;
    classifier.collect("classifier", out);
    return out;
  }

  NamedParams named() const {
    NamedParams out = encoder_side();
    for (auto& p : classifier_side()) out.push_back(std::move(p));
    return out;
  }

  void zero_grad() const {
    for (const auto& p : named()) p.var.zero_grad();
  }

  /// Deep copy with fresh parameter nodes.
  ModelParams clone() const {
    ModelParams c = *this;
    auto src = named();
    auto dst = c.mutable_refs();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Var::parameter(src[i].var.value());
    return c;
  }

  std::vector<Var*> mutable_refs() {
    std::vector<Var*> out;
    const auto dense = [&](Dense& d) {
      out.push_back(&d.weight);
      out.push_back(&d.bias);
    };
    const auto att = [&](AttentionWeights& w) {
      for (Var* v : {&w.root, &w.root_bias, &w.value, &w.query, &w.key, &w.edge}) out.push_back(v);
    };
    dense(feature_x);
    dense(feature_z);
    dense(prior);
    att(encoder1);
    att(encoder2);
    for (auto* w : {&gru_xz, &gru_hz, &gru_xr, &gru_hr, &gru_xh, &gru_hh}) att(*w);
    dense(classifier.hidden);
    dense(classifier.output);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Building blocks

struct GaussianParams {
  Var mu;
  Var sigma;  // strictly positive
};

/// Affine map of each node's state, identity on the mean half and softplus on
/// the standard-deviation half.
inline GaussianParams prior_net(const Var& h, const Dense& prior, std::size_t latent_dim) {
  Var raw = prior(h);
  return {slice_cols(raw, 0, latent_dim), softplus(slice_cols(raw, latent_dim, 2 * latent_dim))};
}

inline Var feature_x_net(const Var& x, const Dense& net) { return tanh(net(x)); }
inline Var feature_z_net(const Var& z, const Dense& net) { return tanh(net(z)); }

/// Two attention layers over [phi_x(X_t), H_t]; the output splits into mean
/// and softplus standard deviation.
inline GaussianParams encode(const Var& x_features, const Var& h, const GraphContext& g,
                             const ModelParams& p, std::size_t latent_dim) {
  Var h0 = concat_cols({x_features, h});
  Var h1 = tanh(attention_layer(h0, g, p.encoder1));
  Var h2 = attention_layer(h1, g, p.encoder2);
  return {slice_cols(h2, 0, latent_dim), softplus(slice_cols(h2, latent_dim, 2 * latent_dim))};
}

/// GRU whose six affine maps are single attention layers over A_{t-1}.
inline Var spatial_gru(const Var& x_in, const Var& h_prev, const GraphContext& g, const ModelParams& p) {
  Var update = sigmoid(add(attention_layer(x_in, g, p.gru_xz), attention_layer(h_prev, g, p.gru_hz)));
  Var reset = sigmoid(add(attention_layer(x_in, g, p.gru_xr), attention_layer(h_prev, g, p.gru_hr)));
  Var candidate = tanh(add(attention_layer(x_in, g, p.gru_xh),
                           attention_layer(mul(reset, h_prev), g, p.gru_hh)));
  return add(mul(update, h_prev), mul(one_minus(update), candidate));
}

/// z = mu + sigma * eps with eps supplied by the caller.
inline Var reparameterize(const GaussianParams& g, const Tensor& eps) {
  if (!eps.same_shape(g.mu.value())) {
    throw DimensionError("reparameterize: noise " + eps.shape_str() + " for mean " +
                         g.mu.value().shape_str());
  }
  return add(g.mu, mul(g.sigma, Var::constant(eps)));
}

inline Tensor standard_normal(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t(rows, cols);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

/// z = mu + sigma * eps, eps ~ N(0, I) drawn from a generator seeded with `noise_seed`.
inline Var reparameterize(const GaussianParams& g, std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  return reparameterize(g, standard_normal(g.mu.rows(), g.mu.cols(), rng));
}

/// Edge logits [Z, H][Z, H]^T.
inline Var decoder_logits(const Var& z, const Var& h) {
  Var zh = concat_cols({z, h});
  return matmul_nt(zh, zh);
}

inline Var decode_adjacency(const Var& z, const Var& h) { return sigmoid(decoder_logits(z, h)); }

/// Reconstruction BCE as a positive loss. `full` sums over every ordered
/// off-diagonal pair; `positive_only` over pairs with a_ij = 1.
inline Var bce_loss(const Tensor& a_true, const Var& z, const Var& h, BceMode mode) {
  const std::size_t n = a_true.rows();
  Tensor weight(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) weight(i, j) = mode == BceMode::full ? 1.0 : a_true(i, j);
  return bce_with_logits(decoder_logits(z, h), a_true, weight);
}

inline Var kld_loss(const GaussianParams& posterior, const GaussianParams& prior) {
  return gaussian_kl(posterior.mu, posterior.sigma, prior.mu, prior.sigma);
}

// ---------------------------------------------------------------------------
// Noise

/// Supplies the standard-normal draws used by reparameterization. Draws are
/// requested in (step, particle) order.
class NoiseSource {
 public:
  virtual ~NoiseSource() = default;
  virtual Tensor draw(std::size_t step, std::size_t particle, std::size_t rows, std::size_t cols) = 0;
};

class SeededNoise final : public NoiseSource {
 public:
  explicit SeededNoise(std::uint64_t seed) : rng_(seed) {}
  Tensor draw(std::size_t, std::size_t, std::size_t rows, std::size_t cols) override {
    return standard_normal(rows, cols, rng_);
  }

 private:
  Rng rng_;
};

/// eps = 0: the latent path follows the posterior means.
class ZeroNoise final : public NoiseSource {
 public:
  Tensor draw(std::size_t, std::size_t, std::size_t rows, std::size_t cols) override {
    return Tensor(rows, cols);
  }
};

/// Replays a fixed list indexed [step][particle].
class FixedNoise final : public NoiseSource {
 public:
  explicit FixedNoise(std::vector<std::vector<Tensor>> draws) : draws_(std::move(draws)) {}
  Tensor draw(std::size_t step, std::size_t particle, std::size_t rows, std::size_t cols) override {
    const Tensor& t = draws_.at(step).at(particle);
    if (t.rows() != rows || t.cols() != cols) throw DimensionError("FixedNoise: shape mismatch");
    return t;
  }

 private:
  std::vector<std::vector<Tensor>> draws_;
};

// ---------------------------------------------------------------------------
// Rollout

struct StepTrace {
  GaussianParams prior;
  GaussianParams posterior;
  Var z;
  Var h;  // H_t used at this step
};

struct RolloutResult {
  // particles[k][t]
  std::vector<std::vector<StepTrace>> particles;
  Var bce;  // particle-averaged, summed over t
  Var kld;

  std::size_t steps() const { return particles.empty() ? 0 : particles.front().size(); }

  /// Posterior mean at step t averaged over particles.
  Var posterior_mean(std::size_t t) const {
    std::vector<Var> mus;
    for (const auto& p : particles) mus.push_back(p.at(t).posterior.mu);
    return mean_of(mus);
  }

  std::vector<Var> final_states() const {
    std::vector<Var> hs;
    for (const auto& p : particles) hs.push_back(p.back().h);
    return hs;
  }
};

inline RolloutResult rollout(const DynamicGraphSequence& seq, const ModelParams& p,
                             const ModelConfig& cfg, NoiseSource& noise) {
  const std::size_t n = seq.num_nodes();
  if (n != p.num_nodes || seq.feature_dim() != p.feature_x.weight.rows()) {
    throw DimensionError("rollout: sequence '" + seq.subject_id + "' has " + std::to_string(n) +
                         " nodes but parameters were built for " + std::to_string(p.num_nodes));
  }
  const std::size_t steps = seq.length();
  if (steps == 0) throw InputError("rollout: empty sequence '" + seq.subject_id + "'");

  std::vector<GraphContext> graphs;
  std::vector<Var> x_features;
  graphs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    graphs.push_back(GraphContext::from_sequence(seq, t, cfg.edge_feature_mode));
    x_features.push_back(feature_x_net(Var::constant(seq.features[t]), p.feature_x));
  }

  RolloutResult out;
  out.particles.resize(cfg.particles);
  std::vector<Var> h(cfg.particles, Var::constant(Tensor(n, cfg.gru_dim)));
  std::vector<Var> bce_terms, kld_terms;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t k = 0; k < cfg.particles; ++k) {
      StepTrace step;
      step.h = h[k];
      step.prior = prior_net(h[k], p.prior, cfg.latent_dim);
      step.posterior = encode(x_features[t], h[k], graphs[t], p, cfg.latent_dim);
      step.z = reparameterize(step.posterior, noise.draw(t, k, n, cfg.latent_dim));
      bce_terms.push_back(bce_loss(seq.adjacency[t], step.z, h[k], cfg.bce_mode));
      kld_terms.push_back(kld_loss(step.posterior, step.prior));
      if (t + 1 < steps) {
        Var x_in = concat_cols({x_features[t], feature_z_net(step.z, p.feature_z)});
        h[k] = spatial_gru(x_in, h[k], graphs[t], p);
      }
      out.particles[k].push_back(std::move(step));
    }
  }
  const double inv_m = 1.0 / static_cast<double>(cfg.particles);
  Var bce_total = bce_terms.front();
  for (std::size_t i = 1; i < bce_terms.size(); ++i) bce_total = add(bce_total, bce_terms[i]);
  Var kld_total = kld_terms.front();
  for (std::size_t i = 1; i < kld_terms.size(); ++i) kld_total = add(kld_total, kld_terms[i]);
  out.bce = cfg.particles == 1 ? bce_total : scale(bce_total, inv_m);
  out.kld = cfg.particles == 1 ? kld_total : scale(kld_total, inv_m);
  return out;
}

}  // namespace dsvb
