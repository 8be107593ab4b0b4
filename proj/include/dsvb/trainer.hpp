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

// Joint training of the recurrent graph autoencoder and the classifier.
//
// The classifier descends on the full loss. The autoencoder descends on
// BCE + KLD; its share of the CE gradient passes through a gradient-scaling
// node placed on the readout, with coefficient -lambda (adversarial) or +1
// when lambda = 0 (plain joint minimization).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dsvb/model.hpp"

namespace dsvb {

enum class AdversarialMode {
  reversal,  // negate and scale only the CE path into the autoencoder
  literal,   // autoencoder ascends the full joint loss, scaled by lambda
};

struct TrainConfig {
  double learning_rate = 1e-5;
  std::size_t epochs = 400;
  double l2_weight = 0.01;
  // Linear decay from learning_rate at epoch 1 to this fraction at the last epoch.
  double lr_final_fraction = 0.1;
  double adversarial_lambda = 1.0;
  AdversarialMode adversarial_mode = AdversarialMode::reversal;
  std::size_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (!(l2_weight >= 0.0)) throw ConfigError("train.l2_weight must be >= 0");
    if (!(lr_final_fraction > 0.0 && lr_final_fraction <= 1.0)) {
      throw ConfigError("train.lr_final_fraction must lie in (0, 1]");
    }
    if (!(adversarial_lambda >= 0.0)) throw ConfigError("train.adversarial_lambda must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("train: Adam betas must lie in [0, 1)");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LossBreakdown {
  double bce = 0.0;
  double kld = 0.0;
  double ce = 0.0;
  double l2 = 0.0;     // reported separately, not part of `total`
  double total = 0.0;  // bce + kld + ce

  double objective() const { return total + l2; }

  LossBreakdown& operator+=(const LossBreakdown& o) {
    bce += o.bce;
    kld += o.kld;
    ce += o.ce;
    l2 += o.l2;
    total += o.total;
    return *this;
  }
  LossBreakdown scaled(double s) const { return {bce * s, kld * s, ce * s, l2 * s, total * s}; }
};

inline double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.epochs <= 1) return cfg.learning_rate;
  const double progress = static_cast<double>(std::min(epoch, cfg.epochs) - 1) /
                          static_cast<double>(cfg.epochs - 1);
  return cfg.learning_rate * (1.0 - (1.0 - cfg.lr_final_fraction) * progress);
}

/// Gradient multiplier applied to the CE path into the autoencoder.
inline double ce_encoder_coefficient(const TrainConfig& cfg) {
  if (cfg.adversarial_lambda == 0.0 || cfg.adversarial_mode != AdversarialMode::reversal) return 1.0;
  return -cfg.adversarial_lambda;
}

inline double l2_penalty(const ModelParams& p, double weight) {
  double s = 0.0;
  for (const auto& np : p.named())
    for (double v : np.var.value().values()) s += v * v;
  return 0.5 * weight * s;
}

/// Differentiable joint forward pass for one subject.
struct JointForward {
  RolloutResult rollout;
  Var readout;
  Var logits;
  Var ce;
  Var total;  // bce + kld + ce
  LossBreakdown losses;
  Prediction prediction;
};

inline JointForward joint_forward(const DynamicGraphSequence& seq, const ModelParams& p,
                                  const ModelConfig& cfg, NoiseSource& noise,
                                  double ce_encoder_coeff = 1.0) {
  JointForward f;
  f.rollout = rollout(seq, p, cfg, noise);
  f.readout = readout(f.rollout.posterior_mean(f.rollout.steps() - 1), f.rollout.final_states());
  Var classifier_input = ce_encoder_coeff == 1.0 ? f.readout : gradient_scale(f.readout, ce_encoder_coeff);
  f.logits = classifier_logits(classifier_input, p.classifier);
  f.ce = ce_loss(f.logits, seq.label);
  f.total = add(add(f.rollout.bce, f.rollout.kld), f.ce);
  f.losses.bce = f.rollout.bce.item();
  f.losses.kld = f.rollout.kld.item();
  f.losses.ce = f.ce.item();
  f.losses.total = f.total.item();
  f.prediction = make_prediction(f.logits.value());
  return f;
}

/// Loss components for one subject with seeded reparameterization noise.
inline LossBreakdown joint_loss(const DynamicGraphSequence& seq, const ModelParams& p,
                                const ModelConfig& cfg, std::uint64_t noise_seed, double l2_weight = 0.0) {
  SeededNoise noise(noise_seed);
  LossBreakdown l = joint_forward(seq, p, cfg, noise).losses;
  l.l2 = l2_penalty(p, l2_weight);
  return l;
}

/// Deterministic prediction along the posterior-mean path (eps = 0).
struct SubjectOutput {
  Prediction prediction;
  Tensor readout;
};

inline SubjectOutput predict(const DynamicGraphSequence& seq, const ModelParams& p, const ModelConfig& cfg) {
  ZeroNoise noise;
  JointForward f = joint_forward(seq, p, cfg, noise);
  return {f.prediction, f.readout.value()};
}

// ---------------------------------------------------------------------------
// Optimization

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;

  static OptimizerState init(const ModelParams& p) {
    OptimizerState s;
    for (const auto& np : p.named()) {
      s.first_moment.emplace_back(np.var.rows(), np.var.cols());
      s.second_moment.emplace_back(np.var.rows(), np.var.cols());
    }
    return s;
  }
};

inline std::uint64_t subject_noise_seed(std::uint64_t seed, std::size_t epoch, std::size_t subject) {
  return derive_seed(seed, {0x6e6f697365ULL, epoch, subject});
}

/// Zeroes gradients, then accumulates the batch-mean gradient of the joint
/// loss with the adversarial routing from `cfg`. Returns batch-mean losses
/// evaluated before any update. `noise_seeds[i]` seeds subject i.
inline LossBreakdown accumulate_gradients(std::span<const DynamicGraphSequence* const> batch,
                                          std::span<const std::uint64_t> noise_seeds,
                                          const ModelParams& p, const ModelConfig& mcfg,
                                          const TrainConfig& tcfg) {
  if (batch.empty()) throw ContractError("accumulate_gradients: empty batch");
  p.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool literal = tcfg.adversarial_mode == AdversarialMode::literal && tcfg.adversarial_lambda != 0.0;
  const NamedParams enc = p.encoder_side();
  std::vector<Tensor> enc_before;
  LossBreakdown mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SeededNoise noise(noise_seeds[i]);
    JointForward f = joint_forward(*batch[i], p, mcfg, noise, ce_encoder_coefficient(tcfg));
    if (literal) {
      enc_before.clear();
      for (const auto& np : enc) enc_before.push_back(np.var.grad());
    }
    backward(scale(f.total, inv_b));
    if (literal) {
      // Autoencoder ascends this subject's full loss.
      for (std::size_t k = 0; k < enc.size(); ++k) {
        Tensor& g = enc[k].var.mutable_grad();
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double delta = g[j] - enc_before[k][j];
          g[j] = enc_before[k][j] - tcfg.adversarial_lambda * delta;
        }
      }
    }
    mean += f.losses.scaled(inv_b);
  }
  mean.l2 = l2_penalty(p, tcfg.l2_weight);
  return mean;
}

/// Adam update with L2 weight decay folded into the gradient.
inline void apply_adam(ModelParams& p, OptimizerState& opt, const TrainConfig& cfg, double lr) {
  auto refs = p.mutable_refs();
  const NamedParams names = p.named();
  if (opt.first_moment.size() != refs.size()) throw ContractError("apply_adam: optimizer state mismatch");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const Var& v = *refs[k];
    if (!v.has_grad()) continue;
    for (double g : v.grad().values()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + names[k].name + "'");
    }
  }
  ++opt.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < refs.size(); ++k) {
    Var& v = *refs[k];
    Tensor& w = v.mutable_value();
    const Tensor& g = v.mutable_grad();
    Tensor& m = opt.first_moment[k];
    Tensor& s = opt.second_moment[k];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = g[j] + cfg.l2_weight * w[j];
      m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * grad;
      s[j] = cfg.adam_beta2 * s[j] + (1.0 - cfg.adam_beta2) * grad * grad;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(s[j] / bc2) + cfg.adam_epsilon);
    }
  }
}

/// One optimizer step on a batch: tau descends on the joint loss, (theta,
/// vartheta) descend on BCE + KLD with the CE path routed per `tcfg`.
inline LossBreakdown adversarial_step(std::span<const DynamicGraphSequence* const> batch,
                                      std::span<const std::uint64_t> noise_seeds, ModelParams& p,
                                      OptimizerState& opt, const ModelConfig& mcfg,
                                      const TrainConfig& tcfg, double lr) {
  LossBreakdown l = accumulate_gradients(batch, noise_seeds, p, mcfg, tcfg);
  if (!std::isfinite(l.objective())) throw NumericalError("non-finite training loss");
  apply_adam(p, opt, tcfg, lr);
  return l;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown losses;
};

struct TrainResult {
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&, const ModelParams&, const OptimizerState&)>;

/// Runs epochs [first_epoch, cfg.epochs] (1-based). Losses per epoch are the
/// subject-weighted mean over batches.
inline TrainResult train(const std::vector<DynamicGraphSequence>& dataset, ModelParams& p,
                         OptimizerState& opt, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         std::size_t first_epoch = 1, const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw InputError("train: empty dataset");
  for (const auto& s : dataset) {
    if (s.num_nodes() != p.num_nodes) {
      throw InputError("train: subject '" + s.subject_id + "' has " + std::to_string(s.num_nodes()) +
                       " nodes, expected " + std::to_string(p.num_nodes));
    }
  }
  const std::size_t n = dataset.size();
  const std::size_t bs = tcfg.batch_size == 0 ? n : std::min(tcfg.batch_size, n);
  TrainResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = first_epoch; epoch <= tcfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (bs < n) {
      Rng rng(derive_seed(tcfg.seed, {0x62617463ULL, epoch}));
      std::shuffle(order.begin(), order.end(), rng);
    }
    const double lr = learning_rate_at(tcfg, epoch);
    EpochRecord rec{epoch, lr, {}};
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<const DynamicGraphSequence*> batch;
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&dataset[order[i]]);
        seeds.push_back(subject_noise_seed(tcfg.seed, epoch, order[i]));
      }
      LossBreakdown l = adversarial_step(batch, seeds, p, opt, mcfg, tcfg, lr);
      rec.losses += l.scaled(static_cast<double>(end - start) / static_cast<double>(n));
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec, p, opt);
  }
  return result;
}

}  // namespace dsvb
