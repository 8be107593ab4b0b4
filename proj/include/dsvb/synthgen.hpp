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

// Labeled synthetic dynamic graphs with planted community structure and
// Markov state switching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "dsvb/dynconn.hpp"
#include "dsvb/errors.hpp"
#include "dsvb/random.hpp"
#include "dsvb/tensor.hpp"

namespace dsvb {

struct SynthSpec {
  std::size_t n_nodes = 30;
  std::size_t n_subjects_per_class = 20;
  std::size_t n_classes = 2;
  std::size_t steps = 8;  // T; each subject gets T+1 graphs
  std::size_t k_true = 3;
  // One K x K row-stochastic matrix per class. Empty selects the defaults
  // from `default_transition`.
  std::vector<Tensor> transitions;
  double noise_std = 0.05;
  double keep_fraction = 0.40;
  double within_block = 0.7;
  double cross_block = 0.2;
  std::size_t samples_per_step = 20;  // time-series export only
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 1) throw InputError("synth: n_classes must be >= 1");
    if (k_true < 1) throw InputError("synth: k_true must be >= 1");
    if (n_subjects_per_class < 1) throw InputError("synth: n_subjects_per_class must be >= 1");
    if (steps < 1) throw InputError("synth: steps must be >= 1");
    if (n_nodes < 2) throw InputError("synth: n_nodes must be >= 2");
    if (n_nodes / n_classes < k_true + 1) {
      throw InputError("synth: each class support needs at least k_true + 1 = " + std::to_string(k_true + 1) +
                       " nodes, got " + std::to_string(n_nodes / n_classes));
    }
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw InputError("synth: noise_std must be >= 0");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw InputError("synth: keep_fraction outside (0, 1]");
    if (std::abs(within_block) > 1.0 || std::abs(cross_block) > 1.0) {
      throw InputError("synth: block values must lie in [-1, 1]");
    }
    if (within_block == cross_block) throw InputError("synth: within_block must differ from cross_block");
    if (samples_per_step < 2) throw InputError("synth: samples_per_step must be >= 2");
    if (!transitions.empty()) {
      if (transitions.size() != n_classes) {
        throw InputError("synth: expected " + std::to_string(n_classes) + " transition matrices, got " +
                         std::to_string(transitions.size()));
      }
      for (std::size_t c = 0; c < transitions.size(); ++c) {
        const Tensor& p = transitions[c];
        if (p.rows() != k_true || p.cols() != k_true) {
          throw InputError("synth: transition matrix " + std::to_string(c) + " must be " +
                           Tensor::shape_string(k_true, k_true));
        }
        for (std::size_t i = 0; i < k_true; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < k_true; ++j) {
            if (!(p(i, j) >= 0.0)) throw InputError("synth: negative transition probability");
            s += p(i, j);
          }
          if (std::abs(s - 1.0) > 1e-9) {
            throw InputError("synth: transition matrix " + std::to_string(c) + " row " + std::to_string(i) +
                             " sums to " + std::to_string(s));
          }
        }
      }
    }
  }

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

/// Class c stays in its current state with probability 0.8 - 0.2c (floored
/// at 0.2) and otherwise moves uniformly to another state.
inline Tensor default_transition(std::size_t cls, std::size_t k) {
  if (k == 1) return Tensor::identity(1);
  const double stay = std::max(0.2, 0.8 - 0.2 * static_cast<double>(cls));
  Tensor p(k, k, (1.0 - stay) / static_cast<double>(k - 1));
  for (std::size_t i = 0; i < k; ++i) p(i, i) = stay;
  return p;
}

inline Tensor transition_for(const SynthSpec& spec, std::size_t cls) {
  return spec.transitions.empty() ? default_transition(cls, spec.k_true) : spec.transitions[cls];
}

/// Nodes [begin, end) carrying class `cls`'s community structure. With one
/// class the support is every node.
inline std::pair<std::size_t, std::size_t> class_support(const SynthSpec& spec, std::size_t cls) {
  const std::size_t width = spec.n_nodes / spec.n_classes;
  return {cls * width, (cls + 1) * width};
}

/// Block-constant template for (class, state): the support is cut into
/// 2 + state contiguous blocks.
inline Tensor state_template(const SynthSpec& spec, std::size_t cls, std::size_t state) {
  const auto [begin, end] = class_support(spec, cls);
  const std::size_t size = end - begin, blocks = 2 + state;
  const auto block_of = [&](std::size_t node) { return (node - begin) * blocks / size; };
  Tensor t = Tensor::identity(spec.n_nodes);
  for (std::size_t i = begin; i < end; ++i)
    for (std::size_t j = begin; j < end; ++j)
      if (i != j) t(i, j) = block_of(i) == block_of(j) ? spec.within_block : spec.cross_block;
  return t;
}

struct SynthSubject {
  DynamicGraphSequence sequence;
  std::vector<std::size_t> states;  // length T+1
};

struct SynthDataset {
  std::vector<SynthSubject> subjects;

  std::vector<DynamicGraphSequence> sequences() const {
    std::vector<DynamicGraphSequence> out;
    out.reserve(subjects.size());
    for (const auto& s : subjects) out.push_back(s.sequence);
    return out;
  }
};

inline std::size_t sample_row(const Tensor& p, std::size_t row, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double r = u(rng);
  double acc = 0.0;
  for (std::size_t j = 0; j < p.cols(); ++j) {
    acc += p(row, j);
    if (r < acc) return j;
  }
  // Rounding can leave r just above the last cumulative sum.
  for (std::size_t j = p.cols(); j-- > 0;)
    if (p(row, j) > 0.0) return j;
  return p.cols() - 1;
}

/// State path of length `length`; the first state is uniform.
inline std::vector<std::size_t> sample_state_path(const Tensor& transition, std::size_t length, Rng& rng) {
  std::vector<std::size_t> path;
  path.reserve(length);
  std::uniform_int_distribution<std::size_t> first(0, transition.rows() - 1);
  path.push_back(first(rng));
  while (path.size() < length) path.push_back(sample_row(transition, path.back(), rng));
  return path;
}

inline std::string synth_subject_id(std::size_t cls, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%zu_s%03zu", cls, index);
  return buf;
}

inline SynthDataset generate(const SynthSpec& spec) {
  spec.validate();
  std::vector<std::vector<Tensor>> templates(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t k = 0; k < spec.k_true; ++k) templates[c].push_back(state_template(spec, c, k));

  SynthDataset out;
  const std::size_t n = spec.n_nodes;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    const Tensor transition = transition_for(spec, c);
    for (std::size_t s = 0; s < spec.n_subjects_per_class; ++s) {
      Rng rng(derive_seed(spec.seed, {c, s}));
      std::normal_distribution<double> noise(0.0, 1.0);
      SynthSubject subject;
      subject.states = sample_state_path(transition, spec.steps + 1, rng);
      DynamicGraphSequence& seq = subject.sequence;
      seq.subject_id = synth_subject_id(c, s);
      seq.label = c;
      for (std::size_t state : subject.states) {
        Tensor w = templates[c][state];
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j) {
            const double e = spec.noise_std > 0.0 ? spec.noise_std * noise(rng) : 0.0;
            const double v = std::clamp(w(i, j) + e, -1.0, 1.0);
            w(i, j) = w(j, i) = v;
          }
        Tensor adj = proportional_threshold(w, spec.keep_fraction);
        seq.features.push_back(w);
        seq.adjacency.push_back(std::move(adj));
        seq.weights.push_back(std::move(w));
      }
      out.subjects.push_back(std::move(subject));
    }
  }
  return out;
}

/// Lower Cholesky factor. A small ridge is added if `m` is only
/// semi-definite.
inline Tensor cholesky(const Tensor& m) {
  const std::size_t n = m.rows();
  for (double ridge : {0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2}) {
    Tensor l(n, n);
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j) {
      double d = m(j, j) + ridge;
      for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
      if (!(d > 0.0)) {
        ok = false;
        break;
      }
      l(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = m(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
        l(i, j) = s / l(j, j);
      }
    }
    if (ok) return l;
  }
  throw NumericalError("cholesky: matrix is not positive semi-definite");
}

/// ROI time series whose consecutive `samples_per_step` blocks are drawn
/// from N(0, template of the planted state). Graph construction with
/// window length = stride = samples_per_step yields one window per step.
inline std::vector<RoiTimeSeries> generate_time_series(const SynthSpec& spec, const SynthDataset& data) {
  spec.validate();
  std::vector<std::vector<Tensor>> factors(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t k = 0; k < spec.k_true; ++k) factors[c].push_back(cholesky(state_template(spec, c, k)));

  std::vector<RoiTimeSeries> out;
  const std::size_t n = spec.n_nodes, len = spec.samples_per_step;
  for (std::size_t idx = 0; idx < data.subjects.size(); ++idx) {
    const SynthSubject& s = data.subjects[idx];
    Rng rng(derive_seed(spec.seed, {0x7473ULL, idx}));
    std::normal_distribution<double> normal(0.0, 1.0);
    RoiTimeSeries ts{s.sequence.subject_id, Tensor(n, len * s.states.size()), s.sequence.label};
    std::vector<double> g(n);
    for (std::size_t t = 0; t < s.states.size(); ++t) {
      const Tensor& l = factors[s.sequence.label][s.states[t]];
      for (std::size_t k = 0; k < len; ++k) {
        for (double& v : g) v = normal(rng);
        for (std::size_t i = 0; i < n; ++i) {
          double v = spec.noise_std * normal(rng);
          for (std::size_t j = 0; j <= i; ++j) v += l(i, j) * g[j];
          ts.data(i, t * len + k) = v;
        }
      }
    }
    out.push_back(std::move(ts));
  }
  return out;
}

}  // namespace dsvb
