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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dsvb/layers.hpp"

namespace dsvb {

/// Two-layer FCNN: readout -> hidden (tanh) -> class logits.
struct ClassifierParams {
  Dense hidden;
  Dense output;

  static ClassifierParams init(std::size_t input_dim, std::size_t hidden_dim, std::size_t classes,
                               Rng& rng) {
    ClassifierParams p;
    p.hidden = Dense::init(input_dim, hidden_dim, rng);
    p.output = Dense::init(hidden_dim, classes, rng);
    return p;
  }

  std::size_t input_dim() const noexcept { return hidden.weight.rows(); }

  void collect(const std::string& prefix, NamedParams& out) const {
    hidden.collect(prefix + ".hidden", out);
    output.collect(prefix + ".output", out);
  }
};

struct Prediction {
  Tensor logits;  // [1 x C]
  std::vector<double> probabilities;
  std::size_t predicted_class = 0;

  double positive_probability() const { return probabilities.size() > 1 ? probabilities[1] : 0.0; }
};

/// Row-concatenates the final posterior mean with the particle-mean recurrent
/// state and flattens row-major: node 0's [mu | h], then node 1's, ...
inline Var readout(const Var& final_posterior_mean, const std::vector<Var>& final_states) {
  if (final_states.empty()) throw ContractError("readout: no recurrent-state particles");
  Var h = mean_of(final_states);
  if (h.rows() != final_posterior_mean.rows()) {
    throw DimensionError("readout: " + final_posterior_mean.value().shape_str() + " vs " +
                         h.value().shape_str());
  }
  Var joined = concat_cols({final_posterior_mean, h});
  return reshape(joined, 1, joined.value().size());
}

inline Var classifier_logits(const Var& readout_row, const ClassifierParams& p) {
  if (readout_row.cols() != p.input_dim() || readout_row.rows() != 1) {
    throw DimensionError("classify: readout " + readout_row.value().shape_str() +
                         " does not match classifier input " + std::to_string(p.input_dim()));
  }
  return p.output(tanh(p.hidden(readout_row)));
}

/// Softmax and argmax of a logit row; ties go to the lower index.
inline Prediction make_prediction(const Tensor& logits) {
  Prediction pred;
  pred.logits = logits;
  double mx = logits[0];
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > mx) {
      mx = logits[j];
      pred.predicted_class = j;
    }
  }
  double z = 0.0;
  pred.probabilities.resize(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    pred.probabilities[j] = std::exp(logits[j] - mx);
    z += pred.probabilities[j];
  }
  for (auto& p : pred.probabilities) p /= z;
  return pred;
}

inline Prediction classify(const Var& readout_row, const ClassifierParams& p) {
  return make_prediction(classifier_logits(readout_row, p).value());
}

/// Positive multi-class cross entropy against a class index.
inline Var ce_loss(const Var& logits, std::size_t label) { return softmax_cross_entropy(logits, label); }

}  // namespace dsvb
