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

// Sliding-window dynamic connectivity: ROI time series -> sequence of
// thresholded graphs with per-node connection-weight features.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dsvb/errors.hpp"
#include "dsvb/tensor.hpp"

namespace dsvb {

struct RoiTimeSeries {
  std::string subject_id;
  Tensor data;  // rows = ROIs, cols = time points
  std::size_t label = 0;

  std::size_t num_rois() const noexcept { return data.rows(); }
  std::size_t num_timepoints() const noexcept { return data.cols(); }

  void validate() const {
    for (std::size_t i = 0; i < data.rows(); ++i)
      for (std::size_t t = 0; t < data.cols(); ++t)
        if (!std::isfinite(data(i, t))) {
          throw InputError("subject '" + subject_id + "': non-finite value at ROI " +
                           std::to_string(i) + ", time " + std::to_string(t));
        }
  }
};

enum class FeatureSource {
  raw_correlation,  // node i's feature row = its pre-threshold correlation row
  thresholded,      // correlation row masked by the adjacency (diagonal kept)
};

struct WindowSpec {
  std::size_t length = 20;
  std::size_t stride = 10;
  double keep_fraction = 0.40;
  FeatureSource feature_source = FeatureSource::raw_correlation;

  void validate() const {
    if (length < 2) throw ConfigError("window length must be >= 2, got " + std::to_string(length));
    if (stride < 1) throw ConfigError("window stride must be >= 1");
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw ConfigError("keep_fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
    }
  }

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

/// Graphs G_0..G_T for one subject. All three lists have length T+1.
struct DynamicGraphSequence {
  std::string subject_id;
  std::size_t label = 0;
  std::vector<Tensor> adjacency;  // binary, symmetric, zero diagonal
  std::vector<Tensor> features;   // N x N
  std::vector<Tensor> weights;    // pre-threshold correlation, N x N

  std::size_t length() const noexcept { return adjacency.size(); }
  std::size_t num_nodes() const noexcept { return adjacency.empty() ? 0 : adjacency.front().rows(); }
  std::size_t feature_dim() const noexcept { return features.empty() ? 0 : features.front().cols(); }

  void validate() const {
    const std::string who = "sequence '" + subject_id + "'";
    if (adjacency.empty()) throw InputError(who + ": empty");
    if (features.size() != adjacency.size() || weights.size() != adjacency.size()) {
      throw InputError(who + ": adjacency/features/weights lengths differ");
    }
    const std::size_t n = num_nodes();
    for (std::size_t t = 0; t < adjacency.size(); ++t) {
      const Tensor& a = adjacency[t];
      if (a.rows() != n || a.cols() != n || weights[t].rows() != n || weights[t].cols() != n ||
          features[t].rows() != n || features[t].cols() != feature_dim()) {
        throw InputError(who + ": inconsistent shapes at step " + std::to_string(t));
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (a(i, i) != 0.0) throw InputError(who + ": self-loop at step " + std::to_string(t));
        for (std::size_t j = 0; j < n; ++j) {
          if (a(i, j) != 0.0 && a(i, j) != 1.0) {
            throw InputError(who + ": non-binary adjacency at step " + std::to_string(t));
          }
          if (a(i, j) != a(j, i)) {
            throw InputError(who + ": asymmetric adjacency at step " + std::to_string(t));
          }
        }
      }
    }
  }
};

inline std::size_t window_count(std::size_t total, const WindowSpec& spec) {
  if (total < spec.length) return 0;
  return (total - spec.length) / spec.stride + 1;
}

/// Windows start at 0, stride, 2*stride, ...; a trailing partial window is dropped.
inline std::vector<Tensor> segment_windows(const RoiTimeSeries& series, const WindowSpec& spec) {
  spec.validate();
  const std::size_t total = series.num_timepoints();
  if (total < spec.length) {
    throw InputError("subject '" + series.subject_id + "': " + std::to_string(total) +
                     " time points is shorter than one window of " + std::to_string(spec.length));
  }
  const std::size_t n = series.num_rois();
  const std::size_t count = window_count(total, spec);
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = w * spec.stride;
    Tensor block(n, spec.length);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < spec.length; ++t) block(i, t) = series.data(i, start + t);
    out.push_back(std::move(block));
  }
  return out;
}

struct ShrunkCorrelation {
  Tensor correlation;
  double shrinkage = 0.0;  // Ledoit-Wolf intensity in [0, 1]
};

/// Ledoit-Wolf shrinkage toward a scaled identity, then normalized to a
/// correlation matrix.
///
/// With samples x_k (the L columns of the block, centered per ROI),
/// S = (1/L) sum_k x_k x_k^T, m = tr(S)/N, d^2 = ||S - mI||^2 / N,
/// b^2 = min(d^2, (1/L^2) sum_k ||x_k x_k^T - S||^2 / N) and delta = b^2/d^2.
inline ShrunkCorrelation ledoit_wolf_correlation(const Tensor& block) {
  const std::size_t n = block.rows();
  const std::size_t len = block.cols();
  if (n == 0 || len < 2) throw InputError("ledoit_wolf_correlation: block needs >= 2 samples");

  Tensor x(n, len);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = block.row(i);
    const bool constant = std::all_of(row.begin(), row.end(), [&](double v) { return v == row[0]; });
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      x(i, t) = row[t] - mean;
      var += x(i, t) * x(i, t);
    }
    if (constant || var == 0.0) {
      throw DegenerateSignalError("ledoit_wolf_correlation: ROI " + std::to_string(i) +
                                  " has zero variance in this window");
    }
  }

  const double inv_len = 1.0 / static_cast<double>(len);
  Tensor s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < len; ++t) acc += x(i, t) * x(j, t);
      s(i, j) = s(j, i) = acc * inv_len;
    }

  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += s(i, i);
  const double mu = trace / static_cast<double>(n);

  double d2 = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double diff = s(i, j) - (i == j ? mu : 0.0);
      d2 += diff * diff;
    }
  d2 /= static_cast<double>(n);

  double b2bar = 0.0;
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double diff = x(i, t) * x(j, t) - s(i, j);
        b2bar += diff * diff;
      }
  b2bar /= static_cast<double>(n) * static_cast<double>(len) * static_cast<double>(len);

  const double b2 = std::min(b2bar, d2);
  const double delta = d2 > 0.0 ? std::clamp(b2 / d2, 0.0, 1.0) : 0.0;

  Tensor sigma(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      sigma(i, j) = (1.0 - delta) * s(i, j) + (i == j ? delta * mu : 0.0);

  ShrunkCorrelation out{Tensor(n, n), delta};
  for (std::size_t i = 0; i < n; ++i) {
    out.correlation(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = std::clamp(sigma(i, j) / std::sqrt(sigma(i, i) * sigma(j, j)), -1.0, 1.0);
      out.correlation(i, j) = out.correlation(j, i) = c;
    }
  }
  return out;
}

/// Number of undirected edges kept out of E = N(N-1)/2.
inline std::size_t kept_edge_count(std::size_t n, double keep_fraction) {
  const std::size_t e = n * (n - 1) / 2;
  // Slack absorbs products such as 0.4 * 435 = 174.00000000000003.
  const double k = std::ceil(keep_fraction * static_cast<double>(e) - 1e-9);
  return std::min(e, static_cast<std::size_t>(std::max(0.0, k)));
}

/// Keeps the ceil(keep_fraction * E) strongest pairs by |corr|. Ties are
/// resolved by smaller i, then smaller j.
inline Tensor proportional_threshold(const Tensor& corr, double keep_fraction) {
  const std::size_t n = corr.rows();
  if (corr.cols() != n) throw DimensionError("proportional_threshold: non-square " + corr.shape_str());
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ContractError("proportional_threshold: keep_fraction outside (0, 1]");
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(corr(i, j) - corr(j, i)) > 1e-12) {
        throw ContractError("proportional_threshold: input not symmetric at (" + std::to_string(i) +
                            "," + std::to_string(j) + ")");
      }

  struct Pair {
    double strength;
    std::size_t i, j;
  };
  std::vector<Pair> pairs;
  pairs.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) pairs.push_back({std::abs(corr(i, j)), i, j});
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.strength != b.strength) return a.strength > b.strength;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  Tensor adj(n, n);
  const std::size_t keep = kept_edge_count(n, keep_fraction);
  for (std::size_t k = 0; k < keep; ++k) adj(pairs[k].i, pairs[k].j) = adj(pairs[k].j, pairs[k].i) = 1.0;
  return adj;
}

inline Tensor node_features(const Tensor& weights, const Tensor& adjacency, FeatureSource source) {
  if (source == FeatureSource::raw_correlation) return weights;
  Tensor x(weights.rows(), weights.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      x(i, j) = (i == j || adjacency(i, j) != 0.0) ? weights(i, j) : 0.0;
  return x;
}

inline DynamicGraphSequence build_sequence(const RoiTimeSeries& series, const WindowSpec& spec) {
  series.validate();
  DynamicGraphSequence seq;
  seq.subject_id = series.subject_id;
  seq.label = series.label;
  for (const Tensor& block : segment_windows(series, spec)) {
    ShrunkCorrelation lw;
    try {
      lw = ledoit_wolf_correlation(block);
    } catch (const DegenerateSignalError& e) {
      throw DegenerateSignalError("subject '" + series.subject_id + "', window " +
                                  std::to_string(seq.length()) + ": " + e.what());
    }
    Tensor adj = proportional_threshold(lw.correlation, spec.keep_fraction);
    seq.features.push_back(node_features(lw.correlation, adj, spec.feature_source));
    seq.adjacency.push_back(std::move(adj));
    seq.weights.push_back(std::move(lw.correlation));
  }
  return seq;
}

}  // namespace dsvb
