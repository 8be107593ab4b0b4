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

// Dynamic connectivity states from learned node embeddings: per-step
// embedding correlation networks, k-means states, and Markov switching
// statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dsvb/errors.hpp"
#include "dsvb/random.hpp"
#include "dsvb/tensor.hpp"

namespace dsvb {

struct PearsonResult {
  Tensor correlation;
  std::vector<std::size_t> degenerate_nodes;  // zero-variance rows
};

/// Pearson correlation between rows. Rows with zero variance correlate 0
/// with everything (diagonal included) and are reported.
inline PearsonResult pearson_rows(const Tensor& z) {
  const std::size_t n = z.rows(), d = z.cols();
  if (d < 2) throw ContractError("pearson_rows: need at least 2 columns, got " + std::to_string(d));
  Tensor centered(n, d);
  std::vector<double> norm(n, 0.0);
  PearsonResult out{Tensor(n, n), {}};
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (double v : z.row(i)) mean += v;
    mean /= static_cast<double>(d);
    for (std::size_t k = 0; k < d; ++k) {
      centered(i, k) = z(i, k) - mean;
      norm[i] += centered(i, k) * centered(i, k);
    }
    norm[i] = std::sqrt(norm[i]);
    if (norm[i] == 0.0) out.degenerate_nodes.push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (norm[i] == 0.0) continue;
    out.correlation(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      if (norm[j] == 0.0) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += centered(i, k) * centered(j, k);
      const double c = std::clamp(s / (norm[i] * norm[j]), -1.0, 1.0);
      out.correlation(i, j) = out.correlation(j, i) = c;
    }
  }
  return out;
}

/// One correlation network per time step from the [N x latent] embeddings.
inline std::vector<Tensor> embedding_dfc(const std::vector<Tensor>& z_sequence,
                                         std::vector<std::vector<std::size_t>>* degenerate = nullptr) {
  std::vector<Tensor> out;
  if (degenerate) degenerate->clear();
  for (const Tensor& z : z_sequence) {
    PearsonResult r = pearson_rows(z);
    out.push_back(std::move(r.correlation));
    if (degenerate) degenerate->push_back(std::move(r.degenerate_nodes));
  }
  return out;
}

inline std::vector<double> upper_triangle(const Tensor& m) {
  std::vector<double> v;
  v.reserve(m.rows() * (m.rows() - 1) / 2);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

/// Inverse of upper_triangle with a unit diagonal.
inline Tensor from_upper_triangle(std::span<const double> v, std::size_t n) {
  if (v.size() != n * (n - 1) / 2) throw DimensionError("from_upper_triangle: length mismatch");
  Tensor m = Tensor::identity(n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++k) m(i, j) = m(j, i) = v[k];
  return m;
}

// ---------------------------------------------------------------------------
// k-means

struct KMeansOptions {
  std::size_t k = 3;
  std::size_t restarts = 20;
  std::size_t max_iterations = 300;
  double tolerance = 1e-6;  // relative inertia change
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Tensor centroids;  // [k x dim], ordered by descending cluster size
  std::vector<std::size_t> labels;
  std::vector<std::size_t> cluster_sizes;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each assignment step of the winning restart
  std::size_t iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct LloydRun {
  Tensor centroids;
  std::vector<std::size_t> labels;
  double inertia = 0.0;
  std::vector<double> history;
  std::size_t iterations = 0;
};

inline LloydRun lloyd_once(const Tensor& x, const KMeansOptions& opt, Rng& rng) {
  const std::size_t n = x.rows(), d = x.cols(), k = opt.k;
  LloydRun run;
  run.centroids = Tensor(k, d);
  // k-means++ seeding
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t first = pick(rng);
  std::copy(x.row(first).begin(), x.row(first).end(), run.centroids.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], sq_dist(x.row(i), run.centroids.row(c - 1)));
      total += closest[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double target = u(rng), acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += closest[i];
        if (acc >= target && closest[i] > 0.0) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = pick(rng);
    }
    std::copy(x.row(chosen).begin(), x.row(chosen).end(), run.centroids.row(c).begin());
  }

  run.labels.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dd = sq_dist(x.row(i), run.centroids.row(c));
        if (dd < best) {
          best = dd;
          run.labels[i] = c;
        }
      }
      dist[i] = best;
      inertia += best;
    }
    run.history.push_back(inertia);
    run.inertia = inertia;
    run.iterations = it + 1;
    const bool converged = std::isfinite(previous) &&
                           std::abs(previous - inertia) <= opt.tolerance * std::max(previous, 1e-300);
    if (converged || inertia == 0.0) break;
    previous = inertia;

    Tensor sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[run.labels[i]];
      for (std::size_t j = 0; j < d; ++j) sums(run.labels[i], j) += x(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: move it onto the point farthest from its centroid.
        const std::size_t far = static_cast<std::size_t>(
            std::distance(dist.begin(), std::max_element(dist.begin(), dist.end())));
        std::copy(x.row(far).begin(), x.row(far).end(), run.centroids.row(c).begin());
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < d; ++j) run.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  }
  return run;
}

}  // namespace detail

/// k-means++ seeded Lloyd iterations, best of `restarts` by inertia.
///
/// Samples are clustered in lexicographic order so the result does not
/// depend on how the caller ordered them. Output clusters are relabeled by
/// descending size (ties: the cluster holding the lexicographically smaller
/// member first).
inline KMeansResult kmeans(const Tensor& samples, const KMeansOptions& opt) {
  const std::size_t n = samples.rows(), d = samples.cols();
  if (opt.k == 0) throw ConfigError("kmeans: k must be positive");
  if (n < opt.k) {
    throw InputError("kmeans: " + std::to_string(n) + " samples is fewer than k = " + std::to_string(opt.k));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(samples.row(a).begin(), samples.row(a).end(), samples.row(b).begin(),
                                        samples.row(b).end());
  });
  Tensor x(n, d);
  for (std::size_t i = 0; i < n; ++i) std::copy(samples.row(order[i]).begin(), samples.row(order[i]).end(), x.row(i).begin());

  Rng rng(opt.seed);
  detail::LloydRun best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
    detail::LloydRun run = detail::lloyd_once(x, opt, rng);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }

  std::vector<std::size_t> sizes(opt.k, 0), first_member(opt.k, n);
  for (std::size_t i = 0; i < n; ++i) {
    ++sizes[best.labels[i]];
    first_member[best.labels[i]] = std::min(first_member[best.labels[i]], i);
  }
  std::vector<std::size_t> rank(opt.k);
  std::iota(rank.begin(), rank.end(), 0);
  std::sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    if (sizes[a] != sizes[b]) return sizes[a] > sizes[b];
    return first_member[a] < first_member[b];
  });
  std::vector<std::size_t> relabel(opt.k);
  for (std::size_t c = 0; c < opt.k; ++c) relabel[rank[c]] = c;

  KMeansResult out;
  out.centroids = Tensor(opt.k, d);
  out.cluster_sizes.resize(opt.k);
  for (std::size_t c = 0; c < opt.k; ++c) {
    std::copy(best.centroids.row(rank[c]).begin(), best.centroids.row(rank[c]).end(), out.centroids.row(c).begin());
    out.cluster_sizes[c] = sizes[rank[c]];
  }
  out.labels.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) out.labels[order[i]] = relabel[best.labels[i]];
  out.inertia = best.inertia;
  out.inertia_history = std::move(best.history);
  out.iterations = best.iterations;
  return out;
}

// ---------------------------------------------------------------------------
// States and transitions

struct SubjectNetworks {
  std::string subject_id;
  std::size_t label = 0;
  std::vector<Tensor> networks;  // one N x N matrix per time step
};

struct StateAssignment {
  std::string subject_id;
  std::size_t label = 0;
  std::vector<std::size_t> states;
};

struct StateClustering {
  std::size_t num_nodes = 0;
  std::vector<Tensor> centroids;  // K matrices, N x N
  std::vector<StateAssignment> assignments;
  KMeansResult kmeans;
};

/// Clusters every subject's per-step networks jointly (upper triangles as
/// feature vectors) and maps the labels back to per-subject sequences.
inline StateClustering kmeans_states(const std::vector<SubjectNetworks>& subjects, const KMeansOptions& opt) {
  std::size_t total = 0, n = 0;
  for (const auto& s : subjects) {
    for (const auto& m : s.networks) {
      if (n == 0) n = m.rows();
      if (m.rows() != n || m.cols() != n) throw InputError("kmeans_states: inconsistent network sizes");
      ++total;
    }
  }
  if (n < 2) throw InputError("kmeans_states: networks need at least 2 nodes");
  const std::size_t dim = n * (n - 1) / 2;
  Tensor x(total, dim);
  std::size_t row = 0;
  for (const auto& s : subjects)
    for (const auto& m : s.networks) {
      const auto v = upper_triangle(m);
      std::copy(v.begin(), v.end(), x.row(row++).begin());
    }
  StateClustering out;
  out.num_nodes = n;
  out.kmeans = kmeans(x, opt);
  for (std::size_t c = 0; c < opt.k; ++c) out.centroids.push_back(from_upper_triangle(out.kmeans.centroids.row(c), n));
  row = 0;
  for (const auto& s : subjects) {
    StateAssignment a{s.subject_id, s.label, {}};
    for (std::size_t t = 0; t < s.networks.size(); ++t) a.states.push_back(out.kmeans.labels[row++]);
    out.assignments.push_back(std::move(a));
  }
  return out;
}

struct TransitionMatrix {
  Tensor probabilities;  // K x K, rows sum to 1
  Tensor counts;
  std::vector<bool> uniform_rows;  // rows without outgoing observations
};

/// Pooled bigram counts normalized per row.
inline TransitionMatrix transition_matrix(std::span<const StateAssignment> assignments, std::size_t k) {
  TransitionMatrix tm{Tensor(k, k), Tensor(k, k), std::vector<bool>(k, false)};
  for (const auto& a : assignments) {
    for (std::size_t t = 1; t < a.states.size(); ++t) {
      if (a.states[t - 1] >= k || a.states[t] >= k) throw InputError("transition_matrix: state index >= K");
      tm.counts(a.states[t - 1], a.states[t]) += 1.0;
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) row += tm.counts(i, j);
    tm.uniform_rows[i] = row == 0.0;
    for (std::size_t j = 0; j < k; ++j)
      tm.probabilities(i, j) = row == 0.0 ? 1.0 / static_cast<double>(k) : tm.counts(i, j) / row;
  }
  return tm;
}

struct TransitionRates {
  std::vector<double> rates;  // per subject
  std::vector<double> bin_edges;
  std::vector<std::size_t> histogram;
};

/// rate = (# of t with s_t != s_{t-1}) / T, histogrammed on [0, 0.1, ..., 1.0];
/// the last bin is closed.
inline TransitionRates transition_rate_distribution(std::span<const StateAssignment> assignments) {
  TransitionRates r;
  for (int b = 0; b <= 10; ++b) r.bin_edges.push_back(b / 10.0);
  r.histogram.assign(10, 0);
  for (const auto& a : assignments) {
    if (a.states.size() < 2) {
      throw InputError("transition_rate_distribution: subject '" + a.subject_id + "' has fewer than 2 steps");
    }
    std::size_t switches = 0;
    for (std::size_t t = 1; t < a.states.size(); ++t) switches += a.states[t] != a.states[t - 1];
    const double rate = static_cast<double>(switches) / static_cast<double>(a.states.size() - 1);
    r.rates.push_back(rate);
    const auto bin = static_cast<std::size_t>(std::floor(rate * 10.0 + 1e-9));
    ++r.histogram[std::min<std::size_t>(bin, 9)];
  }
  return r;
}

/// Hubert-Arabie adjusted Rand index between two labelings.
inline double adjusted_rand_index(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw DimensionError("adjusted_rand_index: length mismatch");
  const auto choose2 = [](double v) { return v * (v - 1.0) / 2.0; };
  std::map<std::pair<std::size_t, std::size_t>, double> joint;
  std::map<std::size_t, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, v] : joint) index += choose2(v);
  for (const auto& [_, v] : ra) sa += choose2(v);
  for (const auto& [_, v] : rb) sb += choose2(v);
  const double expected = sa * sb / choose2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace dsvb
