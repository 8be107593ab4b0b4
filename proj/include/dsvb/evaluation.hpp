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

// Nested stratified cross validation and binary classification metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dsvb/trainer.hpp"

namespace dsvb {

using IndexList = std::vector<std::size_t>;

struct InnerSplit {
  IndexList train;
  IndexList validation;
};

struct OuterFold {
  IndexList train;
  IndexList test;
  std::vector<InnerSplit> inner;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<OuterFold> folds;
};

namespace detail {

// Shuffles each class with `rng`, then deals members round-robin with one
// running counter so that both per-class and total fold sizes stay balanced.
inline std::vector<IndexList> stratified_deal(std::span<const std::size_t> indices,
                                              std::span<const std::size_t> labels, std::size_t k,
                                              Rng& rng, const char* what) {
  std::map<std::size_t, IndexList> by_class;
  for (std::size_t idx : indices) by_class[labels[idx]].push_back(idx);
  for (const auto& [cls, members] : by_class) {
    if (members.size() < k) {
      throw InputError(std::string(what) + ": class " + std::to_string(cls) + " has " +
                       std::to_string(members.size()) + " subjects, fewer than " + std::to_string(k) +
                       " folds");
    }
  }
  std::vector<IndexList> folds(k);
  std::size_t counter = 0;
  for (auto& [cls, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t idx : members) folds[counter++ % k].push_back(idx);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// `all` and `remove` sorted.
inline IndexList complement(const IndexList& all, const IndexList& remove) {
  IndexList out;
  std::set_difference(all.begin(), all.end(), remove.begin(), remove.end(), std::back_inserter(out));
  return out;
}

}  // namespace detail

inline FoldPlan stratified_nested_split(std::span<const std::size_t> labels, std::size_t k_outer = 5,
                                        std::size_t k_inner = 4, std::uint64_t seed = 0) {
  if (k_outer < 2) throw ConfigError("cv.k_outer must be >= 2");
  if (k_inner < 2) throw ConfigError("cv.k_inner must be >= 2");
  Rng rng(seed);
  IndexList all(labels.size());
  std::iota(all.begin(), all.end(), 0);
  FoldPlan plan;
  plan.seed = seed;
  for (auto& test : detail::stratified_deal(all, labels, k_outer, rng, "outer split")) {
    OuterFold fold;
    fold.train = detail::complement(all, test);
    fold.test = std::move(test);
    for (auto& val : detail::stratified_deal(fold.train, labels, k_inner, rng, "inner split")) {
      InnerSplit inner;
      inner.train = detail::complement(fold.train, val);
      inner.validation = std::move(val);
      fold.inner.push_back(std::move(inner));
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

/// Checks partition, disjointness and the +-1 stratification bound for the
/// outer folds; throws ContractError naming the first violation.
inline void validate_plan(const FoldPlan& plan, std::span<const std::size_t> labels) {
  const std::size_t n = labels.size();
  const std::size_t k = plan.folds.size();
  std::vector<int> seen(n, 0);
  std::map<std::size_t, std::size_t> class_total;
  for (std::size_t l : labels) ++class_total[l];
  for (std::size_t f = 0; f < k; ++f) {
    const OuterFold& fold = plan.folds[f];
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t i : fold.test) {
      if (i >= n) throw ContractError("plan: index out of range");
      ++seen[i];
      ++counts[labels[i]];
    }
    if (fold.train.size() + fold.test.size() != n) throw ContractError("plan: train+test != dataset");
    for (std::size_t i : fold.train) {
      if (std::binary_search(fold.test.begin(), fold.test.end(), i)) {
        throw ContractError("plan: subject " + std::to_string(i) + " in train and test of fold " +
                            std::to_string(f));
      }
    }
    for (const auto& [cls, total] : class_total) {
      const double expected = static_cast<double>(total) / static_cast<double>(k);
      const double got = static_cast<double>(counts[cls]);
      if (std::abs(got - expected) > 1.0) {
        throw ContractError("plan: fold " + std::to_string(f) + " has " + std::to_string(counts[cls]) +
                            " of class " + std::to_string(cls) + ", expected about " +
                            std::to_string(expected));
      }
    }
    for (const auto& inner : fold.inner) {
      if (inner.train.size() + inner.validation.size() != fold.train.size()) {
        throw ContractError("plan: inner split does not partition outer training set");
      }
      for (std::size_t i : inner.validation) {
        if (std::binary_search(fold.test.begin(), fold.test.end(), i)) {
          throw ContractError("plan: outer test subject used for inner validation");
        }
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (seen[i] != 1) {
      throw ContractError("plan: subject " + std::to_string(i) + " appears in " + std::to_string(seen[i]) +
                          " test folds");
    }
  }
}

// ---------------------------------------------------------------------------
// Metrics

struct ScoredPrediction {
  double prob_positive = 0.0;
  std::size_t predicted = 0;
  std::size_t truth = 0;
};

struct Metrics {
  double accuracy = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  bool precision_undefined = false;  // no positive predictions
  bool recall_undefined = false;     // no positive subjects
};

/// Rank-based AUC (Mann-Whitney) with midranks for tied scores.
inline double roc_auc(std::span<const double> scores, std::span<const std::size_t> truth) {
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::size_t t : truth) n_pos += t == 1 ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InputError("AUC undefined: only one class present");
  IndexList order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (truth[order[k]] == 1) rank_sum += mid;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

/// Positive class is label 1.
inline Metrics compute_metrics(std::span<const ScoredPrediction> preds) {
  if (preds.empty()) throw InputError("compute_metrics: no predictions");
  double tp = 0, fp = 0, fn = 0, tn = 0;
  std::vector<double> scores;
  std::vector<std::size_t> truth;
  for (const auto& p : preds) {
    const bool pos = p.predicted == 1, actual = p.truth == 1;
    tp += pos && actual;
    fp += pos && !actual;
    fn += !pos && actual;
    tn += !pos && !actual;
    scores.push_back(p.prob_positive);
    truth.push_back(p.truth);
  }
  Metrics m;
  m.accuracy = (tp + tn) / static_cast<double>(preds.size());
  m.precision_undefined = tp + fp == 0;
  m.recall_undefined = tp + fn == 0;
  m.precision = m.precision_undefined ? 0.0 : tp / (tp + fp);
  m.recall = m.recall_undefined ? 0.0 : tp / (tp + fn);
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.auc = roc_auc(scores, truth);
  return m;
}

struct MetricsSummary {
  Metrics mean;
  Metrics stddev;  // population standard deviation across folds
};

inline MetricsSummary summarize(std::span<const Metrics> folds) {
  MetricsSummary s;
  if (folds.empty()) return s;
  const double k = static_cast<double>(folds.size());
  const auto field = [&](double Metrics::*f) {
    double mean = 0.0;
    for (const auto& m : folds) mean += m.*f;
    mean /= k;
    double var = 0.0;
    for (const auto& m : folds) var += (m.*f - mean) * (m.*f - mean);
    s.mean.*f = mean;
    s.stddev.*f = std::sqrt(var / k);
  };
  for (auto f : {&Metrics::accuracy, &Metrics::recall, &Metrics::precision, &Metrics::f1, &Metrics::auc}) field(f);
  return s;
}

// ---------------------------------------------------------------------------
// Cross validation

struct CvOptions {
  // Non-empty: pick the epoch count per outer fold by inner-fold validation
  // accuracy. Empty: train for TrainConfig::epochs.
  std::vector<std::size_t> epoch_candidates;
  std::size_t threads = 1;
};

struct SubjectPrediction {
  std::string subject_id;
  Prediction prediction;
  std::size_t truth = 0;
};

struct FoldResult {
  std::size_t fold = 0;
  IndexList train;
  IndexList test;
  std::size_t epochs_used = 0;
  std::vector<SubjectPrediction> predictions;
  Metrics metrics;
};

struct CvResult {
  std::vector<FoldResult> folds;
  MetricsSummary summary;
};

inline std::vector<DynamicGraphSequence> subset(const std::vector<DynamicGraphSequence>& data,
                                                const IndexList& idx) {
  std::vector<DynamicGraphSequence> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(data.at(i));
  return out;
}

/// Trains from a fresh initialization derived from (tcfg.seed, tag).
inline ModelParams fit(const std::vector<DynamicGraphSequence>& train_set, const ModelConfig& mcfg,
                       TrainConfig tcfg, std::uint64_t tag) {
  ModelParams p = ModelParams::init(mcfg, train_set.front().num_nodes(), derive_seed(tcfg.seed, {0x696e6974ULL, tag}));
  OptimizerState opt = OptimizerState::init(p);
  tcfg.seed = derive_seed(tcfg.seed, {0x74726eULL, tag});
  train(train_set, p, opt, mcfg, tcfg);
  return p;
}

inline std::vector<SubjectPrediction> predict_all(const std::vector<DynamicGraphSequence>& data,
                                                  const IndexList& idx, const ModelParams& p,
                                                  const ModelConfig& mcfg) {
  std::vector<SubjectPrediction> out;
  for (std::size_t i : idx) out.push_back({data[i].subject_id, predict(data[i], p, mcfg).prediction, data[i].label});
  return out;
}

inline Metrics metrics_of(const std::vector<SubjectPrediction>& preds) {
  std::vector<ScoredPrediction> s;
  for (const auto& p : preds) s.push_back({p.prediction.positive_probability(), p.prediction.predicted_class, p.truth});
  return compute_metrics(s);
}

inline double accuracy_of(const std::vector<SubjectPrediction>& preds) {
  double ok = 0;
  for (const auto& p : preds) ok += p.prediction.predicted_class == p.truth;
  return ok / static_cast<double>(preds.size());
}

inline FoldResult run_fold(const std::vector<DynamicGraphSequence>& dataset, const ModelConfig& mcfg,
                           const TrainConfig& tcfg, const FoldPlan& plan, std::size_t f,
                           const CvOptions& opts) {
  const OuterFold& fold = plan.folds.at(f);
  for (std::size_t i : fold.train)
    if (std::binary_search(fold.test.begin(), fold.test.end(), i)) {
      throw ContractError("run_cv: test subject " + std::to_string(i) + " used for training");
    }
  FoldResult r;
  r.fold = f;
  r.train = fold.train;
  r.test = fold.test;
  TrainConfig cfg = tcfg;
  if (!opts.epoch_candidates.empty()) {
    double best = -1.0;
    for (std::size_t cand : opts.epoch_candidates) {
      TrainConfig c = tcfg;
      c.epochs = cand;
      double acc = 0.0;
      for (std::size_t s = 0; s < fold.inner.size(); ++s) {
        const InnerSplit& in = fold.inner[s];
        ModelParams p = fit(subset(dataset, in.train), mcfg, c, derive_seed(f, {s, 0x696e6eULL}));
        acc += accuracy_of(predict_all(dataset, in.validation, p, mcfg));
      }
      acc /= static_cast<double>(fold.inner.size());
      if (acc > best) {
        best = acc;
        cfg.epochs = cand;
      }
    }
  }
  r.epochs_used = cfg.epochs;
  ModelParams p = fit(subset(dataset, fold.train), mcfg, cfg, f);
  r.predictions = predict_all(dataset, fold.test, p, mcfg);
  r.metrics = metrics_of(r.predictions);
  return r;
}

/// Trains once per outer fold and evaluates on the untouched test fold.
/// Folds are independent and may run concurrently (opts.threads).
inline CvResult run_cv(const std::vector<DynamicGraphSequence>& dataset, const ModelConfig& mcfg,
                       const TrainConfig& tcfg, const FoldPlan& plan, const CvOptions& opts = {}) {
  mcfg.validate();
  tcfg.validate();
  if (dataset.empty()) throw InputError("run_cv: empty dataset");
  CvResult out;
  out.folds.resize(plan.folds.size());
  const std::size_t threads = std::max<std::size_t>(1, opts.threads);
  for (std::size_t start = 0; start < plan.folds.size(); start += threads) {
    const std::size_t end = std::min(plan.folds.size(), start + threads);
    if (threads == 1) {
      out.folds[start] = run_fold(dataset, mcfg, tcfg, plan, start, opts);
      continue;
    }
    std::vector<std::future<FoldResult>> jobs;
    for (std::size_t f = start; f < end; ++f)
      jobs.push_back(std::async(std::launch::async, [&, f] { return run_fold(dataset, mcfg, tcfg, plan, f, opts); }));
    for (std::size_t f = start; f < end; ++f) out.folds[f] = jobs[f - start].get();
  }
  std::vector<Metrics> ms;
  for (const auto& f : out.folds) ms.push_back(f.metrics);
  out.summary = summarize(ms);
  return out;
}

}  // namespace dsvb
