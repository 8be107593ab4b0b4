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
#include <random>

#include "dsvb/dynconn.hpp"
#include "test_support.hpp"

namespace dsvb {
namespace {

using testing::random_tensor;
using testing::sklearn_route_ledoit_wolf;

RoiTimeSeries random_series(std::size_t n, std::size_t total, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return RoiTimeSeries{"s" + std::to_string(seed), random_tensor(n, total, rng), 0};
}

std::size_t upper_edges(const Tensor& a) {
  std::size_t e = 0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) e += a(i, j) == 1.0;
  return e;
}

TEST(Windows, SpecCounts) {
  WindowSpec spec;
  auto w = segment_windows(random_series(3, 40, 1), spec);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(segment_windows(random_series(3, 20, 1), spec).size(), 1u);
  EXPECT_THROW(segment_windows(random_series(3, 19, 1), spec), InputError);
}

TEST(Windows, OffsetsFollowStride) {
  const RoiTimeSeries s = random_series(2, 40, 2);
  const auto w = segment_windows(s, WindowSpec{});
  for (std::size_t k = 0; k < w.size(); ++k)
    for (std::size_t t = 0; t < 20; ++t) EXPECT_EQ(w[k](1, t), s.data(1, 10 * k + t));
}

TEST(Windows, CountFormulaProperty) {
  for (std::size_t len = 2; len <= 12; ++len)
    for (std::size_t stride = 1; stride <= 7; ++stride)
      for (std::size_t total = len; total <= 40; ++total) {
        WindowSpec spec{len, stride, 0.4};
        std::size_t brute = 0;
        for (std::size_t start = 0; start + len <= total; start += stride) ++brute;
        EXPECT_EQ(window_count(total, spec), brute);
      }
}

TEST(WindowSpec, RejectsInvalid) {
  EXPECT_THROW((WindowSpec{1, 1, 0.4}.validate()), ConfigError);
  EXPECT_THROW((WindowSpec{5, 0, 0.4}.validate()), ConfigError);
  EXPECT_THROW((WindowSpec{5, 1, 0.0}.validate()), ConfigError);
  EXPECT_THROW((WindowSpec{5, 1, 1.1}.validate()), ConfigError);
}

TEST(LedoitWolf, OrthogonalSeries) {
  const auto r = ledoit_wolf_correlation(Tensor::from_rows({{1, -1, 1, -1}, {1, 1, -1, -1}}));
  EXPECT_NEAR(r.correlation(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(r.correlation(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(r.correlation(1, 1), 1.0, 1e-15);
}

TEST(LedoitWolf, EqualRowsShrinkBelowOne) {
  const auto r = ledoit_wolf_correlation(Tensor::from_rows({{1, 2, 4, 3, 0}, {1, 2, 4, 3, 0}}));
  // Both variances equal s, so the off-diagonal is (1 - delta) s / s.
  EXPECT_NEAR(r.correlation(0, 1), 1.0 - r.shrinkage, 1e-14);
  if (r.shrinkage > 0.0) EXPECT_LT(r.correlation(0, 1), 1.0);
}

TEST(LedoitWolf, MatchesIndependentRoute) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor block = random_tensor(5, 30, rng);
    const auto got = ledoit_wolf_correlation(block);
    const auto [corr, shrink] = sklearn_route_ledoit_wolf(block);
    EXPECT_NEAR(got.shrinkage, shrink, 1e-10);
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(got.correlation[i], corr[i], 1e-10);
  }
}

TEST(LedoitWolf, MatchesIndependentRouteWhenShrinkageIsLarge) {
  // Few samples relative to ROIs pushes the intensity up.
  std::mt19937_64 rng(42);
  const Tensor block = random_tensor(12, 4, rng);
  const auto got = ledoit_wolf_correlation(block);
  const auto [corr, shrink] = sklearn_route_ledoit_wolf(block);
  EXPECT_NEAR(got.shrinkage, shrink, 1e-10);
  for (std::size_t i = 0; i < corr.size(); ++i) EXPECT_NEAR(got.correlation[i], corr[i], 1e-10);
}

TEST(LedoitWolf, ZeroVarianceNamesRoi) {
  try {
    ledoit_wolf_correlation(Tensor::from_rows({{1, 2, 3}, {4, 4, 4}}));
    FAIL();
  } catch (const DegenerateSignalError& e) {
    EXPECT_NE(std::string(e.what()).find("ROI 1"), std::string::npos) << e.what();
  }
}

TEST(LedoitWolf, PropertiesOnRandomBlocks) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 7, l = 2 + (trial * 5) % 23;
    const auto r = ledoit_wolf_correlation(random_tensor(n, l, rng));
    EXPECT_GE(r.shrinkage, 0.0);
    EXPECT_LE(r.shrinkage, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(r.correlation(i, i), 1.0, 1e-12);
      for (std::size_t j = 0; j < n; ++j) {
        EXPECT_EQ(r.correlation(i, j), r.correlation(j, i));
        EXPECT_LE(std::abs(r.correlation(i, j)), 1.0 + 1e-12);
      }
    }
  }
}

TEST(Threshold, KeepAllIsCompleteGraph) {
  std::mt19937_64 rng(3);
  const Tensor c = ledoit_wolf_correlation(random_tensor(6, 20, rng)).correlation;
  const Tensor a = proportional_threshold(c, 1.0);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(a(i, j), i == j ? 0.0 : 1.0);
}

TEST(Threshold, HandRanking) {
  Tensor c = Tensor::identity(4);
  auto set = [&](std::size_t i, std::size_t j, double v) { c(i, j) = c(j, i) = v; };
  set(0, 1, 0.9);
  set(0, 2, -0.5);  // magnitude ranks, sign does not
  set(0, 3, 0.4);
  set(1, 2, 0.3);
  set(1, 3, -0.2);
  set(2, 3, 0.1);
  EXPECT_EQ(kept_edge_count(4, 0.4), 3u);
  const Tensor a = proportional_threshold(c, 0.4);
  EXPECT_EQ(upper_edges(a), 3u);
  EXPECT_EQ(a(0, 1), 1.0);
  EXPECT_EQ(a(0, 2), 1.0);
  EXPECT_EQ(a(0, 3), 1.0);
  EXPECT_EQ(a(1, 2), 0.0);
}

TEST(Threshold, TiesBrokenByIndex) {
  Tensor c(4, 4, 0.5);
  for (std::size_t i = 0; i < 4; ++i) c(i, i) = 1.0;
  const Tensor a = proportional_threshold(c, 0.4);
  EXPECT_EQ(a(0, 1), 1.0);
  EXPECT_EQ(a(0, 2), 1.0);
  EXPECT_EQ(a(0, 3), 1.0);
  EXPECT_EQ(a(1, 2), 0.0);
  EXPECT_EQ(a(2, 3), 0.0);
}

TEST(Threshold, NonSymmetricIsContractError) {
  Tensor c = Tensor::identity(3);
  c(0, 1) = 0.2;
  EXPECT_THROW(proportional_threshold(c, 0.4), ContractError);
}

TEST(Threshold, EdgeCountProperty) {
  std::mt19937_64 rng(11);
  for (std::size_t n = 2; n <= 30; n += 4) {
    const Tensor c = ledoit_wolf_correlation(random_tensor(n, 25, rng)).correlation;
    const std::size_t e = n * (n - 1) / 2;
    for (double keep : {0.1, 0.25, 0.4, 0.77, 1.0}) {
      const Tensor a = proportional_threshold(c, keep);
      EXPECT_EQ(upper_edges(a), static_cast<std::size_t>(std::ceil(keep * e - 1e-9)));
      double kept_min = 2.0, dropped_max = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(a(i, i), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          EXPECT_EQ(a(i, j), a(j, i));
          if (i >= j) continue;
          const double m = std::abs(c(i, j));
          if (a(i, j) == 1.0) kept_min = std::min(kept_min, m);
          else dropped_max = std::max(dropped_max, m);
        }
      }
      EXPECT_GE(kept_min, dropped_max);
    }
  }
}

TEST(BuildSequence, Composition) {
  const RoiTimeSeries s = random_series(5, 40, 4);
  const DynamicGraphSequence seq = build_sequence(s, WindowSpec{});
  ASSERT_EQ(seq.length(), 3u);
  EXPECT_NO_THROW(seq.validate());
  const auto windows = segment_windows(s, WindowSpec{});
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(seq.features[t].shape(), (std::vector<std::size_t>{5, 5}));
    const Tensor w = ledoit_wolf_correlation(windows[t]).correlation;
    EXPECT_EQ(seq.weights[t], w);
    EXPECT_EQ(seq.features[t], w);
    EXPECT_EQ(seq.adjacency[t], proportional_threshold(w, 0.4));
    EXPECT_EQ(upper_edges(seq.adjacency[t]), 4u);  // ceil(0.4 * 10)
  }
}

TEST(BuildSequence, KeepAllGivesIdenticalCompleteGraphs) {
  const DynamicGraphSequence seq = build_sequence(random_series(6, 60, 5), WindowSpec{20, 10, 1.0});
  for (const auto& a : seq.adjacency) EXPECT_EQ(a, seq.adjacency.front());
  EXPECT_EQ(upper_edges(seq.adjacency.front()), 15u);
}

TEST(BuildSequence, ThresholdedFeaturesMaskByAdjacency) {
  WindowSpec spec;
  spec.feature_source = FeatureSource::thresholded;
  const DynamicGraphSequence seq = build_sequence(random_series(5, 40, 6), spec);
  for (std::size_t t = 0; t < seq.length(); ++t)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double expect = (i == j || seq.adjacency[t](i, j) == 1.0) ? seq.weights[t](i, j) : 0.0;
        EXPECT_EQ(seq.features[t](i, j), expect);
      }
}

TEST(BuildSequence, Deterministic) {
  const RoiTimeSeries s = random_series(7, 55, 7);
  const auto a = build_sequence(s, WindowSpec{}), b = build_sequence(s, WindowSpec{});
  EXPECT_EQ(a.adjacency, b.adjacency);
  EXPECT_EQ(a.weights, b.weights);
}

TEST(BuildSequence, NonFiniteInputRejected) {
  RoiTimeSeries s = random_series(3, 40, 8);
  s.data(2, 17) = std::nan("");
  EXPECT_THROW(build_sequence(s, WindowSpec{}), InputError);
}

}  // namespace
}  // namespace dsvb
