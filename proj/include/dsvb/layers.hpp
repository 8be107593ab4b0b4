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
#include <string>
#include <utility>
#include <vector>

#include "dsvb/ops.hpp"
#include "dsvb/random.hpp"

namespace dsvb {

struct NamedParam {
  std::string name;
  Var var;
};
using NamedParams = std::vector<NamedParam>;

inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t(fan_in, fan_out);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Affine map x * W + b acting on rows.
struct Dense {
  Var weight;
  Var bias;

  static Dense init(std::size_t in, std::size_t out, Rng& rng) {
    return {Var::parameter(glorot_uniform(in, out, rng)), Var::parameter(Tensor(1, out))};
  }

  Var operator()(const Var& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace dsvb
