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
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dsvb/autodiff.hpp"

namespace dsvb {

// Scalar kernels shared by the differentiable ops and by plain-value code.
namespace scalar {

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ln(1 + e^x) without overflow or cancellation.
inline double softplus(double x) noexcept {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace scalar

namespace detail {

inline Node& input(Node& n, std::size_t i) { return *n.inputs[i]; }

inline std::string shapes(const Tensor& a, const Tensor& b) {
  return a.shape_str() + " and " + b.shape_str();
}

// Broadcast extent for one axis, or 0 if incompatible.
inline std::size_t broadcast_dim(std::size_t a, std::size_t b) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  return 0;
}

template <class F, class GA, class GB>
Var broadcast_binary(const Var& a, const Var& b, const char* name, F f, GA da, GB db) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const std::size_t r = broadcast_dim(x.rows(), y.rows());
  const std::size_t c = broadcast_dim(x.cols(), y.cols());
  if (r == 0 || c == 0) {
    throw DimensionError(std::string(name) + ": shapes not broadcast-compatible: " + shapes(x, y));
  }
  const bool xr = x.rows() == 1 && r > 1, xc = x.cols() == 1 && c > 1;
  const bool yr = y.rows() == 1 && r > 1, yc = y.cols() == 1 && c > 1;
  Tensor out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out(i, j) = f(x(xr ? 0 : i, xc ? 0 : j), y(yr ? 0 : i, yc ? 0 : j));
  return Var::from_op(std::move(out), {a, b}, [=](Node& n) {
    Node& na = input(n, 0);
    Node& nb = input(n, 1);
    const Tensor& xv = na.value;
    const Tensor& yv = nb.value;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t ai = xr ? 0 : i, aj = xc ? 0 : j;
        const std::size_t bi = yr ? 0 : i, bj = yc ? 0 : j;
        const double g = n.grad(i, j);
        if (na.requires_grad) na.grad(ai, aj) += g * da(xv(ai, aj), yv(bi, bj));
        if (nb.requires_grad) nb.grad(bi, bj) += g * db(xv(ai, aj), yv(bi, bj));
      }
    }
  });
}

// f: forward value; d: derivative given (x, y = f(x)).
template <class F, class D>
Var unary(const Var& a, F f, D d) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return Var::from_op(std::move(out), {a}, [d](Node& n) {
    Node& na = input(n, 0);
    for (std::size_t i = 0; i < n.value.size(); ++i)
      na.grad[i] += n.grad[i] * d(na.value[i], n.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n].
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner dimensions differ: " + detail::shapes(x, y));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
  Tensor out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x(i, p);
      if (xv == 0.0) continue;
      const double* yr = &y(p, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += xv * yr[j];
    }
  }
  return Var::from_op(std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    detail::Node& na = detail::input(nd, 0);
    detail::Node& nb = detail::input(nd, 1);
    const Tensor& g = nd.grad;
    if (na.requires_grad) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* gr = &g(i, 0);
          const double* br = &nb.value(p, 0);
          for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
          na.grad(i, p) += s;
        }
    }
    if (nb.requires_grad) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.value(i, p);
          if (av == 0.0) continue;
          double* bg = &nb.grad(p, 0);
          const double* gr = &g(i, 0);
          for (std::size_t j = 0; j < n; ++j) bg[j] += av * gr[j];
        }
    }
  });
}

/// a[m x k] * b[n x k]^T. Used for attention scores and Gram matrices.
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ: " + detail::shapes(x, y));
  }
  const std::size_t m = x.rows(), k = x.cols(), n = y.rows();
  Tensor out(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      const double* xr = &x(i, 0);
      const double* yr = &y(j, 0);
      for (std::size_t p = 0; p < k; ++p) s += xr[p] * yr[p];
      out(i, j) = s;
    }
  return Var::from_op(std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    detail::Node& na = detail::input(nd, 0);
    detail::Node& nb = detail::input(nd, 1);
    const Tensor& g = nd.grad;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double gv = g(i, j);
        if (gv == 0.0) continue;
        if (na.requires_grad) {
          double* ag = &na.grad(i, 0);
          const double* yr = &nb.value(j, 0);
          for (std::size_t p = 0; p < k; ++p) ag[p] += gv * yr[p];
        }
        if (nb.requires_grad) {
          double* bg = &nb.grad(j, 0);
          const double* xr = &na.value(i, 0);
          for (std::size_t p = 0; p < k; ++p) bg[p] += gv * xr[p];
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  return detail::broadcast_binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// 1 - a
inline Var one_minus(const Var& a) {
  return detail::unary(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, scalar::sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var softplus(const Var& a) {
  return detail::unary(a, scalar::softplus, [](double x, double) { return scalar::sigmoid(x); });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

enum class UnaryOp { sigmoid, tanh, softplus, exp, log };
enum class BinaryOp { add, sub, mul };

inline Var elementwise(UnaryOp op, const Var& a) {
  switch (op) {
    case UnaryOp::sigmoid: return sigmoid(a);
    case UnaryOp::tanh: return tanh(a);
    case UnaryOp::softplus: return softplus(a);
    case UnaryOp::exp: return exp(a);
    case UnaryOp::log: return log(a);
  }
  throw ContractError("elementwise: unknown unary op");
}

inline Var elementwise(BinaryOp op, const Var& a, const Var& b) {
  switch (op) {
    case BinaryOp::add: return add(a, b);
    case BinaryOp::sub: return sub(a, b);
    case BinaryOp::mul: return mul(a, b);
  }
  throw ContractError("elementwise: unknown binary op");
}

/// Identity forward; multiplies the incoming gradient by `coeff` on the way
/// back. coeff = -lambda gives the usual gradient reversal layer.
inline Var gradient_scale(const Var& a, double coeff) {
  Tensor out = a.value();
  return Var::from_op(std::move(out), {a}, [coeff](detail::Node& n) {
    detail::Node& na = detail::input(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) na.grad[i] += coeff * n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row counts differ: " +
                           detail::shapes(parts.front().value(), p.value()));
    }
    c += p.cols();
  }
  Tensor out(r, c);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  return Var::from_op(std::move(out), parts, [offsets, r](detail::Node& n) {
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      detail::Node& in = *n.inputs[k];
      if (!in.requires_grad) continue;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < in.value.cols(); ++j) in.grad(i, j) += n.grad(i, offsets[k] + j);
    }
  });
}

/// Columns [begin, end).
inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for " + a.value().shape_str());
  }
  const std::size_t r = a.rows(), c = end - begin;
  Tensor out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = a.value()(i, begin + j);
  return Var::from_op(std::move(out), {a}, [begin, r, c](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) in.grad(i, begin + j) += n.grad(i, j);
  });
}

/// Reinterprets the row-major storage with a new shape.
inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) {
    throw DimensionError("reshape: cannot view " + a.value().shape_str() + " as " +
                         Tensor::shape_string(rows, cols));
  }
  Tensor out(rows, cols, a.value().storage());
  return Var::from_op(std::move(out), {a}, [](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return Var::from_op(Tensor::scalar(s), {a}, [](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    const double g = n.grad[0];
    for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += g;
  });
}

/// Per-row sums as an [r x 1] column.
inline Var row_sum(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v;
    out(i, 0) = s;
  }
  return Var::from_op(std::move(out), {a}, [](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    for (std::size_t i = 0; i < in.value.rows(); ++i)
      for (std::size_t j = 0; j < in.value.cols(); ++j) in.grad(i, j) += n.grad(i, 0);
  });
}

/// Elementwise mean of equally shaped values.
inline Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("mean_of: empty list");
  if (xs.size() == 1) return xs.front();
  const Tensor& first = xs.front().value();
  Tensor out(first.rows(), first.cols());
  for (const auto& x : xs) {
    if (!x.value().same_shape(first)) {
      throw DimensionError("mean_of: shapes differ: " + detail::shapes(first, x.value()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.value()[i];
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return Var::from_op(std::move(out), xs, [inv](detail::Node& n) {
    for (auto& in : n.inputs) {
      if (!in->requires_grad) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) in->grad[i] += inv * n.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention and loss kernels

/// Row-wise softmax restricted to entries where `mask` is nonzero. Entries
/// outside the mask are exactly zero. A row with an empty mask is an error
/// unless `allow_empty_rows`, in which case the whole row is zero (an
/// isolated node receives no messages).
inline Var masked_row_softmax(const Var& scores, const Tensor& mask, bool allow_empty_rows) {
  const Tensor& s = scores.value();
  if (!s.same_shape(mask)) {
    throw DimensionError("masked_softmax: scores and mask differ: " + detail::shapes(s, mask));
  }
  Tensor out(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.cols(); ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, s(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (allow_empty_rows) continue;
      throw DegenerateNeighborhoodError("masked_softmax: row " + std::to_string(i) +
                                        " has an empty mask");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (mask(i, j) == 0.0) continue;
      out(i, j) = std::exp(s(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < s.cols(); ++j) out(i, j) /= z;
  }
  return Var::from_op(std::move(out), {scores}, [](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    const Tensor& y = n.value;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += y(i, j) * n.grad(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) in.grad(i, j) += y(i, j) * (n.grad(i, j) - dot);
    }
  });
}

/// Softmax of a score vector over the entries where `mask` is true.
inline Var masked_softmax(const Var& scores, const std::vector<bool>& mask) {
  if (scores.value().size() != mask.size()) {
    throw DimensionError("masked_softmax: " + std::to_string(mask.size()) + " mask entries for " +
                         scores.value().shape_str());
  }
  Tensor m(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? 1.0 : 0.0;
  if (scores.rows() == 1) return masked_row_softmax(scores, m, false);
  Var flat = reshape(scores, 1, scores.value().size());
  return reshape(masked_row_softmax(flat, Tensor(1, m.size(), m.storage()), false), scores.rows(),
                 scores.cols());
}

/// sum_ij weight_ij * BCE(target_ij, sigmoid(logits_ij)), computed from the
/// logits so that log(0) never occurs.
inline Var bce_with_logits(const Var& logits, const Tensor& target, const Tensor& weight) {
  const Tensor& l = logits.value();
  if (!l.same_shape(target) || !l.same_shape(weight)) {
    throw DimensionError("bce_with_logits: shape mismatch " + detail::shapes(l, target));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    if (weight[i] == 0.0) continue;
    const double a = target[i];
    double e;
    if (a == 1.0) {
      e = scalar::softplus(-l[i]);
    } else if (a == 0.0) {
      e = scalar::softplus(l[i]);
    } else {
      e = scalar::softplus(l[i]) - a * l[i];
    }
    total += weight[i] * e;
  }
  return Var::from_op(Tensor::scalar(total), {logits}, [target, weight](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    const double g = n.grad[0];
    for (std::size_t i = 0; i < in.value.size(); ++i) {
      if (weight[i] == 0.0) continue;
      in.grad[i] += g * weight[i] * (scalar::sigmoid(in.value[i]) - target[i]);
    }
  });
}

/// Closed-form KL(N(mu_q, s_q^2) || N(mu_p, s_p^2)) summed over all entries
/// of diagonal Gaussians parameterized by standard deviations.
inline Var gaussian_kl(const Var& mu_q, const Var& s_q, const Var& mu_p, const Var& s_p) {
  const Tensor& mq = mu_q.value();
  const Tensor& sq = s_q.value();
  const Tensor& mp = mu_p.value();
  const Tensor& sp = s_p.value();
  if (!mq.same_shape(sq) || !mq.same_shape(mp) || !mq.same_shape(sp)) {
    throw DimensionError("gaussian_kl: shape mismatch " + detail::shapes(mq, mp));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < mq.size(); ++i) {
    if (!(sq[i] > 0.0) || !(sp[i] > 0.0)) {
      throw DomainError("gaussian_kl: non-positive standard deviation");
    }
    const double r = sq[i] / sp[i];
    const double d = (mq[i] - mp[i]) / sp[i];
    total += 0.5 * (r * r - 2.0 * std::log(r) + d * d - 1.0);
  }
  return Var::from_op(Tensor::scalar(total), {mu_q, s_q, mu_p, s_p}, [](detail::Node& n) {
    detail::Node& nmq = detail::input(n, 0);
    detail::Node& nsq = detail::input(n, 1);
    detail::Node& nmp = detail::input(n, 2);
    detail::Node& nsp = detail::input(n, 3);
    const double g = n.grad[0];
    for (std::size_t i = 0; i < nmq.value.size(); ++i) {
      const double sp = nsp.value[i];
      const double r = nsq.value[i] / sp;
      const double d = (nmq.value[i] - nmp.value[i]) / sp;
      if (nmq.requires_grad) nmq.grad[i] += g * d / sp;
      if (nmp.requires_grad) nmp.grad[i] -= g * d / sp;
      if (nsq.requires_grad) nsq.grad[i] += g * (r - 1.0 / r) / sp;
      if (nsp.requires_grad) nsp.grad[i] += g * (1.0 - r * r - d * d) / sp;
    }
  });
}

/// -log softmax(logits)[label] for a [1 x C] logit row.
inline Var softmax_cross_entropy(const Var& logits, std::size_t label) {
  const Tensor& y = logits.value();
  if (y.rows() != 1 || label >= y.cols()) {
    throw DimensionError("softmax_cross_entropy: label " + std::to_string(label) + " for logits " +
                         y.shape_str());
  }
  double mx = y[0];
  for (double v : y.values()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : y.values()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  return Var::from_op(Tensor::scalar(lse - y[label]), {logits}, [label, lse](detail::Node& n) {
    detail::Node& in = detail::input(n, 0);
    const double g = n.grad[0];
    for (std::size_t j = 0; j < in.value.size(); ++j) {
      const double p = std::exp(in.value[j] - lse);
      in.grad[j] += g * (p - (j == label ? 1.0 : 0.0));
    }
  });
}

}  // namespace dsvb
