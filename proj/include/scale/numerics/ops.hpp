// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "scale/numerics/autodiff.hpp"

// Differentiable primitives. Every op treats its inputs as 2-D (leading axes
// folded into rows). Outputs are checked for finiteness.
namespace scale::ops {

namespace detail {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat view(const Tensor& t) {
  return ConstMapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MapMat view(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline bool wants(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }
inline Tensor& g(Node& n, std::size_t i) { return n.inputs[i]->grad_buffer(); }

inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  using namespace detail;
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  view(out).noalias() = view(a.value()) * view(b.value());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (wants(n, 0)) view(g(n, 0)).noalias() += view(n.grad) * view(bv).transpose();
    if (wants(n, 1)) view(g(n, 1)).noalias() += view(av).transpose() * view(n.grad);
  }, "matmul");
}

// x [n x in] * W [in x out] + b [out]
inline Var linear(const Var& x, const Var& w, const Var& b) {
  using namespace detail;
  if (x.cols() != w.rows() || b.value().size() != w.cols()) {
    throw ShapeError("linear: shapes " + shape_string(x.shape()) + ", " + shape_string(w.shape()) + ", " +
                     shape_string(b.shape()));
  }
  Tensor out({x.rows(), w.cols()});
  auto o = view(out);
  o.noalias() = view(x.value()) * view(w.value());
  Eigen::Map<const Eigen::Matrix<real, 1, Eigen::Dynamic>> bias(b.value().data(),
                                                                static_cast<Eigen::Index>(w.cols()));
  o.rowwise() += bias;
  return make_result(std::move(out), {x, w, b}, [](Node& n) {
    const auto gout = view(n.grad);
    if (wants(n, 0)) view(g(n, 0)).noalias() += gout * view(n.inputs[1]->value).transpose();
    if (wants(n, 1)) view(g(n, 1)).noalias() += view(n.inputs[0]->value).transpose() * gout;
    if (wants(n, 2)) {
      Tensor& gb = g(n, 2);
      Eigen::Map<Eigen::Matrix<real, 1, Eigen::Dynamic>> gbias(gb.data(), static_cast<Eigen::Index>(gb.size()));
      gbias += gout.colwise().sum();
    }
  }, "linear");
}

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      Tensor& gk = detail::g(n, k);
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += n.grad[i];
    }
  }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (detail::wants(n, 0)) {
      Tensor& ga = detail::g(n, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& gb = detail::g(n, 1);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
    }
  }, "sub");
}

// Element-wise product.
inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (detail::wants(n, 0)) {
      Tensor& ga = detail::g(n, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * bv[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& gb = detail::g(n, 1);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * av[i];
    }
  }, "mul");
}

inline Var scale(const Var& a, real c) {
  Tensor out = a.value();
  for (real& v : out.storage()) v *= c;
  return make_result(std::move(out), {a}, [c](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += c * n.grad[i];
  }, "scale");
}

// a [n x m] + v broadcast over rows (v has m values).
inline Var add_rowvec(const Var& a, const Var& v) {
  const std::size_t m = a.cols();
  if (v.value().size() != m) {
    throw ShapeError("add_rowvec: " + shape_string(a.shape()) + " + " + shape_string(v.shape()));
  }
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < m; ++c) out.at(r, c) += v.value()[c];
  }
  return make_result(std::move(out), {a, v}, [m](Node& n) {
    if (detail::wants(n, 0)) {
      Tensor& ga = detail::g(n, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    }
    if (detail::wants(n, 1)) {
      Tensor& gv = detail::g(n, 1);
      for (std::size_t r = 0; r < n.grad.rows(); ++r) {
        for (std::size_t c = 0; c < m; ++c) gv[c] += n.grad.at(r, c);
      }
    }
  }, "add_rowvec");
}

inline Var sum(const Var& a) {
  real s = 0;
  for (real v : a.value().values()) s += v;
  return make_result(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& ga = detail::g(n, 0);
    const real gs = n.grad[0];
    for (real& v : ga.storage()) v += gs;
  }, "sum");
}

inline Var mean(const Var& a) {
  const real count = static_cast<real>(a.value().size());
  real s = 0;
  for (real v : a.value().values()) s += v;
  return make_result(Tensor::scalar(s / count), {a}, [count](Node& n) {
    Tensor& ga = detail::g(n, 0);
    const real gs = n.grad[0] / count;
    for (real& v : ga.storage()) v += gs;
  }, "mean");
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
  }, "reshape");
}

// Softmax over the last axis.
inline Var softmax(const Var& a) {
  Tensor out = a.value();
  const std::size_t m = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const real mx = *std::max_element(row.begin(), row.end());
    real z = 0;
    for (real& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (real& v : row) v /= z;
  }
  return make_result(out, {a}, [out, m](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      real dot = 0;
      for (std::size_t c = 0; c < m; ++c) dot += n.grad.at(r, c) * out.at(r, c);
      for (std::size_t c = 0; c < m; ++c) ga.at(r, c) += out.at(r, c) * (n.grad.at(r, c) - dot);
    }
  }, "softmax");
}

inline constexpr real kLayerNormEps = 1e-5;

// Per-row normalization followed by the affine gamma/beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps = kLayerNormEps) {
  const std::size_t m = x.cols();
  if (gamma.value().size() != m || beta.value().size() != m) {
    throw ShapeError("layer_norm: affine size does not match " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  Tensor normed({rows, m});
  std::vector<real> inv_std(rows);
  Tensor out({rows, m});
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r);
    real mu = 0;
    for (real v : in) mu += v;
    mu /= static_cast<real>(m);
    real var = 0;
    for (real v : in) var += (v - mu) * (v - mu);
    var /= static_cast<real>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) {
      normed.at(r, c) = (in[c] - mu) * inv_std[r];
      out.at(r, c) = normed.at(r, c) * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [normed, inv_std, m](Node& n) {
    const Tensor& gam = n.inputs[1]->value;
    const std::size_t rows = normed.rows();
    if (detail::wants(n, 0)) {
      Tensor& gx = detail::g(n, 0);
      for (std::size_t r = 0; r < rows; ++r) {
        real sum_g = 0, sum_gx = 0;
        for (std::size_t c = 0; c < m; ++c) {
          const real gy = n.grad.at(r, c) * gam[c];
          sum_g += gy;
          sum_gx += gy * normed.at(r, c);
        }
        const real inv_m = 1.0 / static_cast<real>(m);
        for (std::size_t c = 0; c < m; ++c) {
          const real gy = n.grad.at(r, c) * gam[c];
          gx.at(r, c) += inv_std[r] * (gy - inv_m * sum_g - normed.at(r, c) * inv_m * sum_gx);
        }
      }
    }
    if (detail::wants(n, 1)) {
      Tensor& gg = detail::g(n, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < m; ++c) gg[c] += n.grad.at(r, c) * normed.at(r, c);
    }
    if (detail::wants(n, 2)) {
      Tensor& gb = detail::g(n, 2);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += n.grad.at(r, c);
    }
  }, "layer_norm");
}

// Exact (erf) GELU.
inline Var gelu(const Var& a) {
  Tensor out = a.value();
  constexpr real inv_sqrt2 = 0.70710678118654752440;
  for (real& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return make_result(std::move(out), {a}, [](Node& n) {
    constexpr real inv_sqrt2 = 0.70710678118654752440;
    constexpr real inv_sqrt2pi = 0.39894228040143267794;
    const Tensor& x = n.inputs[0]->value;
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const real cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
      const real pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += n.grad[i] * (cdf + x[i] * pdf);
    }
  }, "gelu");
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (real& v : out.storage()) v = v > 0 ? v : 0;
  return make_result(std::move(out), {a}, [](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += x[i] > 0 ? n.grad[i] : 0;
  }, "relu");
}

// Row lookup into an embedding table [vocab x dim].
inline Var embedding(const Var& table, const std::vector<std::int64_t>& ids) {
  const std::size_t vocab = table.rows();
  const std::size_t dim = table.cols();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out({ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
    auto src = table.value().row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return make_result(std::move(out), {table}, [ids, dim](Node& n) {
    Tensor& gt = detail::g(n, 0);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (std::size_t c = 0; c < dim; ++c) gt.at(static_cast<std::size_t>(ids[r]), c) += n.grad.at(r, c);
    }
  }, "embedding");
}

// Stacks inputs with equal column counts along rows.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != m) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out({total, m});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.storage().begin() + offset * m);
    offset += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    std::size_t offset = 0;
    const std::size_t m = n.grad.cols();
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t r = n.inputs[k]->value.rows();
      if (n.inputs[k]->requires_grad) {
        Tensor& gk = n.inputs[k]->grad_buffer();
        for (std::size_t i = 0; i < r * m; ++i) gk[i] += n.grad[offset * m + i];
      }
      offset += r;
    }
  }, "concat_rows");
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_string(a.shape()));
  }
  const std::size_t m = a.cols();
  Tensor out({end - begin, m});
  std::copy(a.value().storage().begin() + begin * m, a.value().storage().begin() + end * m,
            out.storage().begin());
  return make_result(std::move(out), {a}, [begin, m](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) ga[begin * m + i] += n.grad[i];
  }, "slice_rows");
}

// out[r] = a[index[r]], or a zero row where index[r] < 0.
inline Var gather_rows(const Var& a, const std::vector<std::int64_t>& index) {
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  const std::size_t m = a.cols();
  Tensor out({index.size(), m});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    if (static_cast<std::size_t>(index[r]) >= a.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = a.value().row(static_cast<std::size_t>(index[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return make_result(std::move(out), {a}, [index, m](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (index[r] < 0) continue;
      const std::size_t src = static_cast<std::size_t>(index[r]);
      for (std::size_t c = 0; c < m; ++c) ga.at(src, c) += n.grad.at(r, c);
    }
  }, "gather_rows");
}

// Zeroes rows where keep[r] is false; gradients through those rows are cut.
inline Var mask_rows(const Var& a, const std::vector<bool>& keep) {
  if (keep.size() != a.rows()) throw ShapeError("mask_rows: mask length does not match rows");
  Tensor out = a.value();
  const std::size_t m = a.cols();
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (!keep[r]) std::fill(out.row(r).begin(), out.row(r).end(), 0.0);
  }
  return make_result(std::move(out), {a}, [keep, m](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      if (!keep[r]) continue;
      for (std::size_t c = 0; c < m; ++c) ga.at(r, c) += n.grad.at(r, c);
    }
  }, "mask_rows");
}

// out[g] = mean of a's rows listed in groups[g]; empty groups give zero rows.
inline Var pool_rows(const Var& a, const std::vector<std::vector<std::size_t>>& groups) {
  if (groups.empty()) throw ShapeError("pool_rows: no groups");
  const std::size_t m = a.cols();
  Tensor out({groups.size(), m});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].empty()) continue;
    const real w = 1.0 / static_cast<real>(groups[gi].size());
    for (std::size_t r : groups[gi]) {
      for (std::size_t c = 0; c < m; ++c) out.at(gi, c) += w * a.value().at(r, c);
    }
  }
  return make_result(std::move(out), {a}, [groups, m](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (groups[gi].empty()) continue;
      const real w = 1.0 / static_cast<real>(groups[gi].size());
      for (std::size_t r : groups[gi])
        for (std::size_t c = 0; c < m; ++c) ga.at(r, c) += w * n.grad.at(gi, c);
    }
  }, "pool_rows");
}

// Mean negative log-likelihood of softmax(logits) at the target columns.
inline Var cross_entropy(const Var& logits, const std::vector<std::int64_t>& targets) {
  const std::size_t rows = logits.rows();
  const std::size_t m = logits.cols();
  if (targets.size() != rows) throw ShapeError("cross_entropy: target count does not match rows");
  Tensor probs({rows, m});
  real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= m) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside " +
                              std::to_string(m) + " classes");
    }
    auto in = logits.value().row(r);
    const real mx = *std::max_element(in.begin(), in.end());
    real z = 0;
    for (std::size_t c = 0; c < m; ++c) {
      probs.at(r, c) = std::exp(in[c] - mx);
      z += probs.at(r, c);
    }
    for (std::size_t c = 0; c < m; ++c) probs.at(r, c) /= z;
    total += -(in[static_cast<std::size_t>(targets[r])] - mx - std::log(z));
  }
  const real inv_rows = 1.0 / static_cast<real>(rows);
  return make_result(Tensor::scalar(total * inv_rows), {logits}, [probs, targets, inv_rows](Node& n) {
    Tensor& gl = detail::g(n, 0);
    const real gs = n.grad[0] * inv_rows;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      for (std::size_t c = 0; c < probs.cols(); ++c) {
        const real onehot = static_cast<std::int64_t>(c) == targets[r] ? 1.0 : 0.0;
        gl.at(r, c) += gs * (probs.at(r, c) - onehot);
      }
    }
  }, "cross_entropy");
}

// Mean over all elements of (pred - target)^2.
inline Var squared_error(const Var& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("squared_error: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  const real count = static_cast<real>(target.size());
  real total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const real d = pred.value()[i] - target[i];
    total += d * d;
  }
  return make_result(Tensor::scalar(total / count), {pred}, [target, count](Node& n) {
    Tensor& gp = detail::g(n, 0);
    const Tensor& p = n.inputs[0]->value;
    const real gs = 2.0 * n.grad[0] / count;
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gs * (p[i] - target[i]);
  }, "squared_error");
}

// Smooth-L1 (Huber, delta 1), mean over elements.
inline Var smooth_l1(const Var& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) throw ShapeError("smooth_l1: shape mismatch");
  const real count = static_cast<real>(target.size());
  real total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const real d = std::abs(pred.value()[i] - target[i]);
    total += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return make_result(Tensor::scalar(total / count), {pred}, [target, count](Node& n) {
    Tensor& gp = detail::g(n, 0);
    const Tensor& p = n.inputs[0]->value;
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const real d = p[i] - target[i];
      gp[i] += n.grad[0] / count * (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
    }
  }, "smooth_l1");
}

inline Var dropout(const Var& a, real rate, std::mt19937_64& rng) {
  if (rate <= 0.0 || !grad_enabled()) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const real s = 1.0 / (1.0 - rate);
  std::vector<real> mask(a.value().size());
  for (real& m : mask) m = keep(rng) ? s : 0.0;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_result(std::move(out), {a}, [mask](Node& n) {
    Tensor& ga = detail::g(n, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * mask[i];
  }, "dropout");
}

// Row grouping of a padded [batch * seq x hidden] token matrix.
struct SeqLayout {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<bool> valid;  // batch * seq; false at padding and absent positions

  std::size_t rows() const { return batch * seq; }
  std::size_t row(std::size_t b, std::size_t t) const { return b * seq + t; }
};

// Multi-head scaled dot-product self-attention over each sample's sequence.
// Invalid keys are skipped; invalid query rows (and queries with no valid
// key) produce zero output.
inline Var attention(const Var& q, const Var& k, const Var& v, const SeqLayout& layout, std::size_t heads) {
  const std::size_t hidden = q.cols();
  if (q.shape() != k.shape() || q.shape() != v.shape() || q.rows() != layout.rows() ||
      layout.valid.size() != layout.rows()) {
    throw ShapeError("attention: q/k/v/layout mismatch");
  }
  if (heads == 0 || hidden % heads != 0) throw ShapeError("attention: hidden not divisible by heads");
  const std::size_t dh = hidden / heads;
  const std::size_t S = layout.seq;
  const real inv_sqrt = 1.0 / std::sqrt(static_cast<real>(dh));
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();

  // probs[b][h][i][j], zero where invalid
  std::vector<real> probs(layout.batch * heads * S * S, 0.0);
  Tensor out({layout.rows(), hidden});
  std::vector<std::size_t> keys;
  keys.reserve(S);
  std::vector<real> scores(S);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    keys.clear();
    for (std::size_t j = 0; j < S; ++j) {
      if (layout.valid[layout.row(b, j)]) keys.push_back(j);
    }
    if (keys.empty()) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t qi = layout.row(b, i);
        if (!layout.valid[qi]) continue;
        const real* qrow = Q.data() + qi * hidden + off;
        real mx = -1e300;
        for (std::size_t kk = 0; kk < keys.size(); ++kk) {
          const real* krow = K.data() + layout.row(b, keys[kk]) * hidden + off;
          real s = 0;
          for (std::size_t d = 0; d < dh; ++d) s += qrow[d] * krow[d];
          scores[kk] = s * inv_sqrt;
          mx = std::max(mx, scores[kk]);
        }
        real z = 0;
        for (std::size_t kk = 0; kk < keys.size(); ++kk) {
          scores[kk] = std::exp(scores[kk] - mx);
          z += scores[kk];
        }
        real* prow = probs.data() + ((b * heads + h) * S + i) * S;
        real* orow = out.data() + qi * hidden + off;
        for (std::size_t kk = 0; kk < keys.size(); ++kk) {
          const real p = scores[kk] / z;
          prow[keys[kk]] = p;
          const real* vrow = V.data() + layout.row(b, keys[kk]) * hidden + off;
          for (std::size_t d = 0; d < dh; ++d) orow[d] += p * vrow[d];
        }
      }
    }
  }

  return make_result(std::move(out), {q, k, v},
                     [probs = std::move(probs), layout, heads, dh, hidden, S, inv_sqrt](Node& n) {
    const Tensor& Q = n.inputs[0]->value;
    const Tensor& K = n.inputs[1]->value;
    const Tensor& V = n.inputs[2]->value;
    Tensor* gq = detail::wants(n, 0) ? &detail::g(n, 0) : nullptr;
    Tensor* gk = detail::wants(n, 1) ? &detail::g(n, 1) : nullptr;
    Tensor* gv = detail::wants(n, 2) ? &detail::g(n, 2) : nullptr;
    std::vector<real> dp(S);
    for (std::size_t b = 0; b < layout.batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < S; ++i) {
          const std::size_t qi = layout.row(b, i);
          if (!layout.valid[qi]) continue;
          const real* prow = probs.data() + ((b * heads + h) * S + i) * S;
          const real* go = n.grad.data() + qi * hidden + off;
          // dP_ij = go . v_j ; dS_ij = P_ij (dP_ij - sum_j P_ij dP_ij)
          real dot = 0;
          for (std::size_t j = 0; j < S; ++j) {
            if (prow[j] == 0.0) {
              dp[j] = 0;
              continue;
            }
            const std::size_t vj = layout.row(b, j);
            const real* vrow = V.data() + vj * hidden + off;
            real s = 0;
            for (std::size_t d = 0; d < dh; ++d) s += go[d] * vrow[d];
            dp[j] = s;
            dot += prow[j] * s;
            if (gv) {
              real* gvrow = gv->data() + vj * hidden + off;
              for (std::size_t d = 0; d < dh; ++d) gvrow[d] += prow[j] * go[d];
            }
          }
          const real* qrow = Q.data() + qi * hidden + off;
          for (std::size_t j = 0; j < S; ++j) {
            if (prow[j] == 0.0) continue;
            const real ds = prow[j] * (dp[j] - dot) * inv_sqrt;
            const std::size_t kj = layout.row(b, j);
            if (gq) {
              real* gqrow = gq->data() + qi * hidden + off;
              const real* krow = K.data() + kj * hidden + off;
              for (std::size_t d = 0; d < dh; ++d) gqrow[d] += ds * krow[d];
            }
            if (gk) {
              real* gkrow = gk->data() + kj * hidden + off;
              for (std::size_t d = 0; d < dh; ++d) gkrow[d] += ds * qrow[d];
            }
          }
        }
      }
    }
  }, "attention");
}

}  // namespace scale::ops
