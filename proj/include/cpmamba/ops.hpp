#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpmamba/tensor.hpp"

namespace cpmamba {

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Broadcasting layout of a binary op: output shape plus per-axis strides of
// each operand (zero along broadcast axes).
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;

  BroadcastPlan(const Shape& a, const Shape& b) {
    if (a == b) {
      out = a;
      same = true;
      return;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    out.assign(rank, 1);
    stride_a.assign(rank, 0);
    stride_b.assign(rank, 0);
    std::size_t sa = 1, sb = 1;
    for (std::size_t k = 0; k < rank; ++k) {
      const std::size_t axis = rank - 1 - k;
      const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
      const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
      if (da != db && da != 1 && db != 1) {
        throw DimensionError("incompatible broadcast between " + to_string(a) + " and " +
                             to_string(b));
      }
      out[axis] = std::max(da, db);
      stride_a[axis] = da == 1 ? 0 : sa;
      stride_b[axis] = db == 1 ? 0 : sb;
      sa *= da;
      sb *= db;
    }
  }

  // Calls fn(out_index, a_index, b_index) for every output element in order.
  template <class F>
  void for_each(F&& fn) const {
    const std::size_t total = numel(out);
    if (same) {
      for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
      return;
    }
    const std::size_t rank = out.size();
    std::vector<std::size_t> counter(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < total; ++i) {
      fn(i, ia, ib);
      for (std::size_t axis = rank; axis-- > 0;) {
        ++counter[axis];
        ia += stride_a[axis];
        ib += stride_b[axis];
        if (counter[axis] < out[axis]) break;
        ia -= stride_a[axis] * out[axis];
        ib -= stride_b[axis] * out[axis];
        counter[axis] = 0;
      }
    }
  }
};

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::BroadcastPlan plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = da[ia] + db[ib]; });
  detail::record(out, {&a, &b}, [a, b, out, plan]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    if (a.requires_grad()) {
      auto ga = a.grad();
      plan.for_each([&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      plan.for_each([&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::BroadcastPlan plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = da[ia] - db[ib]; });
  detail::record(out, {&a, &b}, [a, b, out, plan]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    if (a.requires_grad()) {
      auto ga = a.grad();
      plan.for_each([&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      plan.for_each([&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= g[i]; });
    }
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::BroadcastPlan plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = da[ia] * db[ib]; });
  detail::record(out, {&a, &b}, [a, b, out, plan]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto da = std::as_const(a).data();
    auto db = std::as_const(b).data();
    if (a.requires_grad()) {
      auto ga = a.grad();
      plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * db[ib]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * da[ia]; });
    }
  });
  return out;
}

/// alpha * a + beta * b for equal shapes.
template <class T>
Tensor<T> axpby(T alpha, const Tensor<T>& a, T beta, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("axpby shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * da[i] + beta * db[i];
  detail::record(out, {&a, &b}, [a, b, out, alpha, beta]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto dx = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * dx[i];
  detail::record(out, {&x}, [x, out, factor]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary ops. The adjoint is expressed through the forward input
// and output values.

namespace detail {

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto dx = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(dx[i]);
  detail::record(out, {&x}, [x, out, deriv]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto xv = std::as_const(x).data();
    auto ov = std::as_const(out).data();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], ov[i]);
  });
  return out;
}

template <class T>
T sigmoid_value(T v) {
  if (v >= T{0}) {
    const T z = std::exp(-v);
    return T{1} / (T{1} + z);
  }
  const T z = std::exp(v);
  return z / (T{1} + z);
}

template <class T>
T softplus_value(T v) {
  // log(1 + e^v) without overflow
  return v > T{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

}  // namespace detail

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid_value(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::softplus_value(v); },
      [](T v, T) { return detail::sigmoid_value(v); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc{0};
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::record(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_values()[0];
    for (T& v : x.grad()) v += g;
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Dense linear algebra.

/// (m,k) x (k,n) -> (m,n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError("matmul shape mismatch " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto n = static_cast<Eigen::Index>(b.size(1));
  Tensor<T> out({a.size(0), b.size(1)});
  detail::MatMap<T>(out.data().data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  detail::record(out, {&a, &b}, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    detail::ConstMatMap<T> g(out.grad_values().data(), m, n);
    if (a.requires_grad()) {
      detail::MatMap<T>(a.grad().data(), m, k).noalias() +=
          g * detail::ConstMatMap<T>(std::as_const(b).data().data(), k, n).transpose();
    }
    if (b.requires_grad()) {
      detail::MatMap<T>(b.grad().data(), k, n).noalias() +=
          detail::ConstMatMap<T>(std::as_const(a).data().data(), m, k).transpose() * g;
    }
  });
  return out;
}

/// x (n,in) times weight (in,out) plus optional bias (out).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (x.dim() != 2 || weight.dim() != 2 || x.size(1) != weight.size(0)) {
    throw DimensionError("linear shape mismatch " + to_string(x.shape()) + " x " +
                         to_string(weight.shape()));
  }
  if (bias != nullptr && (bias->dim() != 1 || bias->size(0) != weight.size(1))) {
    throw DimensionError("linear bias shape " + to_string(bias->shape()));
  }
  const auto n = static_cast<Eigen::Index>(x.size(0));
  const auto in = static_cast<Eigen::Index>(x.size(1));
  const auto outd = static_cast<Eigen::Index>(weight.size(1));
  Tensor<T> out({x.size(0), weight.size(1)});
  detail::MatMap<T> o(out.data().data(), n, outd);
  o.noalias() = detail::ConstMatMap<T>(x.data().data(), n, in) *
                detail::ConstMatMap<T>(weight.data().data(), in, outd);
  Tensor<T> b = bias != nullptr ? *bias : Tensor<T>();
  if (bias != nullptr) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias->data().data(), outd);
    o.rowwise() += bv;
  }
  const bool has_bias = bias != nullptr;
  detail::record(out, {&x, &weight, bias}, [x, weight, b, has_bias, out, n, in, outd]() mutable {
    if (!out.has_grad()) return;
    detail::ConstMatMap<T> g(out.grad_values().data(), n, outd);
    if (x.requires_grad()) {
      detail::MatMap<T>(x.grad().data(), n, in).noalias() +=
          g * detail::ConstMatMap<T>(std::as_const(weight).data().data(), in, outd).transpose();
    }
    if (weight.requires_grad()) {
      detail::MatMap<T>(weight.grad().data(), in, outd).noalias() +=
          detail::ConstMatMap<T>(std::as_const(x).data().data(), n, in).transpose() * g;
    }
    if (has_bias && b.requires_grad()) {
      auto gb = b.grad();
      const T* gp = out.grad_values().data();
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < outd; ++c) gb[static_cast<std::size_t>(c)] += gp[r * outd + c];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout ops. Every rearrangement is a gather over flat indices; its adjoint
// scatters back with accumulation, so repeated indices (upsampling) work.

using IndexMap = std::shared_ptr<const std::vector<std::uint32_t>>;

template <class T>
Tensor<T> gather(const Tensor<T>& x, IndexMap index, Shape out_shape) {
  if (index->size() != numel(out_shape)) {
    throw DimensionError("gather index length does not match output shape " + to_string(out_shape));
  }
  Tensor<T> out(std::move(out_shape));
  auto o = out.data();
  auto src = x.data();
  const auto& idx = *index;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = src[idx[i]];
  detail::record(out, {&x}, [x, out, index]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto gx = x.grad();
    const auto& idx = *index;
    for (std::size_t i = 0; i < g.size(); ++i) gx[idx[i]] += g[i];
  });
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.values());
  detail::record(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    detail::accumulate<T>(x.grad(), out.grad_values());
  });
  return out;
}

/// (m,n) -> (n,m).
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.dim() != 2) throw DimensionError("transpose expects a matrix, got " + to_string(x.shape()));
  const auto m = static_cast<Eigen::Index>(x.size(0));
  const auto n = static_cast<Eigen::Index>(x.size(1));
  Tensor<T> out({x.size(1), x.size(0)});
  detail::MatMap<T>(out.data().data(), n, m) =
      detail::ConstMatMap<T>(x.data().data(), m, n).transpose();
  detail::record(out, {&x}, [x, out, m, n]() mutable {
    if (!out.has_grad()) return;
    detail::MatMap<T>(x.grad().data(), m, n) +=
        detail::ConstMatMap<T>(out.grad_values().data(), n, m).transpose();
  });
  return out;
}

/// Concatenates along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  if (a.dim() != b.dim() || axis >= a.dim()) {
    throw DimensionError("concat rank mismatch " + to_string(a.shape()) + ", " + to_string(b.shape()));
  }
  Shape shape = a.shape();
  for (std::size_t k = 0; k < a.dim(); ++k) {
    if (k != axis && a.size(k) != b.size(k)) {
      throw DimensionError("concat extent mismatch " + to_string(a.shape()) + ", " +
                           to_string(b.shape()));
    }
  }
  shape[axis] = a.size(axis) + b.size(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= shape[k];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) inner *= shape[k];
  const std::size_t ca = a.size(axis) * inner, cb = b.size(axis) * inner;
  Tensor<T> out(std::move(shape));
  auto o = out.data();
  auto da = a.data();
  auto db = b.data();
  for (std::size_t r = 0; r < outer; ++r) {
    std::copy_n(da.begin() + r * ca, ca, o.begin() + r * (ca + cb));
    std::copy_n(db.begin() + r * cb, cb, o.begin() + r * (ca + cb) + ca);
  }
  detail::record(out, {&a, &b}, [a, b, out, outer, ca, cb]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t i = 0; i < ca; ++i) ga[r * ca + i] += g[r * (ca + cb) + i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t i = 0; i < cb; ++i) gb[r * cb + i] += g[r * (ca + cb) + ca + i];
    }
  });
  return out;
}

/// out[k, :] = x[rows[k], :] for a matrix x.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.dim() != 2) throw DimensionError("gather_rows expects a matrix, got " + to_string(x.shape()));
  const std::size_t width = x.size(1);
  auto order = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (std::size_t r : *order) {
    if (r >= x.size(0)) throw DimensionError("gather_rows index out of range");
  }
  Tensor<T> out({order->size(), width});
  auto o = out.data();
  auto src = x.data();
  for (std::size_t k = 0; k < order->size(); ++k)
    std::copy_n(src.begin() + (*order)[k] * width, width, o.begin() + k * width);
  detail::record(out, {&x}, [x, out, order, width]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto gx = x.grad();
    for (std::size_t k = 0; k < order->size(); ++k) {
      const std::size_t base = (*order)[k] * width;
      for (std::size_t j = 0; j < width; ++j) gx[base + j] += g[k * width + j];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization.

/// Row-wise layer normalization of an (n, d) matrix with affine gain/shift.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                     T eps = T{1e-5}) {
  if (x.dim() != 2 || gain.numel() != x.size(1) || shift.numel() != x.size(1)) {
    throw DimensionError("layer_norm shape mismatch " + to_string(x.shape()));
  }
  const std::size_t n = x.size(0), d = x.size(1);
  Tensor<T> out(x.shape());
  auto normalized = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(n);
  auto xv = x.data();
  auto o = out.data();
  auto gv = gain.data();
  auto sv = shift.data();
  for (std::size_t r = 0; r < n; ++r) {
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T istd = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = istd;
    for (std::size_t j = 0; j < d; ++j) {
      const T xhat = (xv[r * d + j] - mu) * istd;
      (*normalized)[r * d + j] = xhat;
      o[r * d + j] = xhat * gv[j] + sv[j];
    }
  }
  detail::record(out, {&x, &gain, &shift}, [x, gain, shift, out, normalized, inv_std, n, d]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    const auto& xhat = *normalized;
    auto gv = std::as_const(gain).data();
    if (gain.requires_grad()) {
      auto gg = gain.grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
    }
    if (shift.requires_grad()) {
      auto gs = shift.grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) gs[j] += g[r * d + j];
    }
    if (x.requires_grad()) {
      auto gx = x.grad();
      for (std::size_t r = 0; r < n; ++r) {
        T mean_g{0}, mean_gx{0};
        for (std::size_t j = 0; j < d; ++j) {
          const T gh = g[r * d + j] * gv[j];
          mean_g += gh;
          mean_gx += gh * xhat[r * d + j];
        }
        mean_g /= static_cast<T>(d);
        mean_gx /= static_cast<T>(d);
        const T istd = (*inv_std)[r];
        for (std::size_t j = 0; j < d; ++j) {
          const T gh = g[r * d + j] * gv[j];
          gx[r * d + j] += istd * (gh - mean_g - xhat[r * d + j] * mean_gx);
        }
      }
    }
  });
  return out;
}

}  // namespace cpmamba
