#pragma once

#include <algorithm>
#include <cmath>
#include <tuple>
#include <type_traits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "cpmamba/ops.hpp"

namespace cpmamba {

enum class LossKind { binary_ce_multilabel, softmax_ce, dice };

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t classes) {
  for (int v : labels) {
    if (v < 0 || static_cast<std::size_t>(v) >= classes) {
      throw std::invalid_argument("class label " + std::to_string(v) + " outside [0, " +
                                  std::to_string(classes) + ")");
    }
  }
}

// (batch, classes, spatial...) -> batch, classes, spatial size.
template <class T>
std::tuple<std::size_t, std::size_t, std::size_t> class_layout(const Tensor<T>& x) {
  if (x.dim() < 2) throw DimensionError("expected (batch, classes, ...) tensor, got " + to_string(x.shape()));
  return {x.size(0), x.size(1), x.numel() / (x.size(0) * x.size(1))};
}

}  // namespace detail

/// Mean binary cross-entropy between probabilities and {0,1} (or soft) targets.
/// Probabilities are clamped to [eps, 1 - eps].
template <class T>
Tensor<T> binary_cross_entropy(const Tensor<T>& prob, const Tensor<T>& target,
                               T eps = std::is_same_v<T, float> ? T{1e-7} : T{1e-12}) {
  if (prob.shape() != target.shape()) {
    throw DimensionError("binary_cross_entropy shape mismatch " + to_string(prob.shape()) + " vs " +
                         to_string(target.shape()));
  }
  if (prob.numel() == 0) throw DimensionError("binary_cross_entropy on empty tensor");
  auto p = prob.data();
  auto y = target.data();
  for (T v : y) {
    if (!(v >= T{0} && v <= T{1})) throw std::invalid_argument("binary target outside [0, 1]");
  }
  const T inv_n = T{1} / static_cast<T>(p.size());
  T acc{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T q = std::clamp(p[i], eps, T{1} - eps);
    acc -= y[i] * std::log(q) + (T{1} - y[i]) * std::log(T{1} - q);
  }
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  detail::record(out, {&prob}, [prob, target, out, eps, inv_n]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_values()[0] * inv_n;
    auto p = std::as_const(prob).data();
    auto y = std::as_const(target).data();
    auto gp = prob.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] < eps || p[i] > T{1} - eps) continue;  // clamped: zero slope
      gp[i] += g * (p[i] - y[i]) / (p[i] * (T{1} - p[i]));
    }
  });
  return out;
}

/// Softmax over axis 1 of a (batch, classes, ...) tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const auto [batch, classes, spatial] = detail::class_layout(logits);
  Tensor<T> out(logits.shape());
  auto x = logits.data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t base = b * classes * spatial + s;
      T mx = x[base];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, x[base + c * spatial]);
      T z{0};
      for (std::size_t c = 0; c < classes; ++c) {
        const T e = std::exp(x[base + c * spatial] - mx);
        o[base + c * spatial] = e;
        z += e;
      }
      for (std::size_t c = 0; c < classes; ++c) o[base + c * spatial] /= z;
    }
  }
  detail::record(out, {&logits}, [logits, out, batch, classes, spatial]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto y = std::as_const(out).data();
    auto gx = logits.grad();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t base = b * classes * spatial + s;
        T dot{0};
        for (std::size_t c = 0; c < classes; ++c) dot += g[base + c * spatial] * y[base + c * spatial];
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t i = base + c * spatial;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
  return out;
}

/// Mean cross-entropy of softmax(logits) over axis 1 against integer labels
/// laid out as (batch, spatial...).
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const auto [batch, classes, spatial] = detail::class_layout(logits);
  if (labels.size() != batch * spatial) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + to_string(logits.shape()));
  }
  detail::check_labels(labels, classes);
  auto x = logits.data();
  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  T acc{0};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t base = b * classes * spatial + s;
      T mx = x[base];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, x[base + c * spatial]);
      T z{0};
      for (std::size_t c = 0; c < classes; ++c) {
        const T e = std::exp(x[base + c * spatial] - mx);
        (*probs)[base + c * spatial] = e;
        z += e;
      }
      for (std::size_t c = 0; c < classes; ++c) (*probs)[base + c * spatial] /= z;
      const std::size_t label = static_cast<std::size_t>(labels[b * spatial + s]);
      acc -= x[base + label * spatial] - mx - std::log(z);
    }
  }
  const T inv_n = T{1} / static_cast<T>(batch * spatial);
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  detail::record(out, {&logits}, [=]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_values()[0] * inv_n;
    auto gx = logits.grad();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t base = b * classes * spatial + s;
        const std::size_t label = static_cast<std::size_t>((*label_copy)[b * spatial + s]);
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t i = base + c * spatial;
          gx[i] += g * ((*probs)[i] - (c == label ? T{1} : T{0}));
        }
      }
    }
  });
  return out;
}

/// 1 - mean over classes of (2|P.G| + s) / (|P| + |G| + s), with sums taken
/// over batch and space. probs: (batch, classes, spatial...).
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, std::span<const int> labels, T smooth = T{1}) {
  const auto [batch, classes, spatial] = detail::class_layout(probs);
  if (labels.size() != batch * spatial) {
    throw DimensionError("dice_loss: " + std::to_string(labels.size()) + " labels for " +
                         to_string(probs.shape()));
  }
  detail::check_labels(labels, classes);
  auto p = probs.data();
  auto inter = std::make_shared<std::vector<T>>(classes, T{0});
  auto denom = std::make_shared<std::vector<T>>(classes, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t s = 0; s < spatial; ++s) {
        const T pv = p[(b * classes + c) * spatial + s];
        const bool hit = static_cast<std::size_t>(labels[b * spatial + s]) == c;
        (*inter)[c] += hit ? pv : T{0};
        (*denom)[c] += pv + (hit ? T{1} : T{0});
      }
    }
  }
  T score{0};
  for (std::size_t c = 0; c < classes; ++c)
    score += (T{2} * (*inter)[c] + smooth) / ((*denom)[c] + smooth);
  Tensor<T> out = Tensor<T>::scalar(T{1} - score / static_cast<T>(classes));
  auto label_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  detail::record(out, {&probs}, [=]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad_values()[0] / static_cast<T>(classes);
    auto gp = probs.grad();
    for (std::size_t c = 0; c < classes; ++c) {
      const T num = T{2} * (*inter)[c] + smooth;
      const T den = (*denom)[c] + smooth;
      // d/dp of -(num/den): -(2*hit*den - num) / den^2
      const T d_hit = -(T{2} * den - num) / (den * den);
      const T d_miss = num / (den * den);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t s = 0; s < spatial; ++s) {
          const bool hit = static_cast<std::size_t>((*label_copy)[b * spatial + s]) == c;
          gp[(b * classes + c) * spatial + s] += g * (hit ? d_hit : d_miss);
        }
    }
  });
  return out;
}

namespace detail {
template <class T>
std::vector<int> labels_from_tensor(const Tensor<T>& target) {
  std::vector<int> labels(target.numel());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T v = target[i];
    if (v != std::round(v)) throw std::invalid_argument("class target is not integer-valued");
    labels[i] = static_cast<int>(v);
  }
  return labels;
}
}  // namespace detail

/// Uniform entry point. For softmax_ce and dice, `target` holds integer class
/// ids shaped (batch, spatial...); for binary_ce_multilabel it matches `pred`.
template <class T>
Tensor<T> loss(LossKind kind, const Tensor<T>& pred, const Tensor<T>& target) {
  switch (kind) {
    case LossKind::binary_ce_multilabel:
      return binary_cross_entropy(pred, target);
    case LossKind::softmax_ce: {
      const auto labels = detail::labels_from_tensor(target);
      return softmax_cross_entropy(pred, std::span<const int>(labels));
    }
    case LossKind::dice: {
      const auto labels = detail::labels_from_tensor(target);
      return dice_loss(pred, std::span<const int>(labels));
    }
  }
  throw std::invalid_argument("unknown loss kind");
}

}  // namespace cpmamba
