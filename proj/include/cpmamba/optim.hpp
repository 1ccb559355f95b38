#pragma once

#include <cmath>
#include <map>
#include <utility>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpmamba/tensor.hpp"

namespace cpmamba {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct SgdSettings {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 0.0;  // global gradient-norm cap; 0 disables
};

/// SGD with classic (heavy-ball) momentum and L2 weight decay:
///   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
/// Velocity buffers are keyed by parameter name and persist across steps.
template <class T>
class Sgd {
 public:
  explicit Sgd(SgdSettings settings = {}) : settings_(settings) {}

  const SgdSettings& settings() const noexcept { return settings_; }

  void step(std::vector<NamedTensor<T>>& params) {
    for (auto& p : params) {
      if (!p.tensor.has_grad()) throw std::runtime_error("sgd_step: parameter '" + p.name + "' has no gradient");
    }
    T factor{1};
    if (settings_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto& p : params)
        for (T g : std::as_const(p.tensor).grad()) sq += static_cast<double>(g) * static_cast<double>(g);
      last_norm_ = std::sqrt(sq);
      if (last_norm_ > settings_.clip_norm) factor = static_cast<T>(settings_.clip_norm / last_norm_);
    }
    const T lr = static_cast<T>(settings_.lr);
    const T mu = static_cast<T>(settings_.momentum);
    const T wd = static_cast<T>(settings_.weight_decay);
    for (auto& p : params) {
      auto w = p.tensor.data();
      auto g = std::as_const(p.tensor).grad();
      auto& v = velocity_[p.name];
      const bool fresh = v.empty();
      if (fresh) v.assign(w.size(), T{0});
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T d = factor * g[i] + wd * w[i];
        v[i] = fresh ? d : mu * v[i] + d;
        w[i] -= lr * v[i];
      }
    }
  }

  std::map<std::string, std::vector<T>>& velocity() noexcept { return velocity_; }
  const std::map<std::string, std::vector<T>>& velocity() const noexcept { return velocity_; }
  /// Gradient norm seen by the last step (only tracked when clipping).
  double last_norm() const noexcept { return last_norm_; }

 private:
  SgdSettings settings_;
  std::map<std::string, std::vector<T>> velocity_;
  double last_norm_ = 0.0;
};

template <class T>
void zero_grads(std::vector<NamedTensor<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace cpmamba
