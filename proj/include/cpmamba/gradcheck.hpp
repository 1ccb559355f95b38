#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cpmamba/tensor.hpp"

namespace cpmamba {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<input index>[<element>]" of the largest error
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double step = 1e-4;
  // Magnitudes below this floor are compared absolutely.
  double floor = 1e-5;
  // 0 = every element; otherwise a seeded sample per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 7;
};

inline double gradcheck_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients of the scalar `loss_fn()` with respect to every
/// tensor in `inputs` against central finite differences.
template <class F>
GradCheckResult check_gradients(F&& loss_fn, std::vector<Tensor<double>> inputs,
                                const GradCheckOptions& options = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  {
    GradientTape<double> tape;
    Tensor<double> loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    auto g = t.grad_values();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
  }

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  NoGradGuard<double> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    std::vector<std::size_t> elements(t.numel());
    for (std::size_t i = 0; i < elements.size(); ++i) elements[i] = i;
    if (options.max_elements_per_input != 0 && elements.size() > options.max_elements_per_input) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(options.max_elements_per_input);
      std::sort(elements.begin(), elements.end());
    }
    for (std::size_t i : elements) {
      const double saved = t[i];
      t[i] = saved + options.step;
      const double up = loss_fn().item();
      t[i] = saved - options.step;
      const double down = loss_fn().item();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = gradcheck_error(analytic[k][i], numeric, options.floor);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = std::to_string(k) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace cpmamba
