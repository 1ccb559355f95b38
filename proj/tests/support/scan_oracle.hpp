#pragma once

// Reference evaluation of the selective scan as an explicit lower-triangular
// operator, independent of the recurrence kernels.

#include <cmath>
#include <random>
#include <vector>

#include "cpmamba/ssm.hpp"

namespace cpmamba::testing {

struct ScanInputs {
  Tensor<double> x, delta, A, B, C, skip;
};

inline ScanInputs random_scan_inputs(std::size_t steps, std::size_t channels, std::size_t state,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> step(0.01, 0.5);
  ScanInputs in{Tensor<double>({steps, channels}), Tensor<double>({steps, channels}),
                Tensor<double>({channels, state}),  Tensor<double>({steps, state}),
                Tensor<double>({steps, state}),     Tensor<double>({channels})};
  for (auto& v : in.x.values()) v = u(rng);
  for (auto& v : in.delta.values()) v = step(rng);
  for (std::size_t d = 0; d < channels; ++d)
    for (std::size_t n = 0; n < state; ++n)
      in.A[d * state + n] = -static_cast<double>(n + 1) * (0.5 + 0.5 * (u(rng) + 1.0));
  for (auto& v : in.B.values()) v = u(rng);
  for (auto& v : in.C.values()) v = u(rng);
  for (auto& v : in.skip.values()) v = u(rng);
  return in;
}

/// y[:, d] = M_d x[:, d] with
/// M_d[t][s] = sum_n C[t,n] exp(A[d,n] * sum_{k=s+1..t} delta[k,d]) delta[s,d] B[s,n]
/// for s <= t, plus skip[d] on the diagonal.
inline std::vector<double> unrolled_scan(const ScanInputs& in) {
  const std::size_t steps = in.x.size(0), channels = in.x.size(1), state = in.A.size(1);
  std::vector<double> y(steps * channels, 0.0);
  for (std::size_t d = 0; d < channels; ++d) {
    for (std::size_t t = 0; t < steps; ++t) {
      double acc = in.skip[d] * in.x[t * channels + d];
      for (std::size_t s = 0; s <= t; ++s) {
        double elapsed = 0.0;
        for (std::size_t k = s + 1; k <= t; ++k) elapsed += in.delta[k * channels + d];
        double m = 0.0;
        for (std::size_t n = 0; n < state; ++n)
          m += in.C[t * state + n] * std::exp(in.A[d * state + n] * elapsed) *
               in.delta[s * channels + d] * in.B[s * state + n];
        acc += m * in.x[s * channels + d];
      }
      y[t * channels + d] = acc;
    }
  }
  return y;
}

}  // namespace cpmamba::testing
