#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpmamba/ops.hpp"
#include "cpmamba/optim.hpp"

namespace cpmamba {

enum class ScanMode { sequential, parallel };

/// Zero-order-hold discretization of a diagonal SSM for one token.
template <class T>
struct Discretized {
  std::vector<T> a_bar;  // (channels, state): exp(delta_d * A_dn)
  std::vector<T> b_bar;  // (channels, state): delta_d * B_n
};

/// A: (channels, state) row-major, B: (state), delta: (channels).
template <class T>
Discretized<T> discretize(std::span<const T> A, std::span<const T> B, std::span<const T> delta) {
  const std::size_t channels = delta.size(), state = B.size();
  if (A.size() != channels * state) throw DimensionError("discretize: A must be (channels, state)");
  Discretized<T> out{std::vector<T>(A.size()), std::vector<T>(A.size())};
  for (std::size_t d = 0; d < channels; ++d) {
    if (!(delta[d] > T{0})) throw std::invalid_argument("discretize: step size must be positive");
    for (std::size_t n = 0; n < state; ++n) {
      out.a_bar[d * state + n] = std::exp(delta[d] * A[d * state + n]);
      out.b_bar[d * state + n] = delta[d] * B[n];
    }
  }
  return out;
}

/// Element of the linear recurrence h <- a*h + b.
template <class T>
struct ScanElement {
  T a{1};
  T b{0};
};

/// later o earlier: applying `earlier` then `later` to a state.
template <class T>
ScanElement<T> compose(const ScanElement<T>& later, const ScanElement<T>& earlier) {
  return {later.a * earlier.a, later.a * earlier.b + later.b};
}

namespace detail {

// h[t] = a[t] * h[t-1] + b[t], h[-1] = 0, over `lanes` independent lanes in a
// time-major (steps, lanes) layout.
template <class T>
void recurrence_sequential(const T* a, const T* b, std::size_t steps, std::size_t lanes, T* h) {
  for (std::size_t l = 0; l < lanes; ++l) h[l] = b[l];
  for (std::size_t t = 1; t < steps; ++t) {
    const T* at = a + t * lanes;
    const T* bt = b + t * lanes;
    const T* hp = h + (t - 1) * lanes;
    T* ht = h + t * lanes;
    for (std::size_t l = 0; l < lanes; ++l) ht[l] = at[l] * hp[l] + bt[l];
  }
}

// Same recurrence via a work-efficient up/down sweep over the associative
// composition. Padding uses the identity element; pairing is fixed by index.
template <class T>
void recurrence_parallel(const T* a, const T* b, std::size_t steps, std::size_t lanes, T* h) {
  std::size_t padded = 1;
  while (padded < steps) padded <<= 1;
  std::vector<T> pa(padded * lanes, T{1}), pb(padded * lanes, T{0});
  std::copy_n(a, steps * lanes, pa.begin());
  std::copy_n(b, steps * lanes, pb.begin());
  // in-place compose: element i <- element i o element j (j earlier)
  auto combine_into = [&](std::size_t i, std::size_t j) {
    T* ai = pa.data() + i * lanes;
    T* bi = pb.data() + i * lanes;
    const T* aj = pa.data() + j * lanes;
    const T* bj = pb.data() + j * lanes;
    for (std::size_t l = 0; l < lanes; ++l) {
      bi[l] = ai[l] * bj[l] + bi[l];
      ai[l] = ai[l] * aj[l];
    }
  };
  for (std::size_t s = 1; s < padded; s <<= 1)
    for (std::size_t i = 2 * s - 1; i < padded; i += 2 * s) combine_into(i, i - s);
  // down-sweep to the exclusive prefix
  std::fill_n(pa.begin() + (padded - 1) * lanes, lanes, T{1});
  std::fill_n(pb.begin() + (padded - 1) * lanes, lanes, T{0});
  std::vector<T> ta(lanes), tb(lanes);
  for (std::size_t s = padded >> 1; s >= 1; s >>= 1) {
    for (std::size_t i = 2 * s - 1; i < padded; i += 2 * s) {
      const std::size_t left = i - s;
      T* al = pa.data() + left * lanes;
      T* bl = pb.data() + left * lanes;
      T* ar = pa.data() + i * lanes;
      T* br = pb.data() + i * lanes;
      std::copy_n(al, lanes, ta.begin());
      std::copy_n(bl, lanes, tb.begin());
      std::copy_n(ar, lanes, al);
      std::copy_n(br, lanes, bl);
      // right <- left-subtree-total o prefix
      for (std::size_t l = 0; l < lanes; ++l) {
        br[l] = ta[l] * br[l] + tb[l];
        ar[l] = ta[l] * ar[l];
      }
    }
  }
  for (std::size_t t = 0; t < steps; ++t) {
    const T* at = a + t * lanes;
    const T* bt = b + t * lanes;
    const T* excl = pb.data() + t * lanes;
    T* ht = h + t * lanes;
    for (std::size_t l = 0; l < lanes; ++l) ht[l] = at[l] * excl[l] + bt[l];
  }
}

template <class T>
void recurrence(ScanMode mode, const T* a, const T* b, std::size_t steps, std::size_t lanes, T* h) {
  if (mode == ScanMode::sequential)
    recurrence_sequential(a, b, steps, lanes, h);
  else
    recurrence_parallel(a, b, steps, lanes, h);
}

}  // namespace detail

/// Selective-scan recurrence with token-dependent step, input and output maps:
///   h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,  h_0 = 0
///   y_t = C_t . h_t + skip * x_t
/// Shapes: x, delta (L, D); A (D, N); B, C (L, N); skip (D). Differentiable in
/// every input; the adjoint runs the reverse recurrence with the same mode.
template <class T>
Tensor<T> scan_recurrence(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A,
                          const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& skip,
                          ScanMode mode) {
  if (x.dim() != 2 || x.size(0) == 0) throw DimensionError("scan: input must be a non-empty (L, D) sequence");
  const std::size_t steps = x.size(0), channels = x.size(1);
  if (A.dim() != 2 || A.size(0) != channels) throw DimensionError("scan: A must be (D, N)");
  const std::size_t state = A.size(1);
  if (delta.shape() != x.shape()) throw DimensionError("scan: delta must match input shape");
  if (B.shape() != Shape{steps, state} || C.shape() != Shape{steps, state}) {
    throw DimensionError("scan: B and C must be (L, N)");
  }
  if (skip.numel() != channels) throw DimensionError("scan: skip must be (D)");
  const std::size_t lanes = channels * state;

  auto abar = std::make_shared<std::vector<T>>(steps * lanes);
  auto hidden = std::make_shared<std::vector<T>>(steps * lanes);
  {
    std::vector<T> bx(steps * lanes);
    auto xv = x.data();
    auto dv = delta.data();
    auto av = A.data();
    auto bv = B.data();
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t d = 0; d < channels; ++d) {
        const T dt = dv[t * channels + d];
        const T dx = dt * xv[t * channels + d];
        T* ab = abar->data() + t * lanes + d * state;
        T* bb = bx.data() + t * lanes + d * state;
        for (std::size_t n = 0; n < state; ++n) {
          ab[n] = dt * av[d * state + n];
          bb[n] = dx * bv[t * state + n];
        }
      }
    }
    // Scalar exp on purpose: Eigen's packet exp differs from std::exp in the
    // last ulp and its peeling depends on the buffer address.
    for (T& v : *abar) v = std::exp(v);
    detail::recurrence(mode, abar->data(), bx.data(), steps, lanes, hidden->data());
  }

  Tensor<T> out({steps, channels});
  {
    auto o = out.data();
    auto xv = x.data();
    auto cv = C.data();
    auto sv = skip.data();
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t d = 0; d < channels; ++d) {
        const T* h = hidden->data() + t * lanes + d * state;
        T acc = sv[d] * xv[t * channels + d];
        for (std::size_t n = 0; n < state; ++n) acc += cv[t * state + n] * h[n];
        o[t * channels + d] = acc;
      }
  }

  detail::record(out, {&x, &delta, &A, &B, &C, &skip}, [=]() mutable {
    if (!out.has_grad()) return;
    auto gy = out.grad_values();
    auto xv = std::as_const(x).data();
    auto dv = std::as_const(delta).data();
    auto av = std::as_const(A).data();
    auto bv = std::as_const(B).data();
    auto cv = std::as_const(C).data();
    auto sv = std::as_const(skip).data();
    const auto& ab = *abar;
    const auto& h = *hidden;

    // Reverse recurrence for dL/dh_t, run forward in reversed time:
    //   g_t = C_t gy_t + abar_{t+1} g_{t+1}
    std::vector<T> ra(steps * lanes), rc(steps * lanes), rg(steps * lanes);
    for (std::size_t u = 0; u < steps; ++u) {
      const std::size_t t = steps - 1 - u;
      T* a_dst = ra.data() + u * lanes;
      if (t + 1 < steps)
        std::copy_n(ab.data() + (t + 1) * lanes, lanes, a_dst);
      else
        std::fill_n(a_dst, lanes, T{0});
      T* c_dst = rc.data() + u * lanes;
      for (std::size_t d = 0; d < channels; ++d) {
        const T g = gy[t * channels + d];
        for (std::size_t n = 0; n < state; ++n) c_dst[d * state + n] = cv[t * state + n] * g;
      }
    }
    detail::recurrence(mode, ra.data(), rc.data(), steps, lanes, rg.data());

    const bool need_x = x.requires_grad(), need_d = delta.requires_grad();
    const bool need_a = A.requires_grad(), need_b = B.requires_grad();
    const bool need_c = C.requires_grad(), need_s = skip.requires_grad();
    T* gx = need_x ? x.grad().data() : nullptr;
    T* gd = need_d ? delta.grad().data() : nullptr;
    T* ga = need_a ? A.grad().data() : nullptr;
    T* gb = need_b ? B.grad().data() : nullptr;
    T* gc = need_c ? C.grad().data() : nullptr;
    T* gs = need_s ? skip.grad().data() : nullptr;

    for (std::size_t t = 0; t < steps; ++t) {
      const T* g = rg.data() + (steps - 1 - t) * lanes;
      const T* ht = h.data() + t * lanes;
      const T* hp = t > 0 ? h.data() + (t - 1) * lanes : nullptr;
      const T* at = ab.data() + t * lanes;
      for (std::size_t d = 0; d < channels; ++d) {
        const std::size_t td = t * channels + d;
        const T dt = dv[td], xt = xv[td], gyt = gy[td];
        T g_delta{0}, g_x{0};
        for (std::size_t n = 0; n < state; ++n) {
          const std::size_t l = d * state + n;
          const T gh = g[l];
          const T bn = bv[t * state + n];
          if (need_c) gc[t * state + n] += gyt * ht[l];
          const T g_abar = hp != nullptr ? gh * hp[l] : T{0};
          g_delta += g_abar * av[l] * at[l] + gh * bn * xt;
          if (need_a) ga[l] += g_abar * dt * at[l];
          if (need_b) gb[t * state + n] += gh * dt * xt;
          g_x += gh * dt * bn;
        }
        if (need_d) gd[td] += g_delta;
        if (need_x) gx[td] += g_x + sv[d] * gyt;
        if (need_s) gs[d] += gyt * xt;
      }
    }
  });
  return out;
}

/// Per-sequence selective-SSM parameters for D channels and N states.
template <class T>
struct SSMParams {
  Tensor<T> delta_weight;  // (D, D)
  Tensor<T> delta_bias;    // (D)
  Tensor<T> input_weight;  // (D, N): B_t = x_t W_B
  Tensor<T> output_weight; // (D, N): C_t = x_t W_C
  Tensor<T> a_log;         // (D, N): A = -exp(a_log)
  Tensor<T> skip;          // (D)

  std::size_t channels() const { return skip.numel(); }
  std::size_t state_dim() const { return a_log.size(1); }

  /// Diagonal A with A_n = -(n+1), step sizes initialised in [1e-3, 1e-1]
  /// through an inverse softplus of the bias.
  template <class Rng>
  static SSMParams init(std::size_t channels, std::size_t state_dim, Rng& rng) {
    SSMParams p;
    p.delta_weight = Tensor<T>::zeros({channels, channels}, true);
    p.delta_bias = Tensor<T>::zeros({channels}, true);
    p.input_weight = Tensor<T>::zeros({channels, state_dim}, true);
    p.output_weight = Tensor<T>::zeros({channels, state_dim}, true);
    p.a_log = Tensor<T>::zeros({channels, state_dim}, true);
    p.skip = Tensor<T>::full({channels}, T{1}, true);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(std::log(1e-3), std::log(1e-1));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(channels));
    for (auto& v : p.delta_weight.values()) v = static_cast<T>(normal(rng) * proj_std * 0.1);
    for (auto& v : p.delta_bias.values()) {
      const double dt = std::exp(uniform(rng));
      v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    for (auto& v : p.input_weight.values()) v = static_cast<T>(normal(rng) * proj_std);
    for (auto& v : p.output_weight.values()) v = static_cast<T>(normal(rng) * proj_std);
    for (std::size_t d = 0; d < channels; ++d)
      for (std::size_t n = 0; n < state_dim; ++n)
        p.a_log[d * state_dim + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    return p;
  }

  Tensor<T> transition() const { return scale(exp(a_log), T{-1}); }

  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".delta_weight", delta_weight});
    out.push_back({prefix + ".delta_bias", delta_bias});
    out.push_back({prefix + ".input_weight", input_weight});
    out.push_back({prefix + ".output_weight", output_weight});
    out.push_back({prefix + ".a_log", a_log});
    out.push_back({prefix + ".skip", skip});
  }
};

/// Token-dependent projections followed by the recurrence:
/// delta = softplus(x W_delta + b), B = x W_B, C = x W_C.
template <class T>
Tensor<T> selective_scan(const Tensor<T>& seq, const SSMParams<T>& p, ScanMode mode) {
  if (seq.dim() != 2 || seq.size(0) == 0) throw DimensionError("scan: empty or malformed sequence");
  if (seq.size(1) != p.channels()) throw DimensionError("scan: channel count does not match parameters");
  const Tensor<T> delta = softplus(linear(seq, p.delta_weight, &p.delta_bias));
  const Tensor<T> B = linear(seq, p.input_weight);
  const Tensor<T> C = linear(seq, p.output_weight);
  return scan_recurrence(seq, delta, p.transition(), B, C, p.skip, mode);
}

template <class T>
Tensor<T> scan_sequential(const Tensor<T>& seq, const SSMParams<T>& p) {
  return selective_scan(seq, p, ScanMode::sequential);
}

template <class T>
Tensor<T> scan_parallel(const Tensor<T>& seq, const SSMParams<T>& p) {
  return selective_scan(seq, p, ScanMode::parallel);
}

}  // namespace cpmamba
