#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cpmamba/prompt.hpp"
#include "cpmamba/ssm.hpp"

namespace cpmamba {

/// Bijection on {0..n-1}: position k of the reordered sequence holds
/// original token forward[k]; inverse[forward[k]] == k.
struct Permutation {
  std::vector<std::size_t> forward;
  std::vector<std::size_t> inverse;

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> f(n);
    std::iota(f.begin(), f.end(), std::size_t{0});
    return from_forward(std::move(f));
  }

  static Permutation from_forward(std::vector<std::size_t> f) {
    Permutation p;
    p.inverse.assign(f.size(), f.size());
    for (std::size_t k = 0; k < f.size(); ++k) {
      if (f[k] >= f.size() || p.inverse[f[k]] != f.size()) {
        throw std::invalid_argument("ordering is not a bijection");
      }
      p.inverse[f[k]] = k;
    }
    p.forward = std::move(f);
    return p;
  }

  std::size_t size() const { return forward.size(); }
  bool is_identity() const {
    for (std::size_t k = 0; k < forward.size(); ++k)
      if (forward[k] != k) return false;
    return true;
  }

  /// Reorders the rows of an (n, d) token matrix.
  template <class T>
  Tensor<T> apply(const Tensor<T>& seq) const {
    check(seq);
    return gather_rows(seq, std::span<const std::size_t>(forward));
  }
  /// Restores original row order.
  template <class T>
  Tensor<T> restore(const Tensor<T>& seq) const {
    check(seq);
    return gather_rows(seq, std::span<const std::size_t>(inverse));
  }

 private:
  template <class T>
  void check(const Tensor<T>& seq) const {
    if (seq.dim() != 2 || seq.size(0) != forward.size()) {
      throw DimensionError("permutation of " + std::to_string(forward.size()) + " tokens applied to " +
                           to_string(seq.shape()));
    }
  }
};

/// x_f = lambda * Conv_2(CA(x_e)) + (1 - lambda) * x_e, with CA(x_e) supplied
/// as `gated` so the activation can be shared with the prompt head.
template <class T>
Tensor<T> phenotype_fuse(const TokenGrid<T>& x_e, const Tensor<T>& gated, const ConvParams<T>& conv2,
                         T lambda) {
  if (!(lambda >= T{0} && lambda <= T{1})) {
    throw std::invalid_argument("phenotype weight must lie in [0, 1]");
  }
  if (lambda == T{0}) return x_e.tokens;
  TokenGrid<T> g{gated, x_e.height, x_e.width, x_e.scale};
  const Tensor<T> x_s = TokenGrid<T>::from_map(conv2(g.to_map()), x_e.scale).tokens;
  if (lambda == T{1}) return x_s;
  return axpby(lambda, x_s, T{1} - lambda, x_e.tokens);
}

/// Stable descending argsort; ties keep ascending index.
template <class T>
Permutation sort_descending(std::span<const T> values) {
  std::vector<std::size_t> f(values.size());
  std::iota(f.begin(), f.end(), std::size_t{0});
  std::stable_sort(f.begin(), f.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return Permutation::from_forward(std::move(f));
}

/// Token order by descending probability of class `class_id` (1-based).
template <class T>
Permutation sort_by_class(const ClassProbMap<T>& y_u, std::size_t class_id) {
  if (class_id < 1 || class_id > y_u.classes()) {
    throw std::invalid_argument("class " + std::to_string(class_id) + " outside [1, " +
                                std::to_string(y_u.classes()) + "]");
  }
  const std::size_t n = y_u.height() * y_u.width();
  return sort_descending<T>(y_u.probs.data().subspan((class_id - 1) * n, n));
}

/// sum_k restore_k(scan(k, apply_k(x))), accumulated in ordering order.
template <class T, class ScanFn>
Tensor<T> aggregate_over_orderings(const Tensor<T>& x, const std::vector<Permutation>& orders,
                                   ScanFn&& scan) {
  if (orders.empty()) throw std::invalid_argument("aggregation needs at least one ordering");
  Tensor<T> acc;
  for (std::size_t k = 0; k < orders.size(); ++k) {
    const Permutation& p = orders[k];
    Tensor<T> y = p.is_identity() ? scan(k, x) : p.restore(scan(k, p.apply(x)));
    acc = k == 0 ? y : add(acc, y);
  }
  return acc;
}

/// Per-class sorted scans summed over classes. `params` holds one parameter
/// set per class, or a single set shared by all classes.
template <class T>
Tensor<T> aggregate_scan(const Tensor<T>& x_f, const ClassProbMap<T>& y_u,
                         const std::vector<SSMParams<T>>& params, ScanMode mode) {
  const std::size_t n = y_u.height() * y_u.width();
  if (x_f.dim() != 2 || x_f.size(0) != n) {
    throw DimensionError("aggregate_scan: " + std::to_string(n) + " probability cells for tokens " +
                         to_string(x_f.shape()));
  }
  if (params.size() != 1 && params.size() != y_u.classes()) {
    throw std::invalid_argument("aggregate_scan: need 1 or NC parameter sets");
  }
  std::vector<Permutation> orders;
  for (std::size_t i = 1; i <= y_u.classes(); ++i) orders.push_back(sort_by_class(y_u, i));
  return aggregate_over_orderings(x_f, orders, [&](std::size_t k, const Tensor<T>& seq) {
    return selective_scan(seq, params[params.size() == 1 ? 0 : k], mode);
  });
}

enum class OrderingKind { probability_sorted, bidirectional, cross_scan, raster };

inline std::string to_string(OrderingKind k) {
  switch (k) {
    case OrderingKind::probability_sorted: return "probability_sorted";
    case OrderingKind::bidirectional: return "bidirectional";
    case OrderingKind::cross_scan: return "cross_scan";
    case OrderingKind::raster: return "raster";
  }
  return "?";
}

inline OrderingKind parse_ordering(const std::string& s) {
  for (auto k : {OrderingKind::probability_sorted, OrderingKind::bidirectional, OrderingKind::cross_scan,
                 OrderingKind::raster})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown ordering kind '" + s + "'");
}

/// Fixed spatial orderings for an h x w grid.
inline std::vector<Permutation> baseline_order(OrderingKind kind, std::size_t height, std::size_t width) {
  const std::size_t n = height * width;
  auto reversed = [](std::vector<std::size_t> v) {
    std::reverse(v.begin(), v.end());
    return v;
  };
  Permutation raster = Permutation::identity(n);
  switch (kind) {
    case OrderingKind::raster:
      return {raster};
    case OrderingKind::bidirectional:
      return {raster, Permutation::from_forward(reversed(raster.forward))};
    case OrderingKind::cross_scan: {
      std::vector<std::size_t> col;
      col.reserve(n);
      for (std::size_t c = 0; c < width; ++c)
        for (std::size_t r = 0; r < height; ++r) col.push_back(r * width + c);
      return {raster, Permutation::from_forward(reversed(raster.forward)), Permutation::from_forward(col),
              Permutation::from_forward(reversed(col))};
    }
    case OrderingKind::probability_sorted:
      break;
  }
  throw std::invalid_argument("baseline_order: '" + to_string(kind) + "' is not a fixed ordering");
}

// ---------------------------------------------------------------------------
// Ordering entropy probe (surrogate): a first-order transition model is fitted
// to the expected bigram counts along an ordering; each token's class is then
// predicted from the previous token's distribution and combined with its own
// marginal. The reported value is the mean entropy of those posteriors.

struct TokenDistributions {
  std::size_t tokens = 0;
  std::size_t classes = 0;
  std::vector<double> probs;  // (tokens, classes), rows sum to 1

  const double* row(std::size_t t) const { return probs.data() + t * classes; }
  void validate() const {
    if (tokens == 0 || classes == 0 || probs.size() != tokens * classes) {
      throw std::invalid_argument("token distributions: malformed dimensions");
    }
    for (std::size_t t = 0; t < tokens; ++t) {
      double s = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double v = row(t)[c];
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("token distributions: negative or non-finite entry");
        s += v;
      }
      if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("token distributions: row does not sum to 1");
    }
  }
};

inline double entropy_nats(const std::vector<double>& q) {
  double h = 0.0;
  for (double v : q)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline double predictive_entropy(const TokenDistributions& d, const std::vector<std::size_t>& order) {
  const std::size_t K = d.classes;
  std::vector<double> trans(K * K, 1.0);  // Laplace smoothing
  for (std::size_t k = 1; k < order.size(); ++k) {
    const double* prev = d.row(order[k - 1]);
    const double* cur = d.row(order[k]);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b) trans[a * K + b] += prev[a] * cur[b];
  }
  for (std::size_t a = 0; a < K; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < K; ++b) s += trans[a * K + b];
    for (std::size_t b = 0; b < K; ++b) trans[a * K + b] /= s;
  }
  double total = 0.0;
  std::vector<double> q(K);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const double* cur = d.row(order[k]);
    if (k == 0) {
      q.assign(cur, cur + K);
    } else {
      const double* prev = d.row(order[k - 1]);
      double z = 0.0;
      for (std::size_t b = 0; b < K; ++b) {
        double prior = 0.0;
        for (std::size_t a = 0; a < K; ++a) prior += prev[a] * trans[a * K + b];
        q[b] = cur[b] * prior;
        z += q[b];
      }
      for (double& v : q) v /= z;
    }
    total += entropy_nats(q);
  }
  return total / static_cast<double>(order.size());
}

enum class ProbeOrdering { sorted, random, raster };

inline std::string to_string(ProbeOrdering o) {
  switch (o) {
    case ProbeOrdering::sorted: return "sorted";
    case ProbeOrdering::random: return "random";
    case ProbeOrdering::raster: return "raster";
  }
  return "?";
}

/// Surrogate entropy of one sequence under an ordering. "sorted" averages the
/// per-class descending orders; "random" uses a seeded shuffle.
inline double ordering_entropy(const TokenDistributions& d, ProbeOrdering ordering, std::uint64_t seed) {
  d.validate();
  std::vector<std::size_t> order(d.tokens);
  std::iota(order.begin(), order.end(), std::size_t{0});
  switch (ordering) {
    case ProbeOrdering::raster:
      return predictive_entropy(d, order);
    case ProbeOrdering::random: {
      std::mt19937_64 rng(seed);
      std::shuffle(order.begin(), order.end(), rng);
      return predictive_entropy(d, order);
    }
    case ProbeOrdering::sorted: {
      double acc = 0.0;
      std::vector<double> column(d.tokens);
      for (std::size_t c = 0; c < d.classes; ++c) {
        for (std::size_t t = 0; t < d.tokens; ++t) column[t] = d.row(t)[c];
        acc += predictive_entropy(d, sort_descending<double>(column).forward);
      }
      return acc / static_cast<double>(d.classes);
    }
  }
  return 0.0;
}

struct EntropyProbeReport {
  std::size_t trials = 0;
  std::vector<double> sorted, random, raster;  // per trial

  static double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  /// Trials with sorted < random.
  std::size_t sorted_lower() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) n += sorted[i] < random[i];
    return n;
  }
};

inline EntropyProbeReport entropy_probe(const std::vector<TokenDistributions>& sequences, std::uint64_t seed) {
  EntropyProbeReport r;
  r.trials = sequences.size();
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    r.sorted.push_back(ordering_entropy(sequences[i], ProbeOrdering::sorted, seed + i));
    r.random.push_back(ordering_entropy(sequences[i], ProbeOrdering::random, seed + i));
    r.raster.push_back(ordering_entropy(sequences[i], ProbeOrdering::raster, seed + i));
  }
  return r;
}

/// Mixture-model sequences: each token belongs to one of `classes` latent
/// components, spatially clustered in runs, and carries a noisy softmax
/// distribution peaked on its component.
inline std::vector<TokenDistributions> mixture_sequences(std::size_t trials, std::size_t tokens,
                                                         std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenDistributions> out;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  for (std::size_t t = 0; t < trials; ++t) {
    TokenDistributions d{tokens, classes, std::vector<double>(tokens * classes)};
    std::size_t comp = pick(rng);
    for (std::size_t k = 0; k < tokens; ++k) {
      if (u(rng) < 0.2) comp = pick(rng);
      const double sharp = 1.0 + 3.0 * u(rng);
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double logit = (c == comp ? sharp : 0.0) + 0.5 * noise(rng);
        d.probs[k * classes + c] = std::exp(logit);
        z += d.probs[k * classes + c];
      }
      for (std::size_t c = 0; c < classes; ++c) d.probs[k * classes + c] /= z;
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace cpmamba
