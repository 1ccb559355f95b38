#pragma once

// Self-checks shared by the acceptance binary and `cpmamba verify`: gradient
// checks of every differentiable op, scan and labelling oracles, permutation
// properties and metric oracles.

#include <chrono>
#include <cstdio>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpmamba/gradcheck.hpp"
#include "cpmamba/network.hpp"
#include "cpmamba/synth.hpp"
#include "support/label_oracle.hpp"
#include "support/metric_oracle.hpp"
#include "support/scan_oracle.hpp"

namespace cpmamba::testing {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace suite {

using Td = Tensor<double>;

inline Td random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Td t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Values bounded away from zero, so relu and max-pool kinks stay outside the stencil.
inline Td away_from_zero(Shape shape, std::uint64_t seed) {
  Td t = random_tensor(std::move(shape), seed, 0.1, 1.0);
  std::mt19937_64 rng(seed + 1);
  std::bernoulli_distribution flip(0.5);
  for (auto& v : t.values())
    if (flip(rng)) v = -v;
  return t;
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Scalarises any output with fixed random weights.
inline Td weighted_sum(const Td& y, std::uint64_t seed) { return sum(mul(y, random_tensor(y.shape(), seed))); }

template <class F>
CheckResult timed(const std::string& name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct GradCase {
  std::string name;
  std::function<Td()> loss;
  std::vector<Td> inputs;
  GradCheckOptions options{};
  double tolerance = 1e-5;
};

inline std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  std::uint64_t s = 100;
  auto add_case = [&](std::string name, std::vector<Td> inputs, std::function<Td(const std::vector<Td>&)> f,
                      GradCheckOptions opt = {}, double tol = 1e-5) {
    auto held = inputs;
    cases.push_back({std::move(name), [held, f] { return f(held); }, std::move(inputs), opt, tol});
  };
  const std::uint64_t w = 7;
  add_case("add", {random_tensor({3, 4}, s++), random_tensor({3, 4}, s++)},
           [w](auto& in) { return weighted_sum(add(in[0], in[1]), w); });
  add_case("sub", {random_tensor({3, 4}, s++), random_tensor({3, 4}, s++)},
           [w](auto& in) { return weighted_sum(sub(in[0], in[1]), w); });
  add_case("mul", {random_tensor({3, 4}, s++), random_tensor({3, 4}, s++)},
           [w](auto& in) { return weighted_sum(mul(in[0], in[1]), w); });
  add_case("axpby", {random_tensor({5}, s++), random_tensor({5}, s++)},
           [w](auto& in) { return weighted_sum(axpby(0.3, in[0], 0.7, in[1]), w); });
  add_case("scale", {random_tensor({6}, s++)}, [w](auto& in) { return weighted_sum(scale(in[0], -2.5), w); });
  add_case("sigmoid", {random_tensor({6}, s++, -4, 4)}, [w](auto& in) { return weighted_sum(sigmoid(in[0]), w); });
  add_case("softplus", {random_tensor({6}, s++, -4, 4)}, [w](auto& in) { return weighted_sum(softplus(in[0]), w); });
  add_case("exp", {random_tensor({6}, s++)}, [w](auto& in) { return weighted_sum(cpmamba::exp(in[0]), w); });
  add_case("relu", {away_from_zero({8}, s++)}, [w](auto& in) { return weighted_sum(relu(in[0]), w); });
  add_case("sum", {random_tensor({2, 3}, s++)}, [](auto& in) { return sum(mul(in[0], in[0])); });
  add_case("mean", {random_tensor({2, 3}, s++)}, [](auto& in) { return mean(mul(in[0], in[0])); });
  add_case("matmul", {random_tensor({3, 4}, s++), random_tensor({4, 2}, s++)},
           [w](auto& in) { return weighted_sum(matmul(in[0], in[1]), w); });
  add_case("linear", {random_tensor({5, 4}, s++), random_tensor({4, 3}, s++), random_tensor({3}, s++)},
           [w](auto& in) { return weighted_sum(linear(in[0], in[1], &in[2]), w); });
  add_case("reshape", {random_tensor({2, 6}, s++)},
           [w](auto& in) { return weighted_sum(reshape(in[0], Shape{3, 4}), w); });
  add_case("transpose", {random_tensor({2, 5}, s++)}, [w](auto& in) { return weighted_sum(transpose(in[0]), w); });
  add_case("concat", {random_tensor({1, 2, 3, 3}, s++), random_tensor({1, 1, 3, 3}, s++)},
           [w](auto& in) { return weighted_sum(concat(in[0], in[1], 1), w); });
  add_case("gather_rows", {random_tensor({5, 3}, s++)}, [w](auto& in) {
    const std::vector<std::size_t> rows = {4, 0, 2, 2, 1};
    return weighted_sum(gather_rows(in[0], rows), w);
  });
  add_case("patchify", {random_tensor({2, 8, 8}, s++)}, [w](auto& in) { return weighted_sum(patchify(in[0], 4), w); });
  add_case("layer_norm", {random_tensor({4, 6}, s++), random_tensor({6}, s++), random_tensor({6}, s++)},
           [w](auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2]), w); });
  add_case("pool_average", {random_tensor({1, 2, 8, 8}, s++)},
           [w](auto& in) { return weighted_sum(pool_downsample(in[0], 4, PoolMode::average), w); });
  add_case("pool_max", {random_tensor({1, 2, 8, 8}, s++)},
           [w](auto& in) { return weighted_sum(pool_downsample(in[0], 4, PoolMode::max), w); });
  add_case("upsample_nearest", {random_tensor({1, 2, 3, 3}, s++)},
           [w](auto& in) { return weighted_sum(upsample_nearest(in[0], 2), w); });
  add_case("conv2d_3x3", {random_tensor({1, 3, 6, 5}, s++), random_tensor({4, 3, 3, 3}, s++), random_tensor({4}, s++)},
           [w](auto& in) { return weighted_sum(conv2d(in[0], in[1], &in[2]), w); });
  add_case("conv2d_1x1", {random_tensor({1, 3, 4, 4}, s++), random_tensor({2, 3, 1, 1}, s++), random_tensor({2}, s++)},
           [w](auto& in) { return weighted_sum(conv2d(in[0], in[1], &in[2]), w); });
  {
    Td target({1, 2, 3, 3});
    std::mt19937_64 rng(s++);
    for (auto& v : target.values()) v = rng() % 2 ? 1.0 : 0.0;
    add_case("binary_cross_entropy", {random_tensor({1, 2, 3, 3}, s++, 0.05, 0.95)},
             [target](auto& in) { return binary_cross_entropy(in[0], target); });
  }
  const std::vector<int> labels = {0, 2, 1, 1, 0, 2, 2, 0, 1};
  add_case("softmax", {random_tensor({1, 3, 3, 3}, s++, -2, 2)}, [w](auto& in) { return weighted_sum(softmax(in[0]), w); });
  add_case("softmax_cross_entropy", {random_tensor({1, 3, 3, 3}, s++, -2, 2)},
           [labels](auto& in) { return softmax_cross_entropy(in[0], std::span<const int>(labels)); });
  add_case("dice_loss", {random_tensor({1, 3, 3, 3}, s++, -2, 2)},
           [labels](auto& in) { return dice_loss(softmax(in[0]), std::span<const int>(labels)); });
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    const auto in = random_scan_inputs(9, 3, 2, s++);
    add_case(std::string("scan_recurrence_") + (mode == ScanMode::parallel ? "parallel" : "sequential"),
             {in.x, in.delta, in.A, in.B, in.C, in.skip}, [mode, w](auto& v) {
               return weighted_sum(scan_recurrence(v[0], v[1], v[2], v[3], v[4], v[5], mode), w);
             });
    std::mt19937_64 rng(s++);
    auto p = SSMParams<double>::init(3, 2, rng);
    add_case(std::string("selective_scan_") + (mode == ScanMode::parallel ? "parallel" : "sequential"),
             {random_tensor({7, 3}, s++), p.delta_weight, p.delta_bias, p.input_weight, p.output_weight, p.a_log, p.skip},
             [mode, w](auto& v) {
               SSMParams<double> q{v[1], v[2], v[3], v[4], v[5], v[6]};
               return weighted_sum(selective_scan(v[0], q, mode), w);
             });
  }
  {
    std::mt19937_64 rng(s++);
    auto ca = ClassActivationParams<double>::init(4, rng);
    add_case("class_activate", {random_tensor({6, 4}, s++), ca.weight, ca.bias}, [w](auto& v) {
      return weighted_sum(class_activate(v[0], ClassActivationParams<double>{v[1], v[2]}), w);
    });
    auto conv = ConvParams<double>::init(4, 2, 3, rng);
    ClassMask mask(16, 16, 0);
    mask.at(3, 2) = 2;
    mask.at(12, 9) = 1;
    const auto y = generate_labels(mask, 16, 2);
    add_case("prompt_head", {random_tensor({16, 4}, s++), ca.weight, ca.bias, conv.weight, conv.bias},
             [y](auto& v) {
               TokenGrid<double> g{v[0], 4, 4, 4};
               return prompt_loss(prompt_head(g, ClassActivationParams<double>{v[1], v[2]},
                                              ConvParams<double>{v[3], v[4]})
                                      .probs,
                                  y);
             });
    auto conv2 = ConvParams<double>::init(4, 4, 3, rng);
    add_case("phenotype_fuse", {random_tensor({16, 4}, s++), random_tensor({16, 4}, s++), conv2.weight, conv2.bias},
             [w](auto& v) {
               TokenGrid<double> g{v[0], 4, 4, 4};
               return weighted_sum(phenotype_fuse(g, v[1], ConvParams<double>{v[2], v[3]}, 0.3), w);
             });
    std::vector<SSMParams<double>> params;
    for (int k = 0; k < 2; ++k) params.push_back(SSMParams<double>::init(3, 2, rng));
    Td probs = random_tensor({1, 2, 2, 4}, s++, 0.0, 1.0);
    add_case("aggregate_scan", {random_tensor({8, 3}, s++), params[0].input_weight, params[1].a_log},
             [params, probs, w](auto& v) {
               auto p = params;
               p[0].input_weight = v[1];
               p[1].a_log = v[2];
               return weighted_sum(aggregate_scan(v[0], ClassProbMap<double>{probs}, p, ScanMode::parallel), w);
             });
  }
  return cases;
}

}  // namespace suite

/// Each op against central differences, relative error < 1e-5.
inline CheckResult gradient_ops_check() {
  return suite::timed("gradient checks (ops)", [] {
    CheckResult r{"", true, ""};
    double worst = 0.0;
    std::string worst_name;
    for (auto& c : suite::gradient_cases()) {
      const auto g = check_gradients(c.loss, c.inputs, c.options);
      if (g.max_rel_error > worst) worst = g.max_rel_error, worst_name = c.name;
      if (!(g.max_rel_error < c.tolerance)) {
        r.pass = false;
        r.detail += c.name + " rel err " + suite::sci(g.max_rel_error) + " at " + g.worst + "; ";
      }
    }
    if (r.pass) r.detail = "max rel err " + suite::sci(worst) + " (" + worst_name + ")";
    return r;
  });
}

/// Tiny full model (32x32, D=8, N=4, 1 block), rel. error < 1e-4.
inline CheckResult gradient_model_check() {
  return suite::timed("gradient check (end-to-end)", [] {
    ModelConfig cfg;
    cfg.classes = 2;
    cfg.dim = 8;
    cfg.state_dim = 4;
    cfg.blocks = 1;
    cfg.image_size = 32;
    SynthConfig sc;
    sc.image_size = 32;
    sc.classes = 2;
    sc.prevalence = {0.5, 0.5};
    sc.min_radius = 3;
    sc.max_radius = 6;
    sc.seed = 10;
    const Sample smp = generate(sc, 1)[0];
    const Tensor<double> img = smp.image.cast<double>();
    const Targets t = Targets::from(smp.instances, 1, 2);
    Model<double> m(cfg);
    std::vector<Tensor<double>> params;
    for (auto& p : m.parameters()) params.push_back(p.tensor);
    // Step 1e-5 keeps decoder relu kinks out of most stencils without drowning
    // tiny gradients in round-off.
    const auto g = check_gradients([&] { return m.total_loss(m.forward(img, &t), t); }, params,
                                   {.step = 1e-5, .max_elements_per_input = 8});
    return CheckResult{"", g.max_rel_error < 1e-4,
                       "max rel err " + suite::sci(g.max_rel_error) + " at " + g.worst + " over " +
                           std::to_string(g.checked) + " elements"};
  });
}

/// Parallel vs sequential scan on the given lengths and seeds, plus the
/// unrolled operator for short sequences.
inline CheckResult scan_equivalence_check(std::size_t seeds = 20) {
  return suite::timed("scan equivalence", [seeds] {
    double worst_par = 0.0, worst_oracle = 0.0;
    for (std::size_t len : {1u, 2u, 7u, 64u, 4096u}) {
      for (std::size_t seed = 0; seed < seeds; ++seed) {
        const auto in = random_scan_inputs(len, 3, 4, 1000 * len + seed);
        const auto seq = scan_recurrence(in.x, in.delta, in.A, in.B, in.C, in.skip, ScanMode::sequential);
        const auto par = scan_recurrence(in.x, in.delta, in.A, in.B, in.C, in.skip, ScanMode::parallel);
        for (std::size_t i = 0; i < seq.numel(); ++i) worst_par = std::max(worst_par, std::abs(seq[i] - par[i]));
        if (len <= 64) {
          const auto ref = unrolled_scan(in);
          for (std::size_t i = 0; i < seq.numel(); ++i) worst_oracle = std::max(worst_oracle, std::abs(seq[i] - ref[i]));
        }
      }
    }
    return CheckResult{"", worst_par <= 1e-10 && worst_oracle <= 1e-10,
                       "max |par-seq| " + suite::sci(worst_par) + ", max |seq-unrolled| " +
                           suite::sci(worst_oracle)};
  });
}

/// generate_labels against the naive window loop on random masks.
inline CheckResult label_oracle_check(std::size_t masks = 100) {
  return suite::timed("label generation oracle", [masks] {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> nc_pick(1, 5), scale_pick(0, 1), mult(1, 4);
    std::size_t mismatches = 0;
    for (std::size_t k = 0; k < masks; ++k) {
      const std::size_t s = scale_pick(rng) ? 16 : 8, nc = nc_pick(rng);
      const std::size_t h = s * mult(rng), w = s * mult(rng);
      const ClassMask m = random_class_mask(h, w, nc, rng);
      if (!(generate_labels(m, s, nc) == naive_labels(m, s, nc))) ++mismatches;
    }
    return CheckResult{"", mismatches == 0, std::to_string(mismatches) + " mismatches over " + std::to_string(masks)};
  });
}

/// Descending, tie-stable, bijective, invertible, invariant to positive scaling.
inline CheckResult permutation_check(std::size_t cases = 1000) {
  return suite::timed("sorting invariants", [cases] {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<std::size_t> dim(1, 12), nc_pick(1, 4), levels(1, 6);
    std::uniform_real_distribution<double> u, factor(0.1, 10.0);
    std::size_t failures = 0;
    for (std::size_t trial = 0; trial < cases; ++trial) {
      const std::size_t h = dim(rng), w = dim(rng), nc = nc_pick(rng), n = h * w;
      const double q = static_cast<double>(levels(rng));
      std::vector<double> v(nc * n);
      for (auto& x : v) x = std::round(u(rng) * q) / q;
      ClassProbMap<double> y{Tensor<double>({1, nc, h, w}, v)};
      const std::size_t i = 1 + rng() % nc;
      const auto p = sort_by_class(y, i);
      bool ok = p.size() == n;
      for (std::size_t k = 0; ok && k + 1 < n; ++k) {
        const double a = y.at(i, p.forward[k]), b = y.at(i, p.forward[k + 1]);
        ok = a > b || (a == b && p.forward[k] < p.forward[k + 1]);
      }
      std::vector<bool> seen(n, false);
      for (std::size_t k = 0; ok && k < n; ++k) {
        ok = !seen[p.forward[k]] && p.inverse[p.forward[k]] == k;
        seen[p.forward[k]] = true;
      }
      const auto seq = suite::random_tensor({n, 2}, trial);
      ok = ok && p.restore(p.apply(seq)).values() == seq.values();
      auto scaled = y.probs.clone();
      const double f = factor(rng);
      for (std::size_t t = 0; t < n; ++t) scaled[(i - 1) * n + t] *= f;
      ok = ok && sort_by_class(ClassProbMap<double>{scaled}, i).forward == p.forward;
      if (!ok) ++failures;
    }
    return CheckResult{"", failures == 0, std::to_string(failures) + " failures over " + std::to_string(cases) + " cases"};
  });
}

/// NC=1 with uniform probabilities equals raster scan bit for bit; an
/// identity scan returns NC * x_f exactly.
inline CheckResult aggregation_identity_check() {
  return suite::timed("aggregation identity", [] {
    std::mt19937_64 rng(5);
    bool ok = true;
    std::string detail;
    for (std::size_t trial = 0; trial < 10; ++trial) {
      const std::size_t h = 2 + trial % 4, w = 3 + trial % 3, d = 4;
      auto params = std::vector{SSMParams<double>::init(d, 3, rng)};
      const auto x = suite::random_tensor({h * w, d}, 50 + trial);
      const ClassProbMap<double> y{Tensor<double>({1, 1, h, w}, std::vector<double>(h * w, 0.5))};
      for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel})
        if (aggregate_scan(x, y, params, mode).values() != selective_scan(x, params[0], mode).values()) {
          ok = false;
          detail += "NC=1 mismatch; ";
        }
      for (std::size_t nc = 1; nc <= 3; ++nc) {
        const auto probs = suite::random_tensor({1, nc, h, w}, 90 + trial, 0.0, 1.0);
        std::vector<Permutation> orders;
        const ClassProbMap<double> yp{probs};
        for (std::size_t i = 1; i <= nc; ++i) orders.push_back(sort_by_class(yp, i));
        const auto out = aggregate_over_orderings(x, orders, [](std::size_t, const Tensor<double>& s) { return s; });
        for (std::size_t k = 0; k < x.numel(); ++k)
          if (out[k] != static_cast<double>(nc) * x[k]) {
            ok = false;
            detail += "identity NC=" + std::to_string(nc) + " mismatch; ";
            break;
          }
      }
    }
    return CheckResult{"", ok, ok ? "bit-exact on 10 grids, NC in {1,2,3}" : detail};
  });
}

/// dice / aji / dq / sq / pq against set-based brute force, plus the IoU 0.8 hand case.
inline CheckResult metric_oracle_check(std::size_t masks = 50) {
  return suite::timed("metric oracles", [masks] {
    std::mt19937_64 rng(99);
    double worst = 0.0;
    for (std::size_t k = 0; k < masks; ++k) {
      const InstanceMask gt = random_instances(16, 16, 6, 2, rng);
      const InstanceMask pred = jitter(gt, rng);
      const auto pq = panoptic(pred, gt);
      const auto ref = brute_panoptic(pred, gt);
      for (double e : {std::abs(dice(pred.ids, gt.ids) - brute_dice(pred, gt)), std::abs(aji(pred, gt) - brute_aji(pred, gt)),
                       std::abs(pq.dq - ref.dq), std::abs(pq.sq - ref.sq), std::abs(pq.pq - ref.pq)})
        worst = std::max(worst, e);
    }
    // 5x5 square against a 4x5 prediction inside it: IoU 20/25.
    InstanceMask gt(8, 8), pred(8, 8);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        gt.ids.at(r, c) = 1;
        if (r < 4) pred.ids.at(r, c) = 1;
      }
    gt.classes = {1};
    pred.classes = {1};
    const double hand = panoptic(pred, gt).pq;
    const bool ok = worst <= 1e-12 && std::abs(hand - 0.8) <= 1e-12;
    return CheckResult{"", ok, "max |impl-oracle| " + suite::sci(worst) + ", hand-case PQ " + suite::sci(hand)};
  });
}

inline std::vector<CheckResult> run_verify_suite() {
  return {gradient_ops_check(),  gradient_model_check(), scan_equivalence_check(), label_oracle_check(),
          permutation_check(),   aggregation_identity_check(), metric_oracle_check()};
}

}  // namespace cpmamba::testing
