#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "cpmamba/metrics.hpp"
#include "cpmamba/parallel.hpp"
#include "cpmamba/prompt.hpp"

namespace cpmamba {

struct SynthConfig {
  std::size_t image_size = 128;
  std::size_t classes = 3;
  std::size_t min_instances = 6;
  std::size_t max_instances = 12;
  // Class prevalence, index c - 1; must sum to 1.
  std::vector<double> prevalence = {0.60, 0.35, 0.05};
  double min_radius = 4.0;
  double max_radius = 9.0;
  double noise = 0.04;
  std::size_t max_attempts = 200;  // per instance
  std::uint64_t seed = 1;

  void validate() const {
    if (image_size == 0) throw std::invalid_argument("synth: image_size must be positive");
    if (classes == 0) throw std::invalid_argument("synth: need at least one class");
    if (prevalence.size() != classes) throw std::invalid_argument("synth: prevalence needs one entry per class");
    double s = 0.0;
    for (double p : prevalence) {
      if (!(p >= 0.0)) throw std::invalid_argument("synth: negative prevalence");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("synth: prevalence must sum to 1");
    if (!(min_radius > 0.0) || max_radius < min_radius) throw std::invalid_argument("synth: bad radius range");
    if (min_instances > max_instances) throw std::invalid_argument("synth: bad instance range");
    if (!(noise >= 0.0)) throw std::invalid_argument("synth: negative noise");
  }
};

struct Sample {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  Tensor<float> image;  // (3, H, W), values k / 255
  InstanceMask instances;
  ClassMask classes;
  std::size_t placement_failures = 0;

  /// Category-prompt targets for encoder blocks 1..blocks (scale 16 * 2^(b-1)).
  std::vector<MultiClassLabel> block_labels(std::size_t blocks, std::size_t nc) const {
    std::vector<MultiClassLabel> out;
    for (std::size_t b = 0; b < blocks; ++b) out.push_back(generate_labels(classes, std::size_t{16} << b, nc));
    return out;
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Hue spread around the colour wheel, darker than the background.
inline std::array<double, 3> class_colour(std::size_t c, std::size_t classes) {
  const double hue = 2.0 * 3.14159265358979323846 * static_cast<double>(c) / static_cast<double>(classes);
  return {0.45 + 0.3 * std::cos(hue), 0.35 + 0.3 * std::cos(hue - 2.094), 0.5 + 0.3 * std::cos(hue + 2.094)};
}

}  // namespace detail

inline Sample generate_sample(const SynthConfig& cfg, std::size_t index) {
  Sample s;
  s.index = index;
  s.seed = detail::splitmix64(cfg.seed * 0x100000001b3ULL + index);
  std::mt19937_64 rng(s.seed);
  const std::size_t n = cfg.image_size;
  s.instances = InstanceMask(n, n);
  std::uniform_int_distribution<std::size_t> count(cfg.min_instances, cfg.max_instances);
  std::uniform_real_distribution<double> radius(cfg.min_radius, cfg.max_radius);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(n));
  std::uniform_real_distribution<double> angle(0.0, 3.14159265358979323846);
  std::discrete_distribution<int> cls(cfg.prevalence.begin(), cfg.prevalence.end());

  const std::size_t wanted = count(rng);
  std::vector<std::size_t> pixels;
  for (std::size_t k = 0; k < wanted; ++k) {
    const int c = cls(rng) + 1;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      const double cy = pos(rng), cx = pos(rng), a = radius(rng), b = radius(rng), t = angle(rng);
      const double ct = std::cos(t), st = std::sin(t);
      const double reach = std::max(a, b) + 1.0;
      const auto lo = [&](double v) { return static_cast<std::size_t>(std::max(0.0, std::floor(v - reach))); };
      const auto hi = [&](double v) { return static_cast<std::size_t>(std::min(static_cast<double>(n - 1), std::ceil(v + reach))); };
      // Inside test with a 1-pixel margin ring for the overlap check.
      auto inside = [&](double y, double x, double grow) {
        const double dy = y - cy, dx = x - cx;
        const double u = (dx * ct + dy * st) / (a + grow), v = (-dx * st + dy * ct) / (b + grow);
        return u * u + v * v <= 1.0;
      };
      pixels.clear();
      bool clash = false;
      for (std::size_t r = lo(cy); r <= hi(cy) && !clash; ++r) {
        for (std::size_t col = lo(cx); col <= hi(cx) && !clash; ++col) {
          const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(col) + 0.5;
          if (inside(y, x, 1.5) && s.instances.ids.at(r, col) != 0) clash = true;
          if (inside(y, x, 0.0)) pixels.push_back(r * n + col);
        }
      }
      // Reject clashes and slivers cut off by the border.
      if (clash || pixels.size() < 9) continue;
      s.instances.classes.push_back(c);
      for (std::size_t p : pixels) s.instances.ids.values[p] = static_cast<int>(s.instances.classes.size());
      placed = true;
    }
    if (!placed) ++s.placement_failures;
  }
  s.classes = s.instances.class_mask();

  // Background, class chroma with a darker rim, Gaussian noise, 8-bit levels.
  const Grid<int> sem = render_semantic(s.instances);
  std::normal_distribution<double> noise(0.0, cfg.noise);
  const std::array<double, 3> background = {0.92, 0.86, 0.90};
  s.image = Tensor<float>({3, n, n});
  for (std::size_t p = 0; p < n * n; ++p) {
    const int c = s.classes.values[p];
    const auto colour = c == 0 ? background : detail::class_colour(static_cast<std::size_t>(c - 1), cfg.classes);
    const double shade = sem.values[p] == semantic_contour ? 0.8 : 1.0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(colour[ch] * shade + noise(rng), 0.0, 1.0);
      s.image[ch * n * n + p] = static_cast<float>(std::round(v * 255.0) / 255.0);
    }
  }
  return s;
}

/// Samples 0..count-1; each uses its own derived seed, so results do not
/// depend on the thread count.
inline std::vector<Sample> generate(const SynthConfig& cfg, std::size_t count) {
  cfg.validate();
  std::vector<Sample> out(count);
  parallel_for(count, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) out[i] = generate_sample(cfg, i);
  });
  return out;
}

/// Seeded disjoint split; each side keeps the original relative order.
template <class Item>
std::pair<std::vector<Item>, std::vector<Item>> split(const std::vector<Item>& items, double train_frac,
                                                      std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split fraction must lie in (0, 1)");
  const std::size_t n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(items.size())));
  if (n_train == 0 || n_train >= items.size()) throw std::invalid_argument("split leaves one side empty");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (std::size_t k = 0; k < order.size(); ++k) (k < n_train ? out.first : out.second).push_back(items[order[k]]);
  return out;
}

}  // namespace cpmamba
