#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpmamba {

/// Row-major 2-d array of plain values (masks, label maps).
template <class V>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<V> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, V fill = V{}) : height(h), width(w), values(h * w, fill) {}
  Grid(std::size_t h, std::size_t w, std::vector<V> v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) throw std::invalid_argument("grid data length does not match dims");
  }

  V& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  const V& at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  std::size_t size() const { return values.size(); }
  bool same_dims(const Grid& o) const { return height == o.height && width == o.width; }
  bool operator==(const Grid&) const = default;
};

/// 0 = background, 1..NC = class ids.
using ClassMask = Grid<int>;

inline void require_same_dims(std::size_t h1, std::size_t w1, std::size_t h2, std::size_t w2,
                              const char* what) {
  if (h1 != h2 || w1 != w2) {
    throw std::invalid_argument(std::string(what) + ": dims " + std::to_string(h1) + "x" +
                                std::to_string(w1) + " vs " + std::to_string(h2) + "x" +
                                std::to_string(w2));
  }
}

}  // namespace cpmamba
