#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>

#include "cpmamba/conv.hpp"
#include "cpmamba/grid.hpp"
#include "cpmamba/loss.hpp"
#include "cpmamba/optim.hpp"

namespace cpmamba {

/// Tokens of an h x w grid stored as an (h*w, channels) matrix, raster order.
/// `scale` is the number of input pixels per token side.
template <class T>
struct TokenGrid {
  Tensor<T> tokens;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t scale = 1;

  std::size_t count() const { return height * width; }
  std::size_t channels() const { return tokens.size(1); }

  /// (1, channels, h, w) feature map view of the tokens (differentiable).
  Tensor<T> to_map() const {
    return reshape(transpose(tokens), Shape{1, channels(), height, width});
  }

  static TokenGrid from_map(const Tensor<T>& map, std::size_t scale) {
    if (map.dim() != 4 || map.size(0) != 1) {
      throw DimensionError("token grid needs a (1, C, h, w) map, got " + to_string(map.shape()));
    }
    const std::size_t c = map.size(1), h = map.size(2), w = map.size(3);
    return {transpose(reshape(map, Shape{c, h * w})), h, w, scale};
  }
};

/// Per-class sigmoid probabilities, (1, NC, h, w).
template <class T>
struct ClassProbMap {
  Tensor<T> probs;

  std::size_t classes() const { return probs.size(1); }
  std::size_t height() const { return probs.size(2); }
  std::size_t width() const { return probs.size(3); }
  /// Probability of class `class_id` (1-based) at flat cell `cell`.
  T at(std::size_t class_id, std::size_t cell) const {
    return probs[(class_id - 1) * height() * width() + cell];
  }
};

/// Down-sampled multi-label grid: bit (r, c, i) is set iff class i occurs in
/// the s x s window of cell (r, c). Stored class-major.
struct MultiClassLabel {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::size_t scale = 1;
  std::vector<std::uint8_t> bits;

  MultiClassLabel() = default;
  MultiClassLabel(std::size_t h, std::size_t w, std::size_t nc, std::size_t s)
      : height(h), width(w), classes(nc), scale(s), bits(h * w * nc, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c, std::size_t class_id) {
    return bits[((class_id - 1) * height + r) * width + c];
  }
  std::uint8_t at(std::size_t r, std::size_t c, std::size_t class_id) const {
    return bits[((class_id - 1) * height + r) * width + c];
  }
  bool operator==(const MultiClassLabel&) const = default;

  template <class T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(bits.begin(), bits.end());
    return Tensor<T>({1, classes, height, width}, std::move(v));
  }
};

enum class PositionFusion { add, concat };

/// Bias-free patch projection plus a learned positional table.
template <class T>
struct PatchEmbedParams {
  Tensor<T> weight;     // (C*patch*patch, D) or (.., D/2) for concat
  Tensor<T> position;   // (tokens, D) or (tokens, D/2) for concat
  std::size_t patch = 4;
  PositionFusion fusion = PositionFusion::add;

  template <class Rng>
  static PatchEmbedParams init(std::size_t in_channels, std::size_t tokens, std::size_t dim,
                               Rng& rng, std::size_t patch = 4,
                               PositionFusion fusion = PositionFusion::add) {
    if (fusion == PositionFusion::concat && dim % 2 != 0) {
      throw std::invalid_argument("concat positional fusion needs an even channel count");
    }
    const std::size_t proj = fusion == PositionFusion::add ? dim : dim / 2;
    const std::size_t fan_in = in_channels * patch * patch;
    PatchEmbedParams p;
    p.patch = patch;
    p.fusion = fusion;
    p.weight = Tensor<T>::zeros({fan_in, proj}, true);
    p.position = Tensor<T>::zeros({tokens, fusion == PositionFusion::add ? dim : dim - proj}, true);
    std::normal_distribution<double> n(0.0, 1.0);
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.weight.values()) v = static_cast<T>(n(rng) * s);
    for (auto& v : p.position.values()) v = static_cast<T>(n(rng) * 0.02);
    return p;
  }

  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".position", position});
  }
};

/// (C, H, W) image -> (tokens, C*patch*patch) rows, one flattened patch per
/// token in raster order; each row is laid out (c, dy, dx).
template <class T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.dim() != 3) throw DimensionError("patchify expects (C, H, W), got " + to_string(image.shape()));
  const std::size_t c = image.size(0), h = image.size(1), w = image.size(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("image " + to_string(image.shape()) + " not divisible into " +
                         std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  const std::size_t th = h / patch, tw = w / patch, row = c * patch * patch;
  auto index = std::make_shared<std::vector<std::uint32_t>>(th * tw * row);
  for (std::size_t ty = 0; ty < th; ++ty)
    for (std::size_t tx = 0; tx < tw; ++tx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            (*index)[(ty * tw + tx) * row + (ch * patch + dy) * patch + dx] =
                static_cast<std::uint32_t>((ch * h + ty * patch + dy) * w + tx * patch + dx);
  return gather(image, std::move(index), Shape{th * tw, row});
}

template <class T>
TokenGrid<T> patch_embed(const Tensor<T>& image, const PatchEmbedParams<T>& p) {
  const Tensor<T> rows = patchify(image, p.patch);
  const std::size_t th = image.size(1) / p.patch, tw = image.size(2) / p.patch;
  if (p.position.size(0) != th * tw) {
    throw DimensionError("positional table has " + std::to_string(p.position.size(0)) +
                         " rows for " + std::to_string(th * tw) + " tokens");
  }
  const Tensor<T> projected = linear(rows, p.weight);
  Tensor<T> tokens = p.fusion == PositionFusion::add ? add(projected, p.position)
                                                    : concat(projected, p.position, 1);
  return {tokens, th, tw, p.patch};
}

/// Token-wise 1x1 gate: CA(x) = x * sigmoid(x W + b).
template <class T>
struct ClassActivationParams {
  Tensor<T> weight;  // (D, D)
  Tensor<T> bias;    // (D)

  template <class Rng>
  static ClassActivationParams init(std::size_t dim, Rng& rng) {
    ClassActivationParams p{Tensor<T>::zeros({dim, dim}, true), Tensor<T>::zeros({dim}, true)};
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    for (auto& v : p.weight.values()) v = static_cast<T>(n(rng));
    return p;
  }

  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
Tensor<T> class_activate(const Tensor<T>& tokens, const ClassActivationParams<T>& p) {
  return mul(tokens, sigmoid(linear(tokens, p.weight, &p.bias)));
}

/// 3x3 same-padded convolution weights with bias.
template <class T>
struct ConvParams {
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (out)

  template <class Rng>
  static ConvParams init(std::size_t in, std::size_t out, std::size_t k, Rng& rng, double gain = 1.0) {
    ConvParams p{Tensor<T>::zeros({out, in, k, k}, true), Tensor<T>::zeros({out}, true)};
    // He-style scale for the relu stacks in the decoder.
    std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
    for (auto& v : p.weight.values()) v = static_cast<T>(n(rng));
    return p;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, &bias); }

  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct PromptOutput {
  Tensor<T> gated;       // CA(x_e), (n, D)
  Tensor<T> class_map;   // x_c, (1, NC, h, w)
  ClassProbMap<T> probs; // y_hat at (h/4, w/4)
};

/// x_c = Conv_1(CA(x_e)); y_hat = sigmoid(DS_4(x_c)).
template <class T>
PromptOutput<T> prompt_head(const TokenGrid<T>& grid, const ClassActivationParams<T>& ca,
                            const ConvParams<T>& conv1, PoolMode pool = PoolMode::average) {
  if (grid.height % 4 != 0 || grid.width % 4 != 0) {
    throw DimensionError("prompt head needs token dims divisible by 4, got " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  Tensor<T> gated = class_activate(grid.tokens, ca);
  TokenGrid<T> gated_grid{gated, grid.height, grid.width, grid.scale};
  Tensor<T> xc = conv1(gated_grid.to_map());
  return {gated, xc, {sigmoid(pool_downsample(xc, 4, pool))}};
}

/// Window presence labels for a class mask at window size `scale`.
inline MultiClassLabel generate_labels(const ClassMask& mask, std::size_t scale, std::size_t classes) {
  if (scale == 0 || mask.height % scale != 0 || mask.width % scale != 0) {
    throw std::invalid_argument("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                " not divisible by label scale " + std::to_string(scale));
  }
  MultiClassLabel y(mask.height / scale, mask.width / scale, classes, scale);
  for (std::size_t r = 0; r < mask.height; ++r) {
    for (std::size_t c = 0; c < mask.width; ++c) {
      const int v = mask.at(r, c);
      if (v < 0 || static_cast<std::size_t>(v) > classes) {
        throw std::invalid_argument("mask value " + std::to_string(v) + " outside [0, " +
                                    std::to_string(classes) + "]");
      }
      if (v != 0) y.at(r / scale, c / scale, static_cast<std::size_t>(v)) = 1;
    }
  }
  return y;
}

/// Mean per-class binary cross-entropy over all cells.
template <class T>
Tensor<T> prompt_loss(const ClassProbMap<T>& y_hat, const MultiClassLabel& y_d) {
  if (y_hat.classes() != y_d.classes || y_hat.height() != y_d.height || y_hat.width() != y_d.width) {
    throw DimensionError("prompt loss: prediction " + to_string(y_hat.probs.shape()) +
                         " vs labels " + std::to_string(y_d.classes) + "x" +
                         std::to_string(y_d.height) + "x" + std::to_string(y_d.width));
  }
  return binary_cross_entropy(y_hat.probs, y_d.to_tensor<T>());
}

}  // namespace cpmamba
