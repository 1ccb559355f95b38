#pragma once

#include <limits>
#include <memory>
#include <vector>

#include "cpmamba/ops.hpp"

namespace cpmamba {

namespace detail {

// cols[(c*k + ky)*k + kx, y*W + x] = img[c, y + ky - pad, x + kx - pad] (zero outside).
template <class T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, T* cols) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          T* dst = row + y * width;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill_n(dst, width, T{0});
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(sy)) * width;
          for (std::size_t x = 0; x < width; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
            dst[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) ? T{0}
                                                                        : src[static_cast<std::size_t>(sx)];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t k, T* img) {
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * hw;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(sy)) * width;
          const T* src = row + y * width;
          for (std::size_t x = 0; x < width; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(width)) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Same-padded stride-1 convolution. x: (batch, channels, h, w);
/// weight: (out, channels, k, k) with odd k; bias: (out) or null.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias = nullptr) {
  if (x.dim() != 4 || weight.dim() != 4) {
    throw DimensionError("conv2d expects 4-d input and weight, got " + to_string(x.shape()) +
                         " and " + to_string(weight.shape()));
  }
  const std::size_t batch = x.size(0), channels = x.size(1), height = x.size(2), width = x.size(3);
  const std::size_t out_ch = weight.size(0), k = weight.size(2);
  if (weight.size(1) != channels) {
    throw DimensionError("conv2d channel mismatch: input has " + std::to_string(channels) +
                         ", weight expects " + std::to_string(weight.size(1)));
  }
  if (weight.size(3) != k || k % 2 == 0) throw DimensionError("conv2d kernel must be square and odd");
  if (bias != nullptr && bias->numel() != out_ch) throw DimensionError("conv2d bias size mismatch");

  const std::size_t hw = height * width;
  const std::size_t patch = channels * k * k;
  const auto ehw = static_cast<Eigen::Index>(hw);
  const auto epatch = static_cast<Eigen::Index>(patch);
  const auto eout = static_cast<Eigen::Index>(out_ch);

  Tensor<T> out({batch, out_ch, height, width});
  // Unfolded input per batch element; k == 1 uses the input directly.
  auto cols = std::make_shared<std::vector<T>>(k == 1 ? 0 : batch * patch * hw);
  detail::ConstMatMap<T> wmat(weight.data().data(), eout, epatch);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = x.data().data() + b * channels * hw;
    const T* col = img;
    if (k != 1) {
      detail::im2col(img, channels, height, width, k, cols->data() + b * patch * hw);
      col = cols->data() + b * patch * hw;
    }
    detail::MatMap<T> o(out.data().data() + b * out_ch * hw, eout, ehw);
    o.noalias() = wmat * detail::ConstMatMap<T>(col, epatch, ehw);
    if (bias != nullptr) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias->data().data(), eout);
      o.colwise() += bv;
    }
  }

  Tensor<T> b_t = bias != nullptr ? *bias : Tensor<T>();
  const bool has_bias = bias != nullptr;
  detail::record(out, {&x, &weight, bias}, [=]() mutable {
    if (!out.has_grad()) return;
#ifdef CPMAMBA_FAULT_FLIP_CONV_ADJOINT
    const T sign = T{-1};
#else
    const T sign = T{1};
#endif
    auto g_all = out.grad_values();
    detail::ConstMatMap<T> w(std::as_const(weight).data().data(), eout, epatch);
    std::vector<T> gcols(x.requires_grad() ? patch * hw : 0);
    for (std::size_t b = 0; b < batch; ++b) {
      detail::ConstMatMap<T> g(g_all.data() + b * out_ch * hw, eout, ehw);
      const T* col = k == 1 ? std::as_const(x).data().data() + b * channels * hw
                            : cols->data() + b * patch * hw;
      if (weight.requires_grad()) {
        detail::MatMap<T>(weight.grad().data(), eout, epatch).noalias() +=
            g * detail::ConstMatMap<T>(col, epatch, ehw).transpose();
      }
      if (has_bias && b_t.requires_grad()) {
        // Plain loop: Eigen's reductions peel by address, which breaks run-to-run bit equality.
        auto gb = b_t.grad();
        const T* gp = g_all.data() + b * out_ch * hw;
        for (std::size_t o = 0; o < out_ch; ++o) {
          T acc{0};
          for (std::size_t i = 0; i < hw; ++i) acc += gp[o * hw + i];
          gb[o] += acc;
        }
      }
      if (x.requires_grad()) {
        T* gx = x.grad().data() + b * channels * hw;
        if (k == 1) {
          detail::MatMap<T>(gx, epatch, ehw).noalias() += sign * (w.transpose() * g);
        } else {
          detail::MatMap<T>(gcols.data(), epatch, ehw).noalias() = sign * (w.transpose() * g);
          detail::col2im_add(gcols.data(), channels, height, width, k, gx);
        }
      }
    }
  });
  return out;
}

enum class PoolMode { average, max };

/// Aggregates each factor x factor window of a (batch, channels, h, w) tensor.
template <class T>
Tensor<T> pool_downsample(const Tensor<T>& x, std::size_t factor, PoolMode mode = PoolMode::average) {
  if (x.dim() != 4) throw DimensionError("pool_downsample expects 4-d input, got " + to_string(x.shape()));
  if (factor == 0 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw DimensionError("pool_downsample: spatial dims " + to_string(x.shape()) +
                         " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t oh = h / factor, ow = w / factor;
  Tensor<T> out({x.size(0), x.size(1), oh, ow});
  // For max pooling, flat source index of each selected element.
  auto argmax = std::make_shared<std::vector<std::size_t>>(mode == PoolMode::max ? out.numel() : 0);
  auto src = x.data();
  auto o = out.data();
  const T inv = T{1} / static_cast<T>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t r = 0; r < oh; ++r) {
      for (std::size_t c = 0; c < ow; ++c) {
        const std::size_t oi = (p * oh + r) * ow + c;
        T acc = mode == PoolMode::max ? -std::numeric_limits<T>::infinity() : T{0};
        std::size_t best = 0;
        for (std::size_t dy = 0; dy < factor; ++dy) {
          for (std::size_t dx = 0; dx < factor; ++dx) {
            const std::size_t si = (p * h + r * factor + dy) * w + c * factor + dx;
            if (mode == PoolMode::max) {
              if (src[si] > acc) {
                acc = src[si];
                best = si;
              }
            } else {
              acc += src[si];
            }
          }
        }
        if (mode == PoolMode::max) {
          o[oi] = acc;
          (*argmax)[oi] = best;
        } else {
          o[oi] = acc * inv;
        }
      }
    }
  }
  detail::record(out, {&x}, [=]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad_values();
    auto gx = x.grad();
    if (mode == PoolMode::max) {
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
      return;
    }
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          const T v = g[(p * oh + r) * ow + c] * inv;
          for (std::size_t dy = 0; dy < factor; ++dy)
            for (std::size_t dx = 0; dx < factor; ++dx)
              gx[(p * h + r * factor + dy) * w + c * factor + dx] += v;
        }
  });
  return out;
}

/// Replicates every pixel of a (batch, channels, h, w) tensor into a
/// factor x factor block.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (x.dim() != 4) throw DimensionError("upsample_nearest expects 4-d input, got " + to_string(x.shape()));
  if (factor == 0) throw DimensionError("upsample_nearest factor must be positive");
  const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto index = std::make_shared<std::vector<std::uint32_t>>(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c)
        (*index)[(p * oh + r) * ow + c] =
            static_cast<std::uint32_t>((p * h + r / factor) * w + c / factor);
  return gather(x, std::move(index), Shape{x.size(0), x.size(1), oh, ow});
}

}  // namespace cpmamba
