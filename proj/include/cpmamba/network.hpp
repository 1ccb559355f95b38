#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cpmamba/loss.hpp"
#include "cpmamba/metrics.hpp"
#include "cpmamba/optim.hpp"
#include "cpmamba/prompt.hpp"
#include "cpmamba/sort_scan.hpp"

namespace cpmamba {

enum class SkipSource { pre_scan, post_scan };

struct ModelConfig {
  std::size_t classes = 3;
  std::size_t dim = 32;
  std::size_t blocks = 4;
  double lambda = 0.2;
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t state_dim = 16;
  std::size_t image_size = 128;
  SgdSettings sgd{};
  std::size_t iterations = 1000;
  std::size_t batch_size = 4;
  std::size_t log_every = 10;
  std::uint64_t seed = 1;
  OrderingKind ordering = OrderingKind::probability_sorted;
  bool sorting_on = true;
  bool phenotype_on = true;
  bool share_ca = true;
  bool shared_ssm = false;
  bool skips_on = true;
  SkipSource skip_source = SkipSource::pre_scan;
  PositionFusion position = PositionFusion::add;
  PoolMode prompt_pool = PoolMode::average;
  ScanMode scan_mode = ScanMode::parallel;

  /// Ordering actually used inside the blocks.
  OrderingKind effective_ordering() const { return sorting_on ? ordering : OrderingKind::raster; }

  void validate() const {
    if (classes < 1) throw std::invalid_argument("model: classes must be >= 1");
    if (blocks < 1) throw std::invalid_argument("model: blocks must be >= 1");
    if (dim < 4 || dim % 4 != 0) throw std::invalid_argument("model: dim must be a positive multiple of 4");
    if (state_dim < 1) throw std::invalid_argument("model: state_dim must be >= 1");
    const std::size_t unit = (std::size_t{1} << (blocks + 1)) * 4;
    if (image_size == 0 || image_size % unit != 0) {
      throw std::invalid_argument("model: image_size must be a multiple of " + std::to_string(unit) + " for " +
                                  std::to_string(blocks) + " blocks");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("model: lambda must lie in [0, 1]");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("model: alpha and beta must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("model: batch_size must be >= 1");
    if (!(sgd.lr > 0.0) || !(sgd.momentum >= 0.0) || !(sgd.weight_decay >= 0.0) ||
        !(sgd.clip_norm >= 0.0)) {
      throw std::invalid_argument("model: invalid optimizer settings");
    }
  }

  std::size_t block_channels(std::size_t b) const { return dim << b; }
  std::size_t block_grid(std::size_t b) const { return image_size / (std::size_t{4} << b); }
  /// Number of SSM parameter sets per block.
  std::size_t scan_count() const {
    const auto kind = effective_ordering();
    if (kind == OrderingKind::probability_sorted) return shared_ssm ? 1 : classes;
    return baseline_order(kind, 1, 1).size();
  }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gain, shift;
  static LayerNormParams init(std::size_t d) {
    return {Tensor<T>::full({d}, T{1}, true), Tensor<T>::zeros({d}, true)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, shift); }
  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".shift", shift});
  }
};

template <class T>
struct LinearParams {
  Tensor<T> weight, bias;
  template <class Rng>
  static LinearParams init(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
    LinearParams p{Tensor<T>::zeros({in, out}, true), Tensor<T>::zeros({out}, true)};
    std::normal_distribution<double> n(0.0, gain / std::sqrt(static_cast<double>(in)));
    for (auto& v : p.weight.values()) v = static_cast<T>(n(rng));
    return p;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, &bias); }
  void append_named(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct BlockParams {
  LayerNormParams<T> norm1, norm2;
  ClassActivationParams<T> ca;
  ClassActivationParams<T> ca_phenotype;  // used only when CA is not shared
  ConvParams<T> conv1;                    // C -> NC
  ConvParams<T> conv2;                    // C -> C
  std::vector<SSMParams<T>> scans;
  LinearParams<T> ffn_in, ffn_out;
};

namespace detail {

// (h*w, C) tokens -> (h/2 * w/2, 4C): each output token concatenates its 2x2
// neighbourhood in (dy, dx) order.
inline IndexMap merge_index(std::size_t h, std::size_t w, std::size_t c) {
  auto idx = std::make_shared<std::vector<std::uint32_t>>((h / 2) * (w / 2) * 4 * c);
  std::size_t k = 0;
  for (std::size_t r = 0; r < h / 2; ++r)
    for (std::size_t col = 0; col < w / 2; ++col)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx)
          for (std::size_t ch = 0; ch < c; ++ch)
            (*idx)[k++] = static_cast<std::uint32_t>(((2 * r + dy) * w + 2 * col + dx) * c + ch);
  return idx;
}

}  // namespace detail

template <class T>
struct BlockOutput {
  TokenGrid<T> tokens;
  ClassProbMap<T> probs;
  Tensor<T> prompt_loss;  // empty when no labels were supplied
};

template <class T>
struct ModelOutput {
  Tensor<T> semantic;  // (1, 3, H, W) logits
  Tensor<T> classes;   // (1, NC+1, H, W) logits
  std::vector<ClassProbMap<T>> prompts;
  std::vector<Tensor<T>> block_losses;
};

template <class T>
struct Encoded {
  std::vector<TokenGrid<T>> inputs;   // pre-scan block inputs
  std::vector<TokenGrid<T>> outputs;  // block outputs
  std::vector<ClassProbMap<T>> prompts;
  std::vector<Tensor<T>> block_losses;
};

struct LossTerms {
  double total = 0, prompt = 0, semantic = 0, classes = 0;
};

/// Per-image training targets.
struct Targets {
  std::vector<int> semantic;  // H*W semantic classes
  std::vector<int> classes;   // H*W class ids 0..NC
  std::vector<MultiClassLabel> blocks;

  static Targets from(const InstanceMask& instances, std::size_t blocks, std::size_t nc) {
    Targets t;
    t.semantic = render_semantic(instances).values;
    const ClassMask cm = instances.class_mask();
    t.classes = cm.values;
    for (std::size_t b = 0; b < blocks; ++b) t.blocks.push_back(generate_labels(cm, std::size_t{16} << b, nc));
    return t;
  }
};

template <class T>
class Model {
 public:
  Model() = default;

  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t D = cfg_.dim, NC = cfg_.classes;
    const std::size_t g0 = cfg_.block_grid(0);
    embed_ = PatchEmbedParams<T>::init(3, g0 * g0, D, rng, 4, cfg_.position);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::size_t C = cfg_.block_channels(b);
      BlockParams<T> p;
      p.norm1 = LayerNormParams<T>::init(C);
      p.norm2 = LayerNormParams<T>::init(C);
      p.ca = ClassActivationParams<T>::init(C, rng);
      if (!cfg_.share_ca) p.ca_phenotype = ClassActivationParams<T>::init(C, rng);
      p.conv1 = ConvParams<T>::init(C, NC, 3, rng);
      p.conv2 = ConvParams<T>::init(C, C, 3, rng);
      for (std::size_t k = 0; k < cfg_.scan_count(); ++k) p.scans.push_back(SSMParams<T>::init(C, cfg_.state_dim, rng));
      p.ffn_in = LinearParams<T>::init(C, 2 * C, rng, std::sqrt(2.0));
      p.ffn_out = LinearParams<T>::init(2 * C, C, rng, 0.5);
      blocks_.push_back(std::move(p));
      if (b + 1 < cfg_.blocks) merges_.push_back(LinearParams<T>::init(4 * C, 2 * C, rng));
    }
    semantic_ = make_decoder(3, rng);
    class_ = make_decoder(NC + 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Every trainable tensor with a stable dotted name, in a fixed order.
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    embed_.append_named("embed", out);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& p = blocks_[b];
      const std::string pre = "block" + std::to_string(b);
      p.norm1.append_named(pre + ".norm1", out);
      p.ca.append_named(pre + ".ca", out);
      if (!cfg_.share_ca) p.ca_phenotype.append_named(pre + ".ca_phenotype", out);
      p.conv1.append_named(pre + ".conv1", out);
      if (cfg_.phenotype_on) p.conv2.append_named(pre + ".conv2", out);
      for (std::size_t k = 0; k < p.scans.size(); ++k) p.scans[k].append_named(pre + ".scan" + std::to_string(k), out);
      p.norm2.append_named(pre + ".norm2", out);
      p.ffn_in.append_named(pre + ".ffn_in", out);
      p.ffn_out.append_named(pre + ".ffn_out", out);
      if (b < merges_.size()) merges_[b].append_named(pre + ".merge", out);
    }
    append_decoder("semantic", semantic_, out);
    append_decoder("class", class_, out);
    return out;
  }

  BlockOutput<T> block(std::size_t b, const TokenGrid<T>& t, const MultiClassLabel* labels) const {
    const auto& p = blocks_.at(b);
    const TokenGrid<T> u{p.norm1(t.tokens), t.height, t.width, t.scale};
    PromptOutput<T> prompt = prompt_head(u, p.ca, p.conv1, cfg_.prompt_pool);
    BlockOutput<T> out;
    out.probs = prompt.probs;
    if (labels != nullptr) out.prompt_loss = prompt_loss(prompt.probs, *labels);

    Tensor<T> x_f = u.tokens;
    if (cfg_.phenotype_on) {
      const Tensor<T> gated = cfg_.share_ca ? prompt.gated : class_activate(u.tokens, p.ca_phenotype);
      x_f = phenotype_fuse(u, gated, p.conv2, static_cast<T>(cfg_.lambda));
    }
    Tensor<T> x_enc;
    const OrderingKind kind = cfg_.effective_ordering();
    if (kind == OrderingKind::probability_sorted) {
      // Orders come from the detached, upsampled prompt; no gradient through sorting.
      ClassProbMap<T> y_u{upsample_nearest(prompt.probs.probs.detach(), 4)};
      x_enc = aggregate_scan(x_f, y_u, p.scans, cfg_.scan_mode);
    } else {
      const auto orders = baseline_order(kind, t.height, t.width);
      x_enc = aggregate_over_orderings(x_f, orders, [&](std::size_t k, const Tensor<T>& seq) {
        return selective_scan(seq, p.scans[k], cfg_.scan_mode);
      });
    }
    const Tensor<T> mid = add(t.tokens, x_enc);
    const Tensor<T> ffn = p.ffn_out(relu(p.ffn_in(p.norm2(mid))));
    out.tokens = {add(mid, ffn), t.height, t.width, t.scale};
    return out;
  }

  /// (3, H, W) image; `targets` may be null for inference.
  Encoded<T> encode(const Tensor<T>& image, const Targets* targets) const {
    if (image.dim() != 3 || image.size(0) != 3 || image.size(1) != cfg_.image_size ||
        image.size(2) != cfg_.image_size) {
      throw DimensionError("model expects a (3, " + std::to_string(cfg_.image_size) + ", " +
                           std::to_string(cfg_.image_size) + ") image, got " + to_string(image.shape()));
    }
    Encoded<T> enc;
    TokenGrid<T> t = patch_embed(image, embed_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      enc.inputs.push_back(t);
      auto out = block(b, t, targets != nullptr ? &targets->blocks.at(b) : nullptr);
      enc.prompts.push_back(out.probs);
      if (targets != nullptr) enc.block_losses.push_back(out.prompt_loss);
      enc.outputs.push_back(out.tokens);
      if (b + 1 < blocks_.size()) {
        const auto& o = out.tokens;
        const std::size_t c = o.channels();
        Tensor<T> merged = gather(o.tokens, detail::merge_index(o.height, o.width, c),
                                  Shape{(o.height / 2) * (o.width / 2), 4 * c});
        t = {merges_[b](merged), o.height / 2, o.width / 2, o.scale * 2};
      }
    }
    return enc;
  }

  ModelOutput<T> forward(const Tensor<T>& image, const Targets* targets = nullptr) const {
    Encoded<T> enc = encode(image, targets);
    ModelOutput<T> out;
    out.semantic = decode(semantic_, enc, image);
    out.classes = decode(class_, enc, image);
    out.prompts = std::move(enc.prompts);
    out.block_losses = std::move(enc.block_losses);
    return out;
  }

  /// L = mean_b L_p + alpha (CE + Dice)_semantic + beta (CE + Dice)_class.
  Tensor<T> total_loss(const ModelOutput<T>& out, const Targets& targets, LossTerms* terms = nullptr) const {
    if (out.block_losses.size() != blocks_.size() || targets.semantic.size() != out.semantic.numel() / 3 ||
        targets.classes.size() != targets.semantic.size()) {
      throw std::invalid_argument("total_loss: missing or mismatched targets");
    }
    Tensor<T> lp = out.block_losses[0];
    for (std::size_t b = 1; b < out.block_losses.size(); ++b) lp = add(lp, out.block_losses[b]);
    lp = scale(lp, T{1} / static_cast<T>(out.block_losses.size()));
    const std::span<const int> sem(targets.semantic), cls(targets.classes);
    const Tensor<T> l_sem = add(softmax_cross_entropy(out.semantic, sem), dice_loss(softmax(out.semantic), sem));
    const Tensor<T> l_cls = add(softmax_cross_entropy(out.classes, cls), dice_loss(softmax(out.classes), cls));
    Tensor<T> total = lp;
    if (cfg_.alpha != 0.0) total = add(total, scale(l_sem, static_cast<T>(cfg_.alpha)));
    if (cfg_.beta != 0.0) total = add(total, scale(l_cls, static_cast<T>(cfg_.beta)));
    if (terms != nullptr) *terms = {static_cast<double>(total.item()), static_cast<double>(lp.item()),
                                    static_cast<double>(l_sem.item()), static_cast<double>(l_cls.item())};
    return total;
  }

  InstanceMask predict_instances(const ModelOutput<T>& out) const {
    return extract_instances(out.semantic, out.classes);
  }

 private:
  struct Decoder {
    std::vector<ConvParams<T>> stages;  // index b: level b+1 -> level b
    ConvParams<T> up_half, up_full, head;
  };

  template <class Rng>
  Decoder make_decoder(std::size_t out_channels, Rng& rng) const {
    Decoder d;
    for (std::size_t b = 0; b + 1 < cfg_.blocks; ++b) {
      const std::size_t in = cfg_.block_channels(b + 1) + (cfg_.skips_on ? cfg_.block_channels(b) : 0);
      d.stages.push_back(ConvParams<T>::init(in, cfg_.block_channels(b), 3, rng));
    }
    d.up_half = ConvParams<T>::init(cfg_.dim, cfg_.dim / 2, 3, rng);
    d.up_full = ConvParams<T>::init(cfg_.dim / 2 + 3, cfg_.dim / 4, 3, rng);
    // Small head: near-uniform softmax at init keeps the first SGD steps sane.
    d.head = ConvParams<T>::init(cfg_.dim / 4, out_channels, 1, rng, 0.1);
    return d;
  }

  static void append_decoder(const std::string& pre, const Decoder& d, std::vector<NamedTensor<T>>& out) {
    for (std::size_t b = 0; b < d.stages.size(); ++b) d.stages[b].append_named(pre + ".stage" + std::to_string(b), out);
    d.up_half.append_named(pre + ".up_half", out);
    d.up_full.append_named(pre + ".up_full", out);
    d.head.append_named(pre + ".head", out);
  }

  Tensor<T> decode(const Decoder& d, const Encoded<T>& enc, const Tensor<T>& image) const {
    const auto& skips = cfg_.skip_source == SkipSource::pre_scan ? enc.inputs : enc.outputs;
    Tensor<T> x = enc.outputs.back().to_map();
    for (std::size_t b = d.stages.size(); b-- > 0;) {
      x = upsample_nearest(x, 2);
      if (cfg_.skips_on) x = concat(x, skips[b].to_map(), 1);
      x = relu(d.stages[b](x));
    }
    x = relu(d.up_half(upsample_nearest(x, 2)));
    const Tensor<T> img = reshape(image, Shape{1, 3, image.size(1), image.size(2)});
    x = relu(d.up_full(concat(upsample_nearest(x, 2), img, 1)));
    return d.head(x);
  }

  ModelConfig cfg_;
  PatchEmbedParams<T> embed_;
  std::vector<BlockParams<T>> blocks_;
  std::vector<LinearParams<T>> merges_;
  Decoder semantic_, class_;
};

}  // namespace cpmamba
