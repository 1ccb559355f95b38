#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpmamba/grid.hpp"
#include "cpmamba/tensor.hpp"

namespace cpmamba {

/// Semantic channels of the first decoder head.
enum SemanticClass : int { semantic_background = 0, semantic_foreground = 1, semantic_contour = 2 };

/// Instance ids 1..K on a grid (0 = background) and the class of each id.
struct InstanceMask {
  Grid<int> ids;
  std::vector<int> classes;  // classes[k - 1] is the class of instance k

  InstanceMask() = default;
  InstanceMask(std::size_t h, std::size_t w) : ids(h, w, 0) {}

  std::size_t count() const { return classes.size(); }
  int class_of(int id) const { return classes.at(static_cast<std::size_t>(id - 1)); }

  void validate() const {
    std::vector<bool> seen(classes.size(), false);
    for (int v : ids.values) {
      if (v < 0 || static_cast<std::size_t>(v) > classes.size()) {
        throw std::invalid_argument("instance id " + std::to_string(v) + " has no class entry");
      }
      if (v > 0) seen[static_cast<std::size_t>(v - 1)] = true;
    }
    for (bool s : seen)
      if (!s) throw std::invalid_argument("instance ids are not contiguous");
  }

  /// Class id per pixel (0 = background).
  ClassMask class_mask() const {
    ClassMask m(ids.height, ids.width, 0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids.values[i] > 0) m.values[i] = class_of(ids.values[i]);
    return m;
  }
};

/// Semantic target: instance pixels 4-adjacent to another id (or background,
/// or the border) are contour, remaining instance pixels foreground.
inline Grid<int> render_semantic(const InstanceMask& m) {
  const auto& g = m.ids;
  Grid<int> out(g.height, g.width, semantic_background);
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      const int id = g.at(r, c);
      if (id == 0) continue;
      bool edge = r == 0 || c == 0 || r + 1 == g.height || c + 1 == g.width;
      if (!edge) {
        edge = g.at(r - 1, c) != id || g.at(r + 1, c) != id || g.at(r, c - 1) != id || g.at(r, c + 1) != id;
      }
      out.at(r, c) = edge ? semantic_contour : semantic_foreground;
    }
  }
  return out;
}

namespace detail {

template <class F>
void for_each_neighbor4(std::size_t r, std::size_t c, std::size_t h, std::size_t w, F&& f) {
  if (r > 0) f(r - 1, c);
  if (r + 1 < h) f(r + 1, c);
  if (c > 0) f(r, c - 1);
  if (c + 1 < w) f(r, c + 1);
}

// 4-connected labelling of pixels where in(r, c) holds; labels start at 1.
template <class Pred>
int label_components(std::size_t h, std::size_t w, Pred&& in, Grid<int>& labels) {
  labels = Grid<int>(h, w, 0);
  int next = 0;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (labels.values[start] != 0 || !in(start / w, start % w)) continue;
    labels.values[start] = ++next;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t p = queue.front();
      queue.pop_front();
      for_each_neighbor4(p / w, p % w, h, w, [&](std::size_t r, std::size_t c) {
        const std::size_t q = r * w + c;
        if (labels.values[q] == 0 && in(r, c)) {
          labels.values[q] = next;
          queue.push_back(q);
        }
      });
    }
  }
  return next;
}

}  // namespace detail

/// Post-processing on argmax maps. `semantic` holds SemanticClass labels;
/// `cls` the per-pixel class argmax over the foreground classes 1..NC.
/// Seeds are 4-connected foreground (non-contour) components; every
/// foreground or contour pixel joins the seed nearest in geodesic distance
/// through the mask (multi-source BFS, ties to the lower seed). Mask
/// components without a seed become their own instance. Each instance takes
/// the majority class of its pixels (ties to the lower class id).
inline InstanceMask extract_instances(const Grid<int>& semantic, const Grid<int>& cls, std::size_t classes) {
  require_same_dims(semantic.height, semantic.width, cls.height, cls.width, "extract_instances");
  const std::size_t h = semantic.height, w = semantic.width;
  auto in_mask = [&](std::size_t r, std::size_t c) { return semantic.at(r, c) != semantic_background; };
  Grid<int> seeds;
  int count = detail::label_components(
      h, w, [&](std::size_t r, std::size_t c) { return semantic.at(r, c) == semantic_foreground; }, seeds);

  Grid<int> ids = seeds;
  std::deque<std::size_t> queue;
  for (std::size_t p = 0; p < h * w; ++p)
    if (ids.values[p] != 0) queue.push_back(p);
  // Seeds are enqueued in raster order, so equal-distance ties resolve by
  // first discovery.
  while (!queue.empty()) {
    const std::size_t p = queue.front();
    queue.pop_front();
    detail::for_each_neighbor4(p / w, p % w, h, w, [&](std::size_t r, std::size_t c) {
      const std::size_t q = r * w + c;
      if (ids.values[q] == 0 && in_mask(r, c)) {
        ids.values[q] = ids.values[p];
        queue.push_back(q);
      }
    });
  }
  Grid<int> rest;
  const int extra = detail::label_components(
      h, w, [&](std::size_t r, std::size_t c) { return in_mask(r, c) && ids.at(r, c) == 0; }, rest);
  for (std::size_t p = 0; p < h * w; ++p)
    if (rest.values[p] != 0) ids.values[p] = count + rest.values[p];
  count += extra;

  // Renumber by first raster appearance.
  std::vector<int> remap(static_cast<std::size_t>(count) + 1, 0);
  int next = 0;
  for (int& v : ids.values) {
    if (v == 0) continue;
    if (remap[static_cast<std::size_t>(v)] == 0) remap[static_cast<std::size_t>(v)] = ++next;
    v = remap[static_cast<std::size_t>(v)];
  }
  InstanceMask out;
  out.ids = std::move(ids);
  std::vector<std::vector<std::size_t>> votes(static_cast<std::size_t>(next), std::vector<std::size_t>(classes + 1, 0));
  for (std::size_t p = 0; p < h * w; ++p) {
    const int v = out.ids.values[p];
    if (v == 0) continue;
    const int c = cls.values[p];
    if (c < 1 || static_cast<std::size_t>(c) > classes) {
      throw std::invalid_argument("class map value " + std::to_string(c) + " outside [1, " +
                                  std::to_string(classes) + "]");
    }
    ++votes[static_cast<std::size_t>(v - 1)][static_cast<std::size_t>(c)];
  }
  for (const auto& v : votes) {
    out.classes.push_back(static_cast<int>(std::max_element(v.begin() + 1, v.end()) - v.begin()));
  }
  return out;
}

/// Probability (or logit) maps: semantic (1, 3, H, W), classes (1, NC+1, H, W)
/// with channel 0 the background class.
template <class T>
InstanceMask extract_instances(const Tensor<T>& semantic, const Tensor<T>& class_probs) {
  if (semantic.dim() != 4 || class_probs.dim() != 4 || semantic.size(1) != 3 || class_probs.size(1) < 2 ||
      semantic.size(2) != class_probs.size(2) || semantic.size(3) != class_probs.size(3)) {
    throw DimensionError("extract_instances: maps " + to_string(semantic.shape()) + " and " +
                         to_string(class_probs.shape()));
  }
  const std::size_t h = semantic.size(2), w = semantic.size(3), hw = h * w, nc = class_probs.size(1) - 1;
  Grid<int> sem(h, w, 0), cls(h, w, 1);
  for (std::size_t p = 0; p < hw; ++p) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (semantic[c * hw + p] > semantic[best * hw + p]) best = c;
    sem.values[p] = best;
    std::size_t arg = 1;
    for (std::size_t c = 2; c <= nc; ++c)
      if (class_probs[c * hw + p] > class_probs[arg * hw + p]) arg = c;
    cls.values[p] = static_cast<int>(arg);
  }
  return extract_instances(sem, cls, nc);
}

// ---------------------------------------------------------------------------
// Metrics. Image-level counts pool additively so dataset-level reports are
// ratios of sums.

struct DiceCounts {
  double intersection = 0, total = 0;
  double value() const { return total == 0 ? 1.0 : 2.0 * intersection / total; }
};

inline DiceCounts dice_counts(const Grid<int>& pred, const Grid<int>& gt) {
  require_same_dims(pred.height, pred.width, gt.height, gt.width, "dice");
  DiceCounts d;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    d.intersection += p && g;
    d.total += static_cast<double>(p) + static_cast<double>(g);
  }
  return d;
}

/// Binary dice on nonzero pixels; 1 when both are empty.
inline double dice(const Grid<int>& pred, const Grid<int>& gt) { return dice_counts(pred, gt).value(); }

namespace detail {

// Pairwise intersections plus per-instance areas.
struct Overlap {
  std::vector<double> pred_area, gt_area;
  std::map<std::pair<int, int>, double> inter;  // (gt id, pred id)

  Overlap(const InstanceMask& pred, const InstanceMask& gt)
      : pred_area(pred.count(), 0.0), gt_area(gt.count(), 0.0) {
    require_same_dims(pred.ids.height, pred.ids.width, gt.ids.height, gt.ids.width, "instance metric");
    for (std::size_t i = 0; i < pred.ids.size(); ++i) {
      const int p = pred.ids.values[i], g = gt.ids.values[i];
      if (p > 0) pred_area.at(static_cast<std::size_t>(p - 1)) += 1;
      if (g > 0) gt_area.at(static_cast<std::size_t>(g - 1)) += 1;
      if (p > 0 && g > 0) inter[{g, p}] += 1;
    }
  }
  double iou(int g, int p) const {
    auto it = inter.find({g, p});
    const double i = it == inter.end() ? 0.0 : it->second;
    return i / (gt_area[static_cast<std::size_t>(g - 1)] + pred_area[static_cast<std::size_t>(p - 1)] - i);
  }
  double intersection(int g, int p) const {
    auto it = inter.find({g, p});
    return it == inter.end() ? 0.0 : it->second;
  }
  // Unique pairs with IoU > 0.5.
  std::vector<std::pair<int, int>> matches() const {
    std::vector<std::pair<int, int>> m;
    for (const auto& [key, i] : inter)
      if (iou(key.first, key.second) > 0.5) m.push_back(key);
    return m;
  }
};

}  // namespace detail

struct AjiCounts {
  double intersection = 0, union_ = 0;
  double value() const { return union_ == 0 ? 1.0 : intersection / union_; }
};

/// Aggregated Jaccard: each ground-truth instance takes the prediction with
/// maximal IoU (first on ties; IoU 0 means no match); predictions used by no
/// ground truth add their area to the union.
inline AjiCounts aji_counts(const InstanceMask& pred, const InstanceMask& gt) {
  detail::Overlap ov(pred, gt);
  AjiCounts a;
  std::vector<bool> used(pred.count(), false);
  for (int g = 1; g <= static_cast<int>(gt.count()); ++g) {
    int best = 0;
    double best_iou = 0.0;
    for (int p = 1; p <= static_cast<int>(pred.count()); ++p) {
      const double v = ov.iou(g, p);
      if (v > best_iou) {
        best_iou = v;
        best = p;
      }
    }
    const double ga = ov.gt_area[static_cast<std::size_t>(g - 1)];
    if (best == 0) {
      a.union_ += ga;
      continue;
    }
    const double i = ov.intersection(g, best);
    a.intersection += i;
    a.union_ += ga + ov.pred_area[static_cast<std::size_t>(best - 1)] - i;
    used[static_cast<std::size_t>(best - 1)] = true;
  }
  for (std::size_t p = 0; p < used.size(); ++p)
    if (!used[p]) a.union_ += ov.pred_area[p];
  return a;
}

inline double aji(const InstanceMask& pred, const InstanceMask& gt) { return aji_counts(pred, gt).value(); }

struct PanopticCounts {
  double tp = 0, fp = 0, fn = 0, iou_sum = 0;
  double dq() const { return tp + fp + fn == 0 ? 1.0 : tp / (tp + 0.5 * fp + 0.5 * fn); }
  double sq() const {
    if (tp + fp + fn == 0) return 1.0;
    return tp == 0 ? 0.0 : iou_sum / tp;
  }
  double pq() const { return dq() * sq(); }
};

struct PanopticQuality {
  double dq = 0, sq = 0, pq = 0;
};

inline PanopticCounts panoptic_counts(const InstanceMask& pred, const InstanceMask& gt) {
  detail::Overlap ov(pred, gt);
  PanopticCounts c;
  for (const auto& [g, p] : ov.matches()) {
    c.tp += 1;
    c.iou_sum += ov.iou(g, p);
  }
  c.fp = static_cast<double>(pred.count()) - c.tp;
  c.fn = static_cast<double>(gt.count()) - c.tp;
  return c;
}

inline PanopticQuality panoptic(const InstanceMask& pred, const InstanceMask& gt) {
  const auto c = panoptic_counts(pred, gt);
  return {c.dq(), c.sq(), c.pq()};
}

/// Detection and per-class confusion counts over IoU > 0.5 matches.
struct F1Counts {
  double tp = 0, fp = 0, fn = 0;
  std::vector<double> class_tp, class_fp, class_fn;  // index c - 1

  explicit F1Counts(std::size_t classes = 0) : class_tp(classes, 0), class_fp(classes, 0), class_fn(classes, 0) {}

  static double f1(double tp, double fp, double fn) {
    return tp + fp + fn == 0 ? 1.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  }
  double f_detection() const { return f1(tp, fp, fn); }
  std::vector<double> per_class() const {
    std::vector<double> out;
    for (std::size_t c = 0; c < class_tp.size(); ++c) out.push_back(f1(class_tp[c], class_fp[c], class_fn[c]));
    return out;
  }
  F1Counts& operator+=(const F1Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    for (std::size_t c = 0; c < class_tp.size(); ++c) {
      class_tp[c] += o.class_tp[c];
      class_fp[c] += o.class_fp[c];
      class_fn[c] += o.class_fn[c];
    }
    return *this;
  }
};

/// A matched pair of equal class is a true positive of that class; a matched
/// pair with disagreeing classes is a false positive of the predicted class
/// and a false negative of the true one.
inline F1Counts f1_counts(const InstanceMask& pred, const InstanceMask& gt, std::size_t classes) {
  detail::Overlap ov(pred, gt);
  F1Counts f(classes);
  std::vector<bool> pred_matched(pred.count(), false), gt_matched(gt.count(), false);
  auto slot = [&](int c) {
    if (c < 1 || static_cast<std::size_t>(c) > classes) throw std::invalid_argument("instance class outside [1, NC]");
    return static_cast<std::size_t>(c - 1);
  };
  for (const auto& [g, p] : ov.matches()) {
    pred_matched[static_cast<std::size_t>(p - 1)] = true;
    gt_matched[static_cast<std::size_t>(g - 1)] = true;
    f.tp += 1;
    const int gc = gt.class_of(g), pc = pred.class_of(p);
    if (gc == pc) {
      f.class_tp[slot(gc)] += 1;
    } else {
      f.class_fp[slot(pc)] += 1;
      f.class_fn[slot(gc)] += 1;
    }
  }
  for (std::size_t p = 0; p < pred.count(); ++p) {
    if (pred_matched[p]) continue;
    f.fp += 1;
    f.class_fp[slot(pred.classes[p])] += 1;
  }
  for (std::size_t g = 0; g < gt.count(); ++g) {
    if (gt_matched[g]) continue;
    f.fn += 1;
    f.class_fn[slot(gt.classes[g])] += 1;
  }
  return f;
}

struct ClassificationF1 {
  double f_detection = 0;
  std::vector<double> per_class;
};

inline ClassificationF1 classification_f1(const InstanceMask& pred, const InstanceMask& gt, std::size_t classes) {
  const auto f = f1_counts(pred, gt, classes);
  return {f.f_detection(), f.per_class()};
}

/// Pooled counts over a set of images.
struct MetricAccumulator {
  DiceCounts dice;
  AjiCounts aji;
  PanopticCounts panoptic;
  F1Counts f1;
  std::size_t images = 0;

  explicit MetricAccumulator(std::size_t classes = 0) : f1(classes) {}

  void add(const InstanceMask& pred, const InstanceMask& gt) {
    const auto d = dice_counts(pred.ids, gt.ids);
    dice.intersection += d.intersection;
    dice.total += d.total;
    const auto a = aji_counts(pred, gt);
    aji.intersection += a.intersection;
    aji.union_ += a.union_;
    const auto p = panoptic_counts(pred, gt);
    panoptic.tp += p.tp;
    panoptic.fp += p.fp;
    panoptic.fn += p.fn;
    panoptic.iou_sum += p.iou_sum;
    f1 += f1_counts(pred, gt, f1.class_tp.size());
    ++images;
  }
};

struct MetricsReport {
  double dice = 0, aji = 0, dq = 0, sq = 0, pq = 0, f_detection = 0;
  std::vector<double> per_class_f1;
  std::size_t images = 0;

  static MetricsReport from(const MetricAccumulator& acc) {
    MetricsReport r;
    r.dice = acc.dice.value();
    r.aji = acc.aji.value();
    r.dq = acc.panoptic.dq();
    r.sq = acc.panoptic.sq();
    r.pq = acc.panoptic.pq();
    r.f_detection = acc.f1.f_detection();
    r.per_class_f1 = acc.f1.per_class();
    r.images = acc.images;
    return r;
  }

  nlohmann::json to_json() const {
    return {{"images", images}, {"dice", dice}, {"aji", aji}, {"dq", dq}, {"sq", sq},
            {"pq", pq},         {"f_detection", f_detection}, {"per_class_f1", per_class_f1}};
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.images = j.at("images").get<std::size_t>();
    r.dice = j.at("dice").get<double>();
    r.aji = j.at("aji").get<double>();
    r.dq = j.at("dq").get<double>();
    r.sq = j.at("sq").get<double>();
    r.pq = j.at("pq").get<double>();
    r.f_detection = j.at("f_detection").get<double>();
    r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
    return r;
  }
};

/// Throws unless `j` has the report fields with values in [0, 1].
inline void validate_report_json(const nlohmann::json& j) {
  const auto r = MetricsReport::from_json(j);
  for (double v : {r.dice, r.aji, r.dq, r.sq, r.pq, r.f_detection})
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("metrics report value outside [0, 1]");
  for (double v : r.per_class_f1)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("metrics report value outside [0, 1]");
}

}  // namespace cpmamba
