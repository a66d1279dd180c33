// Copyright 2026 The HetAttr Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Saliency evaluation: Otsu binarization, mask scoring at a relaxed IoU,
// and perturbation curves.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetattr/error.hpp"
#include "hetattr/propagation.hpp"

namespace hetattr {

struct BinarizationConfig {
  std::size_t bins = 256;
  double scale = 1.0;  // mask = score >= scale * otsu_threshold

  void check() const {
    if (bins < 2) throw ValidationError("binarization needs at least 2 bins");
    if (!(scale > 0.0)) throw ValidationError("threshold scale must be positive");
  }
};

/// Histogram over [min, max] with `bins` equal-width bins. The maximum
/// value falls in the last bin.
struct Histogram {
  double lo = 0.0;
  double width = 0.0;
  std::vector<double> counts;

  static Histogram of(std::span<const double> values, std::size_t bins) {
    if (values.empty()) throw NumericalError("histogram of an empty sample");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    if (!(*mx > *mn)) throw NumericalError("all values are equal; no threshold separates them");
    Histogram h{*mn, (*mx - *mn) / static_cast<double>(bins), std::vector<double>(bins, 0.0)};
    for (double v : values) h.counts[h.bin_of(v)] += 1.0;
    return h;
  }

  std::size_t bin_of(double v) const {
    const auto b = static_cast<std::size_t>(std::floor((v - lo) / width));
    return std::min(b, counts.size() - 1);
  }
  double center(std::size_t b) const { return lo + (static_cast<double>(b) + 0.5) * width; }
  /// Lower edge of bin b, i.e. the boundary between bins b-1 and b.
  double boundary(std::size_t b) const { return lo + static_cast<double>(b) * width; }
};

/// Otsu's method over a binned histogram: picks the bin boundary that
/// maximizes between-class variance (bin centers stand in for values).
/// Ties resolve to the lowest boundary.
inline double otsu_threshold(std::span<const double> values, std::size_t bins = 256) {
  if (bins < 2) throw ValidationError("otsu needs at least 2 bins");
  const Histogram h = Histogram::of(values, bins);
  const double total = static_cast<double>(values.size());
  double total_moment = 0.0;
  for (std::size_t b = 0; b < bins; ++b) total_moment += h.counts[b] * h.center(b);

  double weight0 = 0.0;
  double moment0 = 0.0;
  double best = -1.0;
  std::size_t best_k = 1;
  for (std::size_t k = 1; k < bins; ++k) {
    weight0 += h.counts[k - 1];
    moment0 += h.counts[k - 1] * h.center(k - 1);
    const double weight1 = total - weight0;
    if (weight0 == 0.0 || weight1 == 0.0) continue;
    const double mean0 = moment0 / weight0;
    const double mean1 = (total_moment - moment0) / weight1;
    const double between = (weight0 / total) * (weight1 / total) * (mean0 - mean1) * (mean0 - mean1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return h.boundary(best_k);
}

struct BinaryMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}
  BinaryMask(std::size_t r, std::size_t c, std::vector<std::uint8_t> d)
      : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) throw ShapeError("mask data does not match its shape");
  }

  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::size_t area() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
  }
  bool subset_of(const BinaryMask& other) const {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i] && !other.data[i]) return false;
    }
    return true;
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

inline BinaryMask upsample_nearest(const BinaryMask& mask, std::size_t rows, std::size_t cols) {
  if (mask.rows == 0 || mask.cols == 0) throw ShapeError("cannot upsample an empty mask");
  BinaryMask out(rows, cols);
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      out(y, x) = mask(y * mask.rows / rows, x * mask.cols / cols);
    }
  }
  return out;
}

/// Thresholds the grid tokens of `map` at scale * Otsu and upsamples the
/// patch-level mask to rows x cols. Thresholding happens at patch
/// resolution, before upsampling.
inline BinaryMask binarize_and_upsample(const SaliencyMap& map, const BinarizationConfig& cfg,
                                        std::size_t rows, std::size_t cols) {
  cfg.check();
  const std::vector<double> values = map.grid_scores();
  const double threshold = cfg.scale * otsu_threshold(values, cfg.bins);
  BinaryMask patches(map.grid->rows, map.grid->cols);
  for (std::size_t i = 0; i < values.size(); ++i) patches.data[i] = values[i] >= threshold ? 1 : 0;
  return upsample_nearest(patches, rows, cols);
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw ShapeError("mask shapes differ: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                     " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    inter += (a.data[i] && b.data[i]) ? 1 : 0;
    uni += (a.data[i] || b.data[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct ScoredMask {
  BinaryMask mask;
  double confidence = 0.0;
};

/// Predictions and ground truths of one image.
struct ImageInstances {
  std::vector<ScoredMask> predictions;
  std::vector<BinaryMask> ground_truths;
};

/// Area ranges in pixels: medium is [medium_min, large_min), large is
/// [large_min, inf).
struct SizeBuckets {
  double medium_min = 0.0;
  double large_min = 0.0;

  /// COCO's 32^2 / 96^2 limits expressed in units of a 32-pixel detector
  /// stride: one patch and a 3x3 patch block.
  static SizeBuckets for_patch(std::size_t patch_height, std::size_t patch_width) {
    const double patch = static_cast<double>(patch_height * patch_width);
    return {patch, 9.0 * patch};
  }
};

struct SegmentationScore {
  double iou_min = 0.2;
  // Empty when the bucket holds no ground truth.
  std::optional<double> ap, ar;
  std::optional<double> ap_medium, ar_medium;
  std::optional<double> ap_large, ar_large;
};

namespace detail {

struct RangeMetrics {
  std::optional<double> ap, ar;
};

inline RangeMetrics evaluate_range(std::span<const ImageInstances> images, double iou_min,
                                   double area_lo, double area_hi) {
  struct Detection {
    double confidence;
    bool true_positive;
  };
  std::vector<Detection> detections;
  std::size_t positives = 0;
  auto outside = [&](std::size_t area) {
    const auto a = static_cast<double>(area);
    return a < area_lo || a >= area_hi;
  };

  for (const auto& image : images) {
    const auto& gts = image.ground_truths;
    // Ground truths inside the range come first so matches prefer them.
    std::vector<std::size_t> gt_order(gts.size());
    std::iota(gt_order.begin(), gt_order.end(), 0);
    std::vector<bool> ignored(gts.size());
    for (std::size_t g = 0; g < gts.size(); ++g) ignored[g] = outside(gts[g].area());
    std::stable_sort(gt_order.begin(), gt_order.end(),
                     [&](std::size_t a, std::size_t b) { return !ignored[a] && ignored[b]; });
    for (std::size_t g = 0; g < gts.size(); ++g) positives += ignored[g] ? 0 : 1;

    std::vector<std::size_t> det_order(image.predictions.size());
    std::iota(det_order.begin(), det_order.end(), 0);
    std::stable_sort(det_order.begin(), det_order.end(), [&](std::size_t a, std::size_t b) {
      return image.predictions[a].confidence > image.predictions[b].confidence;
    });

    std::vector<bool> matched(gts.size(), false);
    for (std::size_t d : det_order) {
      const auto& pred = image.predictions[d];
      double best_iou = iou_min;
      std::optional<std::size_t> best;
      for (std::size_t g : gt_order) {
        if (matched[g]) continue;
        if (best && !ignored[*best] && ignored[g]) break;
        const double iou = mask_iou(pred.mask, gts[g]);
        if (iou < best_iou) continue;
        best_iou = iou;
        best = g;
      }
      if (best) {
        matched[*best] = true;
        if (!ignored[*best]) detections.push_back({pred.confidence, true});
      } else if (!outside(pred.mask.area())) {
        detections.push_back({pred.confidence, false});
      }
    }
  }

  if (positives == 0) return {};
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<double> recall;
  std::vector<double> precision;
  double tp = 0.0;
  double fp = 0.0;
  for (const auto& det : detections) {
    (det.true_positive ? tp : fp) += 1.0;
    recall.push_back(tp / static_cast<double>(positives));
    precision.push_back(tp / (tp + fp));
  }
  // All-point interpolation: precision envelope, integrated over recall.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return {ap, tp / static_cast<double>(positives)};
}

}  // namespace detail

/// Greedy confidence-ordered mask matching at IoU >= iou_min, pooled over
/// all images, plus the same metrics restricted to the medium and large
/// ground-truth size buckets.
inline SegmentationScore score_masks(std::span<const ImageInstances> images, double iou_min = 0.2,
                                     SizeBuckets buckets = {}) {
  for (const auto& image : images) {
    const BinaryMask* ref = nullptr;
    for (const auto& g : image.ground_truths) ref = ref ? ref : &g;
    for (const auto& p : image.predictions) ref = ref ? ref : &p.mask;
    auto same = [&](const BinaryMask& m) { return m.rows == ref->rows && m.cols == ref->cols; };
    for (const auto& g : image.ground_truths) {
      if (!same(g)) throw ShapeError("ground-truth masks of one image differ in size");
    }
    for (const auto& p : image.predictions) {
      if (!same(p.mask)) throw ShapeError("prediction mask differs in size from ground truth");
    }
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  SegmentationScore s;
  s.iou_min = iou_min;
  const auto all = detail::evaluate_range(images, iou_min, 0.0, kInf);
  const auto medium = detail::evaluate_range(images, iou_min, buckets.medium_min, buckets.large_min);
  const auto large = detail::evaluate_range(images, iou_min, buckets.large_min, kInf);
  s.ap = all.ap;
  s.ar = all.ar;
  s.ap_medium = medium.ap;
  s.ar_medium = medium.ar;
  s.ap_large = large.ap;
  s.ar_large = large.ar;
  return s;
}

inline SegmentationScore score_masks(std::vector<ScoredMask> predictions,
                                     std::vector<BinaryMask> ground_truths, double iou_min = 0.2,
                                     SizeBuckets buckets = {}) {
  const ImageInstances image{std::move(predictions), std::move(ground_truths)};
  return score_masks(std::span<const ImageInstances>(&image, 1), iou_min, buckets);
}

// ---------------------------------------------------------------------------
// Perturbation

enum class Polarity { kPositive, kNegative };

inline std::string_view to_string(Polarity p) {
  return p == Polarity::kPositive ? "positive" : "negative";
}

struct PerturbationResult {
  Polarity polarity = Polarity::kPositive;
  std::vector<double> fractions;
  std::vector<double> accuracy;
  double auc = 0.0;
};

/// Saliency over one perturbed stream. Locked tokens (e.g. CLS) are never
/// removed and do not count toward the removable total.
struct PerturbationTarget {
  std::vector<double> scores;
  std::vector<std::uint8_t> locked;
};

inline std::vector<double> default_removal_fractions() {
  return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

inline double trapezoid_auc(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("curve abscissa and ordinate differ in length");
  double area = 0.0;
  for (std::size_t i = 1; i < xs.size(); ++i) area += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
  return area;
}

/// Removable token indices in removal order: descending score for
/// positive perturbation, ascending for negative. Equal scores keep index
/// order.
inline std::vector<std::size_t> removal_order(const PerturbationTarget& target, Polarity polarity) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < target.scores.size(); ++i) {
    if (target.locked.empty() || !target.locked[i]) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return polarity == Polarity::kPositive ? target.scores[a] > target.scores[b]
                                           : target.scores[a] < target.scores[b];
  });
  return order;
}

/// Keep mask after removing floor(fraction * removable) tokens.
inline std::vector<std::uint8_t> perturbation_keep(const PerturbationTarget& target, Polarity polarity,
                                                   double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ValidationError("removal fraction " + std::to_string(fraction) +
                          " would remove every token");
  }
  const auto order = removal_order(target, polarity);
  const auto remove = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(order.size()) + 1e-9));
  if (remove >= order.size() && !order.empty()) {
    throw ValidationError("removal fraction " + std::to_string(fraction) + " removes every token");
  }
  std::vector<std::uint8_t> keep(target.scores.size(), 1);
  for (std::size_t i = 0; i < remove; ++i) keep[order[i]] = 0;
  return keep;
}

/// Accuracy-versus-removal curve over a sample set. `correct(sample, keep)`
/// re-runs the model on sample `sample` with tokens masked per `keep` and
/// reports whether its top-1 prediction is right.
template <typename Correct>
PerturbationResult perturbation_curve(std::span<const PerturbationTarget> targets, Correct&& correct,
                                      Polarity polarity,
                                      std::vector<double> fractions = default_removal_fractions()) {
  if (targets.empty()) throw ValidationError("perturbation needs at least one sample");
  if (fractions.empty() || fractions.front() != 0.0) {
    throw ValidationError("removal fractions must start at 0");
  }
  PerturbationResult result;
  result.polarity = polarity;
  result.fractions = fractions;
  for (double f : fractions) {
    std::size_t hits = 0;
    for (std::size_t s = 0; s < targets.size(); ++s) {
      hits += correct(s, perturbation_keep(targets[s], polarity, f)) ? 1 : 0;
    }
    result.accuracy.push_back(static_cast<double>(hits) / static_cast<double>(targets.size()));
  }
  result.auc = trapezoid_auc(result.fractions, result.accuracy);
  return result;
}

}  // namespace hetattr
