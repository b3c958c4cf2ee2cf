#pragma once

// Correlation logits, softmax probabilities, contrast losses, fused
// prediction and the mIoU metric.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "partseg/autodiff.hpp"
#include "partseg/encoders.hpp"
#include "partseg/errors.hpp"
#include "partseg/image.hpp"

namespace partseg {

enum class Branch { kVisual, kTextual };

enum class LogitMode { kDot, kCosine };

/// Scores f_ijk stored as [H*W, K]; column c belongs to class class_ids[c].
struct LogitVolume {
  ad::Var data;
  std::size_t height = 0, width = 0;
  std::vector<int> class_ids;
  Branch branch = Branch::kVisual;

  std::size_t num_classes() const { return class_ids.size(); }
  double at(std::size_t i, std::size_t j, std::size_t c) const {
    return data.value().data[(i * width + j) * class_ids.size() + c];
  }
};

/// f_ijk = <F_q[:, i, j], P_k>. Cosine mode L2-normalizes both sides and
/// divides by the temperature.
inline LogitVolume correlate(const FeatureMap& query, const std::vector<ad::Var>& prototypes,
                             std::vector<int> class_ids, Branch branch = Branch::kVisual,
                             LogitMode mode = LogitMode::kDot, double temperature = 0.1) {
  if (prototypes.empty()) throw ArgumentError("correlate: no prototypes");
  if (class_ids.size() != prototypes.size()) throw ArgumentError("correlate: class id count mismatch");
  for (const auto& p : prototypes) {
    if (p.shape() != Shape{query.channels()}) {
      throw ArgumentError("correlate: prototype " + shape_string(p.shape()) +
                          " does not match feature channels " + std::to_string(query.channels()));
    }
  }
  ad::Var protos = ad::stack(prototypes);
  ad::Var feats = query.data;
  if (mode == LogitMode::kCosine) {
    const std::size_t c = query.channels(), h = query.height(), w = query.width();
    protos = ad::normalize_rows(protos);
    ad::Var pixels = ad::normalize_rows(ad::transpose(ad::reshape(feats, {c, h * w})));
    feats = ad::reshape(ad::transpose(pixels), {c, h, w});
  }
  ad::Var logits = ad::pixel_inner_products(feats, protos);
  if (mode == LogitMode::kCosine) logits = ad::scale(logits, 1.0 / temperature);
  return {logits, query.height(), query.width(), std::move(class_ids), branch};
}

/// p_ijk = exp(f_ijk) / sum_n exp(f_ijn), computed with max subtraction.
inline Tensor softmax_prob(const LogitVolume& logits) {
  const std::size_t k = logits.num_classes();
  const auto& v = logits.data.value().data;
  Tensor out(logits.data.shape());
  for (std::size_t p = 0; p < logits.height * logits.width; ++p) {
    const double* row = v.data() + p * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) out[p * k + c] = std::exp(row[c] - mx) / z;
  }
  return out;
}

struct LossResult {
  ad::Var value;
  std::size_t pixels = 0;  // pixels that contributed
  bool empty() const { return pixels == 0; }
};

/// Column index of each cell's ground-truth class, -1 when the class is not
/// among the logits' classes (or is listed in `ignore`).
inline std::vector<int> loss_targets(const LogitVolume& logits, const LabelMap& gt,
                                     std::optional<int> ignore = std::nullopt) {
  if (gt.height != logits.height || gt.width != logits.width)
    throw ArgumentError("ground truth does not match logit resolution");
  std::vector<int> column_of(1, -1);
  for (std::size_t c = 0; c < logits.class_ids.size(); ++c) {
    const int id = logits.class_ids[c];
    if (id >= static_cast<int>(column_of.size())) column_of.resize(static_cast<std::size_t>(id) + 1, -1);
    column_of[static_cast<std::size_t>(id)] = static_cast<int>(c);
  }
  std::vector<int> targets(gt.labels.size(), -1);
  for (std::size_t p = 0; p < gt.labels.size(); ++p) {
    const int label = gt.labels[p];
    if (ignore && label == *ignore) continue;
    if (label >= 0 && label < static_cast<int>(column_of.size())) targets[p] = column_of[label];
  }
  return targets;
}

/// Mean over contributing cells of -log p at the ground-truth class. Cells
/// whose class has no prototype are excluded; when none remain the result is
/// a zero constant flagged by pixels == 0.
inline LossResult contrast_loss(const LogitVolume& logits, const LabelMap& gt_feature_res,
                                std::optional<int> ignore = std::nullopt) {
  const auto targets = loss_targets(logits, gt_feature_res, ignore);
  const std::size_t n = static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; }));
  return {ad::softmax_cross_entropy(logits.data, targets), n};
}

struct LossWeights {
  double visual = 1.0;
  double textual = 1.0;
};

/// L = w_v * L_vcl + w_t * L_tcl.
inline ad::Var total_loss(const ad::Var& vcl, const ad::Var& tcl, LossWeights w = {}) {
  return ad::weighted_sum(vcl, w.visual, tcl, w.textual);
}

struct SegmentationPrediction {
  LabelMap labels;          // image resolution
  LabelMap feature_labels;  // feature resolution
  std::optional<Tensor> probabilities;
};

/// Nearest-neighbor upsampling: pixel (y, x) takes cell (y / stride, x / stride).
inline LabelMap upsample_labels(const LabelMap& cells, std::size_t stride, std::size_t height,
                                std::size_t width) {
  LabelMap out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      out.at(y, x) = cells.at(std::min(y / stride, cells.height - 1), std::min(x / stride, cells.width - 1));
  return out;
}

/// Fuses g = alpha * f^v + (1 - alpha) * f^t, takes the per-cell argmax
/// (lowest class id on ties) and upsamples to height x width.
inline SegmentationPrediction predict_from_logits(const LogitVolume& visual,
                                                  const LogitVolume* textual, double alpha,
                                                  std::size_t stride, std::size_t height,
                                                  std::size_t width, bool keep_probabilities = false) {
  if (visual.class_ids.empty()) throw ArgumentError("no valid classes to predict");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("fusion alpha must be in [0, 1]");
  const bool use_text = textual != nullptr && alpha < 1.0;
  if (use_text && (textual->class_ids != visual.class_ids || textual->height != visual.height ||
                   textual->width != visual.width)) {
    throw ArgumentError("visual and textual logits cover different classes");
  }
  const std::size_t k = visual.num_classes();
  const std::size_t cells = visual.height * visual.width;
  Tensor fused(visual.data.shape());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    const double fv = visual.data.value().data[i];
    fused[i] = use_text ? alpha * fv + (1.0 - alpha) * textual->data.value().data[i] : fv;
  }
  // Order columns by class id so ties resolve to the lowest id.
  std::vector<std::size_t> cols(k);
  for (std::size_t c = 0; c < k; ++c) cols[c] = c;
  std::sort(cols.begin(), cols.end(),
            [&](std::size_t a, std::size_t b) { return visual.class_ids[a] < visual.class_ids[b]; });
  SegmentationPrediction pred;
  pred.feature_labels = LabelMap(visual.height, visual.width);
  for (std::size_t p = 0; p < cells; ++p) {
    std::size_t best = cols[0];
    for (std::size_t c : cols)
      if (fused[p * k + c] > fused[p * k + best]) best = c;
    pred.feature_labels.labels[p] = visual.class_ids[best];
  }
  pred.labels = upsample_labels(pred.feature_labels, stride, height, width);
  if (keep_probabilities) {
    LogitVolume f{ad::constant(fused), visual.height, visual.width, visual.class_ids, visual.branch};
    pred.probabilities = softmax_prob(f);
  }
  return pred;
}

/// Prediction directly from prototype lists (textual may be empty for the
/// visual-only baseline).
inline SegmentationPrediction predict_segmentation(const FeatureMap& query,
                                                   const std::vector<ad::Var>& visual_prototypes,
                                                   const std::vector<ad::Var>& textual_prototypes,
                                                   const std::vector<int>& class_ids, double alpha,
                                                   std::size_t height, std::size_t width) {
  const LogitVolume fv = correlate(query, visual_prototypes, class_ids, Branch::kVisual);
  if (textual_prototypes.empty() || alpha == 1.0)
    return predict_from_logits(fv, nullptr, 1.0, query.stride, height, width);
  const LogitVolume ft = correlate(query, textual_prototypes, class_ids, Branch::kTextual);
  return predict_from_logits(fv, &ft, alpha, query.stride, height, width);
}

struct MiouReport {
  std::vector<double> iou;              // per class id
  std::vector<bool> valid;              // union nonempty
  std::vector<std::size_t> intersection;
  std::vector<std::size_t> union_count;
  double mean = 0.0;
  std::size_t episodes = 1;
};

/// IoU_k = |pred = k and gt = k| / |pred = k or gt = k| over classes
/// 0..num_classes-1; classes with an empty union are left out of the mean.
/// Pixels whose ground truth equals `ignore` are skipped entirely.
inline MiouReport miou(const LabelMap& pred, const LabelMap& gt, std::size_t num_classes,
                       std::optional<int> ignore = std::nullopt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ArgumentError("prediction and ground truth sizes differ");
  MiouReport r;
  r.iou.assign(num_classes, 0.0);
  r.valid.assign(num_classes, false);
  r.intersection.assign(num_classes, 0);
  r.union_count.assign(num_classes, 0);
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i], p = pred.labels[i];
    if (ignore && g == *ignore) continue;
    const bool g_ok = g >= 0 && g < static_cast<int>(num_classes);
    const bool p_ok = p >= 0 && p < static_cast<int>(num_classes);
    if (g == p) {
      if (g_ok) {
        ++r.intersection[static_cast<std::size_t>(g)];
        ++r.union_count[static_cast<std::size_t>(g)];
      }
    } else {
      if (g_ok) ++r.union_count[static_cast<std::size_t>(g)];
      if (p_ok) ++r.union_count[static_cast<std::size_t>(p)];
    }
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (r.union_count[k] == 0) continue;
    r.valid[k] = true;
    r.iou[k] = static_cast<double>(r.intersection[k]) / static_cast<double>(r.union_count[k]);
    sum += r.iou[k];
    ++count;
  }
  r.mean = count ? sum / static_cast<double>(count) : 0.0;
  return r;
}

}  // namespace partseg
