#pragma once

// Part-level visual prototypes by masked average pooling.

#include <optional>
#include <span>
#include <vector>

#include "partseg/autodiff.hpp"
#include "partseg/encoders.hpp"
#include "partseg/errors.hpp"
#include "partseg/image.hpp"

namespace partseg {

/// Nearest-neighbor label downsampling. The mask is background-padded to a
/// stride multiple; output cell (i, j) takes the label of pixel
/// (i * stride + stride / 2, j * stride + stride / 2), i.e. the lower-right of
/// the two central pixels when the stride is even.
inline LabelMap downsample_mask(const LabelMap& mask, std::size_t stride) {
  if (stride == 0) throw ArgumentError("stride must be >= 1");
  if (stride == 1) return mask;
  const LabelMap padded = pad_to_multiple(mask, stride);
  LabelMap out(padded.height / stride, padded.width / stride);
  for (std::size_t i = 0; i < out.height; ++i)
    for (std::size_t j = 0; j < out.width; ++j)
      out.at(i, j) = padded.at(i * stride + stride / 2, j * stride + stride / 2);
  return out;
}

/// Flat indices of cells labeled k.
inline std::vector<std::size_t> cells_with_label(const LabelMap& mask, int k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.labels.size(); ++i)
    if (mask.labels[i] == k) out.push_back(i);
  return out;
}

struct PooledPrototype {
  ad::Var vector;  // meaningful only when present
  bool present = false;
};

/// Mean feature vector over the cells where mask == k.
inline PooledPrototype masked_average_pool(const FeatureMap& features, const LabelMap& mask, int k) {
  if (mask.height != features.height() || mask.width != features.width()) {
    throw ArgumentError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                        " does not match feature map " + std::to_string(features.height()) + "x" +
                        std::to_string(features.width()));
  }
  auto cells = cells_with_label(mask, k);
  if (cells.empty()) return {};
  return {ad::masked_mean({features.data}, {std::move(cells)}), true};
}

/// Prototypes V_0..V_N for one episode; V_0 is the background.
struct VisualPrototypeSet {
  std::vector<std::optional<ad::Var>> prototypes;

  std::size_t num_classes() const { return prototypes.size(); }
  bool present(int k) const { return prototypes.at(static_cast<std::size_t>(k)).has_value(); }
  const ad::Var& at(int k) const {
    const auto& p = prototypes.at(static_cast<std::size_t>(k));
    if (!p) throw ContractError("prototype of class " + std::to_string(k) + " is absent from the support set");
    return *p;
  }
  std::vector<int> present_classes() const {
    std::vector<int> out;
    for (std::size_t k = 0; k < prototypes.size(); ++k)
      if (prototypes[k]) out.push_back(static_cast<int>(k));
    return out;
  }
};

/// Pools every class 0..num_parts over the union of its cells across all
/// support shots (one joint mean, not a mean of per-shot means). Masks must be
/// at feature resolution.
inline VisualPrototypeSet compute_prototype_set(std::span<const FeatureMap> features,
                                                std::span<const LabelMap> masks, int num_parts) {
  if (features.empty()) throw ArgumentError("at least one support shot is required");
  if (features.size() != masks.size()) throw ArgumentError("support features/masks count mismatch");
  std::vector<ad::Var> maps;
  for (std::size_t s = 0; s < features.size(); ++s) {
    if (masks[s].height != features[s].height() || masks[s].width != features[s].width())
      throw ArgumentError("support mask does not match its feature map");
    maps.push_back(features[s].data);
  }
  VisualPrototypeSet set;
  set.prototypes.resize(static_cast<std::size_t>(num_parts) + 1);
  for (int k = 0; k <= num_parts; ++k) {
    std::vector<std::vector<std::size_t>> selections;
    std::size_t total = 0;
    for (const auto& m : masks) {
      selections.push_back(cells_with_label(m, k));
      total += selections.back().size();
    }
    if (total > 0) set.prototypes[static_cast<std::size_t>(k)] = ad::masked_mean(maps, selections);
  }
  return set;
}

}  // namespace partseg
