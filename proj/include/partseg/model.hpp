#pragma once

// Few-shot part segmentation model: shared visual encoder, masked-average
// visual prototypes, prompt-learned textual prototypes through a frozen text
// encoder, and the two contrast losses.

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "partseg/autodiff.hpp"
#include "partseg/data.hpp"
#include "partseg/encoders.hpp"
#include "partseg/losses.hpp"
#include "partseg/prompt.hpp"
#include "partseg/prototypes.hpp"

namespace partseg {

enum class SharedKeyMode { kPerPart, kGlobal };
enum class BackgroundMode { kPooled, kLearned };
enum class Mode { kTrain, kEval };

inline constexpr const char* kGlobalSharedKey = "<global>";

struct ModelConfig {
  EncoderConfig encoder;
  PromptDesign design = PromptDesign::kPPL;
  std::size_t n_specific = 4;
  std::size_t n_shared = 4;
  double momentum = 0.99;
  SharedKeyMode shared_keys = SharedKeyMode::kPerPart;
  BackgroundMode background = BackgroundMode::kPooled;
  bool background_in_softmax = true;
  bool text_frozen = true;
  LogitMode logit_mode = LogitMode::kDot;
  double temperature = 0.1;
  LossWeights loss_weights;
};

inline void validate(const ModelConfig& cfg) {
  if (!(cfg.momentum >= 0.0 && cfg.momentum <= 1.0))
    throw ConfigError("EMA momentum m must be in [0, 1], got " + std::to_string(cfg.momentum));
  const std::size_t visual = cfg.design == PromptDesign::kPPL ? cfg.n_specific + cfg.n_shared
                             : cfg.design == PromptDesign::kProtoNet ? 0
                                                                     : cfg.n_specific;
  if (visual + cfg.encoder.n_text > cfg.encoder.context_limit) {
    throw ConfigError("prompt length " + std::to_string(visual + cfg.encoder.n_text) +
                      " exceeds the text context limit " + std::to_string(cfg.encoder.context_limit));
  }
  if (cfg.logit_mode == LogitMode::kCosine && !(cfg.temperature > 0.0))
    throw ConfigError("temperature must be positive");
}

/// Bank keys needed for a set of categories (normalized part names plus the
/// background), or the single global key.
inline std::vector<std::string> shared_keys_for(const std::vector<Category>& categories,
                                                SharedKeyMode mode) {
  if (mode == SharedKeyMode::kGlobal) return {kGlobalSharedKey};
  std::set<std::string> keys{kBackgroundName};
  for (const auto& c : categories)
    for (const auto& p : c.parts) keys.insert(p.normalized_name);
  return {keys.begin(), keys.end()};
}

class PartSegModel {
 public:
  struct Output {
    LogitVolume visual;
    std::optional<LogitVolume> textual;
    LossResult loss_vcl;
    LossResult loss_tcl;
    ad::Var total;
    std::vector<int> class_ids;
    std::vector<TokenSequence> prompts;       // one per class, textual branch only
    std::vector<ad::Var> textual_prototypes;  // T_k per class
    std::vector<std::string> shared_keys;     // bank entries read by this pass
  };

  PartSegModel(const ModelConfig& cfg, std::uint64_t seed, const std::vector<std::string>& bank_keys)
      : cfg_(cfg), seed_(seed) {
    validate(cfg_);
    encoders_ = make_encoder_bundle(cfg_.encoder, seed, cfg_.text_frozen);
    const std::size_t c = encoders_.visual->channels();
    const std::size_t d = cfg_.encoder.token_dim;
    specific_ = TokenGenerator("ppg", c, cfg_.n_specific, d, seed);
    global_ = TokenGenerator("lgp", c, cfg_.n_specific, d, seed);
    bank_ = SharedTokenBank(cfg_.n_shared, d, cfg_.momentum);
    for (const auto& k : bank_keys) bank_.add_key(k, seed);
    Rng rng(derive_seed(seed, "background"));
    Tensor bg({c});
    for (auto& v : bg.data) v = gaussian(rng, 0.0, 0.02);
    background_ = ad::parameter(std::move(bg));
  }

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const EncoderBundle& encoders() const { return encoders_; }
  SharedTokenBank& bank() { return bank_; }
  const SharedTokenBank& bank() const { return bank_; }
  bool uses_text() const { return cfg_.design != PromptDesign::kProtoNet; }

  /// Every parameter updated by the optimizer (the text encoder is excluded
  /// when frozen).
  ParameterList trainable_parameters() const {
    ParameterList out = encoders_.visual->parameters();
    for (auto& p : specific_.parameters()) out.push_back(p);
    for (auto& p : global_.parameters()) out.push_back(p);
    for (auto& p : bank_.parameters()) out.push_back(p);
    out.push_back({"background", background_});
    if (!encoders_.text_frozen)
      for (auto& p : encoders_.text->parameters()) out.push_back(p);
    return out;
  }
  ParameterList text_parameters() const { return encoders_.text->parameters(); }

  std::string shared_key(const Category& category, int k) const {
    return cfg_.shared_keys == SharedKeyMode::kGlobal ? kGlobalSharedKey : part_key(category, k);
  }

  std::optional<int> ignored_label() const {
    return cfg_.background_in_softmax ? std::nullopt : std::optional<int>(kBackground);
  }

  /// Forward pass from precomputed features. Masks are at feature resolution;
  /// the query mask is optional and only used for the losses.
  Output forward_features(std::span<const FeatureMap> support, std::span<const LabelMap> support_masks,
                          const FeatureMap& query, const LabelMap* query_mask,
                          const Category& category, Mode mode) const {
    const int n_parts = static_cast<int>(category.num_parts());
    const VisualPrototypeSet protos = compute_prototype_set(support, support_masks, n_parts);

    Output out;
    std::vector<ad::Var> visual;
    for (int k = 0; k <= n_parts; ++k) {
      if (k == kBackground) {
        if (!cfg_.background_in_softmax) continue;
        if (cfg_.background == BackgroundMode::kLearned) {
          out.class_ids.push_back(k);
          visual.push_back(background_);
          continue;
        }
      }
      if (!protos.present(k)) continue;
      out.class_ids.push_back(k);
      visual.push_back(protos.at(k));
    }
    if (out.class_ids.empty()) throw ArgumentError("support set contains no usable class");

    out.visual = correlate(query, visual, out.class_ids, Branch::kVisual, cfg_.logit_mode, cfg_.temperature);

    if (uses_text()) {
      std::optional<ad::Var> global_block;
      if (cfg_.design == PromptDesign::kLGP) {
        std::vector<ad::Var> maps;
        std::vector<std::vector<std::size_t>> all;
        for (const auto& f : support) {
          maps.push_back(f.data);
          all.emplace_back(f.height() * f.width());
          for (std::size_t i = 0; i < all.back().size(); ++i) all.back()[i] = i;
        }
        global_block = lgp_tokens(ad::masked_mean(maps, all), global_);
      }
      const BankMode bank_mode = mode == Mode::kTrain ? BankMode::kTrain : BankMode::kEval;
      const std::size_t d = cfg_.encoder.token_dim;
      for (std::size_t c = 0; c < out.class_ids.size(); ++c) {
        const int k = out.class_ids[c];
        ad::Var specific = ad::constant(Tensor({0, d}));
        ad::Var shared = ad::constant(Tensor({0, d}));
        if (cfg_.design == PromptDesign::kLGP) {
          specific = *global_block;
        } else {
          specific = generate_specific_tokens(specific_, visual[c]);
          if (cfg_.design == PromptDesign::kPPL) {
            const std::string key = shared_key(category, k);
            if (bank_.contains(key)) {  // unseen parts fall back to an empty block
              shared = bank_.tokens(key, bank_mode);
              out.shared_keys.push_back(key);
            }
          }
        }
        const TokenSequence v = compose_visual_tokens(specific, shared);
        const TokenSequence t = encoders_.tokenize_part_label(part_key(category, k)).tokens;
        out.prompts.push_back(assemble_prompt(v, t, encoders_.text->context_limit()));
        out.textual_prototypes.push_back(encoders_.encode_text(out.prompts.back()));
      }
      out.textual = correlate(query, out.textual_prototypes, out.class_ids, Branch::kTextual,
                              cfg_.logit_mode, cfg_.temperature);
    }

    if (query_mask) {
      out.loss_vcl = contrast_loss(out.visual, *query_mask, ignored_label());
      if (out.textual) {
        out.loss_tcl = contrast_loss(*out.textual, *query_mask, ignored_label());
        out.total = total_loss(out.loss_vcl.value, out.loss_tcl.value, cfg_.loss_weights);
      } else {
        out.loss_tcl = {ad::constant(Tensor({}, 0.0)), 0};
        out.total = ad::scale(out.loss_vcl.value, cfg_.loss_weights.visual);
      }
    }
    return out;
  }

  /// Encodes support and query images through the same visual encoder and
  /// runs the forward pass with the query mask for the losses.
  Output forward(const Episode& episode, Mode mode) const {
    std::vector<FeatureMap> feats;
    std::vector<LabelMap> masks;
    encode_support(episode.support, feats, masks);
    const FeatureMap query = encoders_.encode_image(episode.query.image);
    const LabelMap query_mask = downsample_mask(episode.query.mask, query.stride);
    return forward_features(feats, masks, query, &query_mask, episode.category, mode);
  }

  /// Inference: segments the query image. Never reads the query mask.
  SegmentationPrediction predict(std::span<const Sample> support, const Image& query_image,
                                 const Category& category, double alpha,
                                 bool keep_probabilities = false) const {
    std::vector<FeatureMap> feats;
    std::vector<LabelMap> masks;
    encode_support(support, feats, masks);
    const FeatureMap query = encoders_.encode_image(query_image);
    const Output out = forward_features(feats, masks, query, nullptr, category, Mode::kEval);
    const LogitVolume* textual = out.textual ? &*out.textual : nullptr;
    return predict_from_logits(out.visual, textual, uses_text() ? alpha : 1.0, query.stride,
                               query_image.height, query_image.width, keep_probabilities);
  }

  SegmentationPrediction predict(const Episode& episode, double alpha) const {
    return predict(episode.support, episode.query.image, episode.category, alpha);
  }

 private:
  void encode_support(std::span<const Sample> support, std::vector<FeatureMap>& feats,
                      std::vector<LabelMap>& masks) const {
    for (const auto& s : support) {
      feats.push_back(encoders_.encode_image(s.image));
      masks.push_back(downsample_mask(s.mask, feats.back().stride));
    }
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  EncoderBundle encoders_;
  TokenGenerator specific_;
  TokenGenerator global_;
  SharedTokenBank bank_;
  ad::Var background_;
};

}  // namespace partseg
