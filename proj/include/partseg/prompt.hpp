#pragma once

// Part-aware prompt learning: part-specific token generator, EMA-estimated
// part-shared token bank, token composition and prompt assembly, and the
// global-token (LGP) variant used in prompt-design ablations.

#include <map>
#include <string>
#include <vector>

#include "partseg/autodiff.hpp"
#include "partseg/encoders.hpp"
#include "partseg/errors.hpp"
#include "partseg/rng.hpp"

namespace partseg {

enum class PromptDesign { kProtoNet, kLGP, kLPP, kPPL };

inline std::string to_string(PromptDesign d) {
  switch (d) {
    case PromptDesign::kProtoNet: return "protonet";
    case PromptDesign::kLGP: return "lgp";
    case PromptDesign::kLPP: return "lpp";
    case PromptDesign::kPPL: return "ppl";
  }
  return "?";
}

inline PromptDesign select_prompt_design(std::string name) {
  for (auto& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (name == "protonet") return PromptDesign::kProtoNet;
  if (name == "lgp") return PromptDesign::kLGP;
  if (name == "lpp") return PromptDesign::kLPP;
  if (name == "ppl") return PromptDesign::kPPL;
  throw ArgumentError("unknown prompt design '" + name + "' (expected protonet, lgp, lpp or ppl)");
}

/// Shallow map R^C -> n_tokens x D_tok: affine to 2C, GELU, affine, reshape.
/// One instance is shared by every part class and category.
class TokenGenerator {
 public:
  TokenGenerator() = default;
  TokenGenerator(std::string name, std::size_t in_dim, std::size_t n_tokens, std::size_t token_dim,
                 std::uint64_t seed)
      : name_(std::move(name)), in_dim_(in_dim), n_tokens_(n_tokens), token_dim_(token_dim) {
    Rng rng(derive_seed(seed, "generator/" + name_));
    const std::size_t hidden = 2 * in_dim;
    auto init = [&](Shape shape, double std) {
      Tensor t(std::move(shape));
      for (auto& v : t.data) v = gaussian(rng, 0.0, std);
      return ad::parameter(std::move(t));
    };
    w1_ = init({hidden, in_dim}, std::sqrt(1.0 / static_cast<double>(in_dim)));
    b1_ = ad::parameter(Tensor({hidden}));
    w2_ = init({n_tokens * token_dim, hidden}, std::sqrt(1.0 / static_cast<double>(hidden)));
    b2_ = ad::parameter(Tensor({n_tokens * token_dim}));
  }

  /// Token block [n_tokens, D_tok] for one input vector.
  ad::Var operator()(const ad::Var& input) const {
    if (input.shape() != Shape{in_dim_}) {
      throw ArgumentError("generator input " + shape_string(input.shape()) + ", expected [" +
                          std::to_string(in_dim_) + "]");
    }
    if (n_tokens_ == 0) return ad::constant(Tensor({0, token_dim_}));
    const ad::Var h = ad::gelu(ad::linear(input, w1_, b1_));
    return ad::reshape(ad::linear(h, w2_, b2_), {n_tokens_, token_dim_});
  }

  std::size_t n_tokens() const { return n_tokens_; }
  std::size_t token_dim() const { return token_dim_; }
  ParameterList parameters() const {
    return {{name_ + "/w1", w1_}, {name_ + "/b1", b1_}, {name_ + "/w2", w2_}, {name_ + "/b2", b2_}};
  }

 private:
  std::string name_;
  std::size_t in_dim_ = 0, n_tokens_ = 0, token_dim_ = 0;
  ad::Var w1_, b1_, w2_, b2_;
};

/// Part-specific tokens v^specific_k = f(V_k).
inline ad::Var generate_specific_tokens(const TokenGenerator& f, const ad::Var& prototype,
                                        bool present = true) {
  if (!present) throw ContractError("cannot generate part-specific tokens for an absent part");
  return f(prototype);
}

enum class BankMode { kTrain, kEval };

/// Part-shared tokens keyed by normalized part name. Each entry holds the
/// learnable current tokens v_cur and the gradient-free EMA buffer v_shared.
class SharedTokenBank {
 public:
  struct Entry {
    ad::Var current;  // [n_shared, D_tok], trainable
    Tensor shared;    // [n_shared, D_tok], written only by ema_update
    std::uint64_t updates = 0;
  };

  SharedTokenBank() = default;
  SharedTokenBank(std::size_t n_shared, std::size_t token_dim, double momentum)
      : n_shared_(n_shared), token_dim_(token_dim) {
    set_momentum(momentum);
  }

  /// Adds a key with N(0, init_std^2) tokens copied into both v_cur and
  /// v_shared. The draw depends only on (seed, key).
  void add_key(const std::string& key, std::uint64_t seed, double init_std = 0.02) {
    if (entries_.count(key)) return;
    Rng rng(derive_seed(seed, "bank/" + key));
    Tensor t({n_shared_, token_dim_});
    for (auto& v : t.data) v = gaussian(rng, 0.0, init_std);
    entries_.emplace(key, Entry{ad::parameter(t), t, 0});
  }

  void set_entry(const std::string& key, Tensor current, Tensor shared, std::uint64_t updates) {
    if (current.shape != Shape{n_shared_, token_dim_} || shared.shape != current.shape)
      throw ArgumentError("bank entry '" + key + "' has the wrong shape");
    entries_.insert_or_assign(key, Entry{ad::parameter(std::move(current)), std::move(shared), updates});
  }

  bool contains(const std::string& key) const { return entries_.count(key) > 0; }
  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw LookupError("no shared tokens for part '" + key + "'");
    return it->second;
  }
  Entry& entry(const std::string& key) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw LookupError("no shared tokens for part '" + key + "'");
    return it->second;
  }

  /// v_shared <- m * v_shared + (1 - m) * v_cur, using the detached v_cur.
  const Tensor& ema_update(const std::string& key) {
    Entry& e = entry(key);
    const auto& cur = e.current.value().data;
    for (std::size_t i = 0; i < e.shared.size(); ++i)
      e.shared[i] = momentum_ * e.shared[i] + (1.0 - momentum_) * cur[i];
    ++e.updates;
    return e.shared;
  }

  /// Block consumed by the forward pass. Training: m * detach(v_shared) +
  /// (1 - m) * v_cur, so gradients reach v_cur only. Evaluation: v_shared.
  ad::Var tokens(const std::string& key, BankMode mode) const {
    const Entry& e = entry(key);
    const ad::Var shared = ad::constant(e.shared);
    if (mode == BankMode::kEval) return shared;
    return ad::weighted_sum(shared, momentum_, e.current, 1.0 - momentum_);
  }

  double momentum() const { return momentum_; }
  void set_momentum(double m) {
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum must be in [0, 1]");
    momentum_ = m;
  }
  std::size_t n_shared() const { return n_shared_; }
  std::size_t token_dim() const { return token_dim_; }
  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }
  ParameterList parameters() const {
    ParameterList out;
    for (const auto& [k, e] : entries_) out.push_back({"bank/" + k + "/cur", e.current});
    return out;
  }

 private:
  std::size_t n_shared_ = 0, token_dim_ = 0;
  double momentum_ = 0.99;
  std::map<std::string, Entry> entries_;
};

/// v_k = [v^specific_k][v^shared_k].
inline TokenSequence compose_visual_tokens(const ad::Var& specific, const ad::Var& shared) {
  if (specific.shape().size() != 2 || shared.shape().size() != 2 || specific.dim(1) != shared.dim(1)) {
    throw ArgumentError("token blocks differ in width: " + shape_string(specific.shape()) + " vs " +
                        shape_string(shared.shape()));
  }
  TokenSequence out;
  out.tokens = ad::concat_rows({specific, shared});
  out.labels.assign(specific.dim(0), TokenBlock::kSpecific);
  out.labels.insert(out.labels.end(), shared.dim(0), TokenBlock::kShared);
  return out;
}

/// prompt_k = [v_k][t_k]. Fails when the prompt would exceed the context limit.
inline TokenSequence assemble_prompt(const TokenSequence& visual, const TokenSequence& text,
                                     std::size_t context_limit) {
  const std::size_t total = visual.length() + text.length();
  if (total > context_limit) {
    throw ArgumentError("prompt of " + std::to_string(visual.length()) + " visual + " +
                        std::to_string(text.length()) + " text tokens exceeds context limit " +
                        std::to_string(context_limit));
  }
  if (visual.length() == 0) return text;
  TokenSequence out;
  out.tokens = ad::concat_rows({visual.tokens, text.tokens});
  out.labels = visual.labels;
  out.labels.insert(out.labels.end(), text.labels.begin(), text.labels.end());
  return out;
}

/// LGP: one token block from the global (spatially averaged) support feature,
/// reused for every part class of the episode.
inline ad::Var lgp_tokens(const ad::Var& global_feature, const TokenGenerator& generator) {
  return generator(global_feature);
}

}  // namespace partseg
