#pragma once

// Visual and text encoder contracts plus the desk-scale implementations.
//
// Any encoder satisfying VisualEncoder / TextEncoder can be registered under a
// name and selected from the run configuration; pretrained backbones plug in
// the same way.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "partseg/autodiff.hpp"
#include "partseg/errors.hpp"
#include "partseg/image.hpp"
#include "partseg/rng.hpp"

namespace partseg {

struct NamedParameter {
  std::string name;
  ad::Var var;
};
using ParameterList = std::vector<NamedParameter>;

/// Hash of parameter names, shapes and values. Equal fingerprints mean
/// bit-identical parameters.
inline std::uint64_t fingerprint(const ParameterList& params) {
  std::uint64_t h = fnv1a("partseg-params");
  for (const auto& p : params) {
    h = fnv1a(p.name + "\x1f" + shape_string(p.var.shape()), h);
    h = fnv1a(std::span<const double>(p.var.value().data), h);
  }
  return h;
}

/// Dense C x H x W feature grid; one cell covers stride x stride image pixels.
struct FeatureMap {
  ad::Var data;
  std::size_t stride = 1;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
};

enum class TokenBlock { kSpecific, kShared, kText };

inline char block_letter(TokenBlock b) {
  switch (b) {
    case TokenBlock::kSpecific: return 'S';
    case TokenBlock::kShared: return 'H';
    case TokenBlock::kText: return 'T';
  }
  return '?';
}

/// Ordered token vectors ([n, D_tok]) with a block tag per token.
struct TokenSequence {
  ad::Var tokens;
  std::vector<TokenBlock> labels;

  std::size_t length() const { return labels.size(); }
  std::size_t token_dim() const { return tokens.dim(1); }
  std::string layout() const {
    std::string s;
    for (auto b : labels) s += block_letter(b);
    return s;
  }
};

struct EncoderConfig {
  std::string visual_arch = "desk-conv";
  std::string text_arch = "desk-stub";
  std::size_t channels = 64;   // C, shared by visual features and text embeddings
  std::size_t stride = 8;      // power of two
  std::size_t token_dim = 32;  // D_tok
  std::size_t context_limit = 16;
  std::size_t n_text = 4;
  std::size_t text_hidden = 64;
};

// ---------------------------------------------------------------------------
// Visual encoders

class VisualEncoder {
 public:
  virtual ~VisualEncoder() = default;
  /// Pads the image to a stride multiple and returns its feature map.
  virtual FeatureMap encode(const Image& image) const = 0;
  virtual std::size_t channels() const = 0;
  virtual std::size_t stride() const = 0;
  virtual ParameterList parameters() const = 0;
};

inline void require_finite(const Image& image) {
  for (double v : image.data)
    if (!std::isfinite(v)) throw ArgumentError("image contains non-finite values");
}

/// Small trainable CNN: log2(stride) stride-2 3x3 conv+ReLU stages, one
/// stride-1 3x3 context conv+ReLU, and a linear 1x1 head that maps to C.
class DeskConvEncoder final : public VisualEncoder {
 public:
  DeskConvEncoder(const EncoderConfig& cfg, std::uint64_t seed)
      : channels_(cfg.channels), stride_(cfg.stride) {
    if (cfg.channels == 0) throw ConfigError("encoder channels must be >= 1");
    if (stride_ == 0 || (stride_ & (stride_ - 1)) != 0)
      throw ConfigError("desk-conv stride must be a power of two, got " + std::to_string(stride_));
    Rng rng(derive_seed(seed, "visual/desk-conv"));
    std::size_t in = 3;
    std::size_t down = 0;
    for (std::size_t s = stride_; s > 1; s /= 2) ++down;
    for (std::size_t i = 0; i < down; ++i) {
      const std::size_t out =
          i + 1 == down ? channels_ : std::max<std::size_t>(8, channels_ >> (down - i));
      add_layer("down" + std::to_string(i), in, out, 3, 2, 1, true, rng);
      in = out;
    }
    add_layer("context", in, channels_, 3, 1, 1, true, rng);
    add_layer("head", channels_, channels_, 1, 1, 0, false, rng);
  }

  FeatureMap encode(const Image& image) const override {
    require_finite(image);
    if (image.channels != 3) throw ArgumentError("desk-conv expects 3-channel images");
    const Image padded = pad_to_multiple(image, stride_);
    Tensor x({3, padded.height, padded.width});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 2.0 * padded.data[i] - 1.0;
    ad::Var h = ad::constant(std::move(x));
    for (const auto& layer : layers_) {
      h = ad::conv2d(h, layer.weight, layer.bias, layer.stride, layer.pad);
      if (layer.relu) h = ad::relu(h);
    }
    return {h, stride_};
  }

  std::size_t channels() const override { return channels_; }
  std::size_t stride() const override { return stride_; }
  ParameterList parameters() const override {
    ParameterList out;
    for (const auto& l : layers_) {
      out.push_back({"visual/" + l.name + "/weight", l.weight});
      out.push_back({"visual/" + l.name + "/bias", l.bias});
    }
    return out;
  }

 private:
  struct Layer {
    std::string name;
    ad::Var weight, bias;
    std::size_t stride, pad;
    bool relu;
  };

  void add_layer(std::string name, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t stride, std::size_t pad, bool relu, Rng& rng) {
    const double fan_in = static_cast<double>(in * k * k);
    const double std = std::sqrt((relu ? 2.0 : 1.0) / fan_in);
    Tensor w({out, in, k, k});
    for (auto& v : w.data) v = gaussian(rng, 0.0, std);
    layers_.push_back({std::move(name), ad::parameter(std::move(w)), ad::parameter(Tensor({out})),
                       stride, pad, relu});
  }

  std::size_t channels_, stride_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Tokenizer and text encoders

struct TokenizedLabel {
  TokenSequence tokens;
  bool truncated = false;
};

/// Deterministic hash tokenizer standing in for a pretrained vocabulary.
///
/// The label is lowercased and split on whitespace into words. Position i of
/// the n_text-token block uses word i, or "<pad>" past the last word; words
/// beyond n_text are dropped and the result is flagged as truncated. Entry j
/// of token i is
///     2 * u(splitmix64(fnv1a(word_i) ^ (i * D_tok + j))) - 1
/// where u maps the top 53 bits to [0, 1).
class HashTokenizer {
 public:
  HashTokenizer(std::size_t token_dim, std::size_t n_text) : token_dim_(token_dim), n_text_(n_text) {
    if (token_dim == 0 || n_text == 0) throw ConfigError("tokenizer needs D_tok >= 1 and n_text >= 1");
  }

  static double entry(const std::string& word, std::size_t position, std::size_t dim,
                      std::size_t token_dim) {
    const std::uint64_t h = fnv1a(word) ^ static_cast<std::uint64_t>(position * token_dim + dim);
    return 2.0 * unit_from_bits(splitmix64(h)) - 1.0;
  }

  TokenizedLabel tokenize(const std::string& name) const {
    if (name.empty()) throw ArgumentError("cannot tokenize an empty part label");
    std::vector<std::string> words;
    std::istringstream in(name);
    for (std::string w; in >> w;) {
      for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      words.push_back(w);
    }
    TokenizedLabel out;
    out.truncated = words.size() > n_text_;
    Tensor t({n_text_, token_dim_});
    for (std::size_t i = 0; i < n_text_; ++i) {
      const std::string& word = i < words.size() ? words[i] : std::string("<pad>");
      for (std::size_t j = 0; j < token_dim_; ++j) t[i * token_dim_ + j] = entry(word, i, j, token_dim_);
    }
    out.tokens.tokens = ad::constant(std::move(t));
    out.tokens.labels.assign(n_text_, TokenBlock::kText);
    return out;
  }

  std::size_t token_dim() const { return token_dim_; }
  std::size_t n_text() const { return n_text_; }

 private:
  std::size_t token_dim_, n_text_;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  /// Embeds a prompt into R^C. Prompts longer than context_limit() are rejected.
  virtual ad::Var encode(const TokenSequence& prompt) const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual std::size_t token_dim() const = 0;
  virtual std::size_t context_limit() const = 0;
  virtual ParameterList parameters() const = 0;
};

/// Fixed random map: mean-pool tokens, affine to a hidden width, tanh, affine
/// to C. Parameters carry no gradient when frozen.
class DeskStubTextEncoder final : public TextEncoder {
 public:
  DeskStubTextEncoder(const EncoderConfig& cfg, std::uint64_t seed, bool frozen)
      : out_dim_(cfg.channels), token_dim_(cfg.token_dim), context_limit_(cfg.context_limit) {
    Rng rng(derive_seed(seed, "text/desk-stub"));
    auto init = [&](Shape shape, double std) {
      Tensor t(std::move(shape));
      for (auto& v : t.data) v = gaussian(rng, 0.0, std);
      return ad::Var(std::move(t), !frozen);
    };
    w1_ = init({cfg.text_hidden, token_dim_}, std::sqrt(3.0 / static_cast<double>(token_dim_)));
    b1_ = init({cfg.text_hidden}, 0.1);
    w2_ = init({out_dim_, cfg.text_hidden}, std::sqrt(1.0 / static_cast<double>(cfg.text_hidden)));
    b2_ = ad::Var(Tensor({out_dim_}), !frozen);
  }

  ad::Var encode(const TokenSequence& prompt) const override {
    if (prompt.length() == 0) throw ArgumentError("empty prompt");
    if (prompt.length() > context_limit_) {
      throw ArgumentError("prompt length " + std::to_string(prompt.length()) +
                          " exceeds text context limit " + std::to_string(context_limit_));
    }
    if (prompt.token_dim() != token_dim_) {
      throw ArgumentError("prompt token width " + std::to_string(prompt.token_dim()) +
                          " != encoder token width " + std::to_string(token_dim_));
    }
    const ad::Var pooled = ad::mean_rows(prompt.tokens);
    return ad::linear(ad::tanh(ad::linear(pooled, w1_, b1_)), w2_, b2_);
  }

  std::size_t output_dim() const override { return out_dim_; }
  std::size_t token_dim() const override { return token_dim_; }
  std::size_t context_limit() const override { return context_limit_; }
  ParameterList parameters() const override {
    return {{"text/w1", w1_}, {"text/b1", b1_}, {"text/w2", w2_}, {"text/b2", b2_}};
  }

 private:
  std::size_t out_dim_, token_dim_, context_limit_;
  ad::Var w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Registry and bundle

using VisualEncoderFactory =
    std::function<std::unique_ptr<VisualEncoder>(const EncoderConfig&, std::uint64_t seed)>;
using TextEncoderFactory = std::function<std::unique_ptr<TextEncoder>(
    const EncoderConfig&, std::uint64_t seed, bool frozen)>;

inline std::map<std::string, VisualEncoderFactory>& visual_encoder_registry() {
  static std::map<std::string, VisualEncoderFactory> registry = {
      {"desk-conv", [](const EncoderConfig& c, std::uint64_t s) {
         return std::make_unique<DeskConvEncoder>(c, s);
       }}};
  return registry;
}

inline std::map<std::string, TextEncoderFactory>& text_encoder_registry() {
  static std::map<std::string, TextEncoderFactory> registry = {
      {"desk-stub", [](const EncoderConfig& c, std::uint64_t s, bool frozen) {
         return std::make_unique<DeskStubTextEncoder>(c, s, frozen);
       }}};
  return registry;
}

inline void register_visual_encoder(const std::string& key, VisualEncoderFactory f) {
  visual_encoder_registry()[key] = std::move(f);
}
inline void register_text_encoder(const std::string& key, TextEncoderFactory f) {
  text_encoder_registry()[key] = std::move(f);
}

/// Visual encoder (shared by support and query), text encoder, tokenizer.
struct EncoderBundle {
  std::unique_ptr<VisualEncoder> visual;
  std::unique_ptr<TextEncoder> text;
  HashTokenizer tokenizer{1, 1};
  bool text_frozen = true;

  FeatureMap encode_image(const Image& image) const { return visual->encode(image); }
  ad::Var encode_text(const TokenSequence& prompt) const { return text->encode(prompt); }
  TokenizedLabel tokenize_part_label(const std::string& name) const { return tokenizer.tokenize(name); }
};

inline EncoderBundle make_encoder_bundle(const EncoderConfig& cfg, std::uint64_t seed,
                                         bool text_frozen = true) {
  auto vit = visual_encoder_registry().find(cfg.visual_arch);
  if (vit == visual_encoder_registry().end())
    throw ConfigError("unknown visual encoder '" + cfg.visual_arch + "'");
  auto tit = text_encoder_registry().find(cfg.text_arch);
  if (tit == text_encoder_registry().end())
    throw ConfigError("unknown text encoder '" + cfg.text_arch + "'");
  EncoderBundle b;
  b.visual = vit->second(cfg, seed);
  b.text = tit->second(cfg, seed, text_frozen);
  b.tokenizer = HashTokenizer(cfg.token_dim, cfg.n_text);
  b.text_frozen = text_frozen;
  if (b.visual->channels() != b.text->output_dim()) {
    throw ConfigError("visual channels " + std::to_string(b.visual->channels()) +
                      " != text embedding dimension " + std::to_string(b.text->output_dim()));
  }
  return b;
}

}  // namespace partseg
