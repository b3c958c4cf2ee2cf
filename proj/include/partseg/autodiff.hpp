#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a shared handle to a graph node. Operations on Vars record their
// parents and a local backward rule whenever at least one input requires a
// gradient; constant subgraphs carry no tape. Leaf parameters keep their
// accumulated gradient across backward() calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "partseg/errors.hpp"

namespace partseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor of doubles.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_size(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape)) {
      throw ArgumentError("tensor data size " + std::to_string(data.size()) +
                          " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

namespace ad {

struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(const Node&)> backprop;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor& value() const { return node_->value; }
  /// Direct write access for optimizers and finite-difference probes.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Accumulated gradient; all zeros when nothing has flowed here.
  std::vector<double> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<double>(node_->value.size(), 0.0);
  }
  void zero_grad() { node_->grad.clear(); }

  /// Scalar value; only valid for single-element tensors.
  double item() const {
    if (size() != 1) throw ArgumentError("item() on tensor of shape " + shape_string(shape()));
    return node_->value.data[0];
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Var& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor value) { return Var(std::move(value), false); }
inline Var parameter(Tensor value) { return Var(std::move(value), true); }

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> inputs,
                       std::function<void(const Node&)> backprop) {
  Var out(std::move(value), false);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backprop = std::move(backprop);
  return out;
}

// Gradient buffer of parent i if it participates in the backward pass.
inline std::vector<double>* parent_grad(const Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return &p.ensure_grad();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                        " vs " + shape_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw ArgumentError(std::string(op) + ": expected rank " + std::to_string(rank) +
                        ", got shape " + shape_string(a.shape()));
  }
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root.
inline void backward(const Var& root) {
  if (root.size() != 1) throw ArgumentError("backward() requires a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

inline Var detach(const Var& a) { return constant(a.value()); }

/// alpha * a + beta * b
inline Var weighted_sum(const Var& a, double alpha, const Var& b, double beta) {
  detail::require_same_shape(a, b, "weighted_sum");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x[i] + beta * y[i];
  return detail::make_result(std::move(out), {a, b}, [alpha, beta](const Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += alpha * self.grad[i];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += beta * self.grad[i];
  });
}

inline Var add(const Var& a, const Var& b) { return weighted_sum(a, 1.0, b, 1.0); }
inline Var sub(const Var& a, const Var& b) { return weighted_sum(a, 1.0, b, -1.0); }

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data) v *= s;
  return detail::make_result(std::move(out), {a}, [s](const Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

namespace detail {

template <typename F, typename DF>
Var elementwise(const Var& a, F f, DF df) {
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result(std::move(out), {a}, [df](const Node& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto& x = self.parents[0]->value.data;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += df(x[i]) * self.grad[i];
    }
  });
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::elementwise(
      a, [](double x) { return x < 0.0 ? 0.0 : x; },  // NaN passes through
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& a) {
  return detail::elementwise(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

/// Exact (erf-based) GELU.
inline Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return detail::elementwise(
      a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

inline Var reshape(const Var& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ArgumentError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                        shape_string(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return detail::make_result(std::move(out), {a}, [](const Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// y = W x + b with x: [in], W: [out, in], b: [out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
  detail::require_rank(x, 1, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t out_dim = w.dim(0), in_dim = w.dim(1);
  if (x.dim(0) != in_dim || b.shape() != Shape{out_dim}) {
    throw ArgumentError("linear: incompatible shapes x" + shape_string(x.shape()) + " W" +
                        shape_string(w.shape()) + " b" + shape_string(b.shape()));
  }
  Tensor out({out_dim});
  const auto& xv = x.value().data;
  const auto& wv = w.value().data;
  const auto& bv = b.value().data;
  for (std::size_t o = 0; o < out_dim; ++o) {
    double acc = bv[o];
    const double* row = wv.data() + o * in_dim;
    for (std::size_t i = 0; i < in_dim; ++i) acc += row[i] * xv[i];
    out[o] = acc;
  }
  return detail::make_result(std::move(out), {x, w, b}, [out_dim, in_dim](const Node& self) {
    const auto& xv = self.parents[0]->value.data;
    const auto& wv = self.parents[1]->value.data;
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t o = 0; o < out_dim; ++o)
        for (std::size_t i = 0; i < in_dim; ++i) (*g)[i] += wv[o * in_dim + i] * self.grad[o];
    if (auto* g = detail::parent_grad(self, 1))
      for (std::size_t o = 0; o < out_dim; ++o)
        for (std::size_t i = 0; i < in_dim; ++i) (*g)[o * in_dim + i] += xv[i] * self.grad[o];
    if (auto* g = detail::parent_grad(self, 2))
      for (std::size_t o = 0; o < out_dim; ++o) (*g)[o] += self.grad[o];
  });
}

/// 2-D convolution of x: [Ci, H, W] with w: [Co, Ci, k, k] and bias b: [Co].
/// Zero padding `pad` on every side.
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci || w.dim(3) != k || b.shape() != Shape{co} || stride == 0) {
    throw ArgumentError("conv2d: incompatible shapes x" + shape_string(x.shape()) + " w" +
                        shape_string(w.shape()));
  }
  if (h + 2 * pad < k || wd + 2 * pad < k) throw ArgumentError("conv2d: kernel larger than input");
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;

  // Output range [lo, hi) along one axis for kernel offset `kk` so that the
  // input index o*stride + kk - pad lies inside [0, n).
  auto valid = [=](std::size_t kk, std::size_t n, std::size_t outn) {
    const long long s = static_cast<long long>(stride);
    const long long off = static_cast<long long>(kk) - static_cast<long long>(pad);
    long long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    long long hi = (static_cast<long long>(n) - 1 - off) / s + 1;
    if (static_cast<long long>(n) - 1 - off < 0) hi = 0;
    hi = std::min<long long>(hi, static_cast<long long>(outn));
    return std::pair<std::size_t, std::size_t>(lo, std::max(lo, hi));
  };

  Tensor out({co, ho, wo});
  const double* xv = x.value().data.data();
  const double* wv = w.value().data.data();
  const double* bv = b.value().data.data();
  double* ov = out.data.data();
  for (std::size_t o = 0; o < co; ++o)
    std::fill(ov + o * ho * wo, ov + (o + 1) * ho * wo, bv[o]);
  for (std::size_t ky = 0; ky < k; ++ky) {
    const auto [ylo, yhi] = valid(ky, h, ho);
    for (std::size_t kx = 0; kx < k; ++kx) {
      const auto [xlo, xhi] = valid(kx, wd, wo);
      for (std::size_t o = 0; o < co; ++o) {
        for (std::size_t c = 0; c < ci; ++c) {
          const double wk = wv[((o * ci + c) * k + ky) * k + kx];
          const double* xc = xv + c * h * wd;
          double* oc = ov + o * ho * wo;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * stride + ky - pad;
            const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(iy * wd + kx) -
                                       static_cast<std::ptrdiff_t>(pad);
            double* orow = oc + oy * wo;
            for (std::size_t ox = xlo; ox < xhi; ++ox)
              orow[ox] += wk * xc[row + static_cast<std::ptrdiff_t>(ox * stride)];
          }
        }
      }
    }
  }

  return detail::make_result(
      std::move(out), {x, w, b}, [=](const Node& self) {
        const double* xv = self.parents[0]->value.data.data();
        const double* wv = self.parents[1]->value.data.data();
        const double* gout = self.grad.data();
        auto* gx = detail::parent_grad(self, 0);
        auto* gw = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        if (gb)
          for (std::size_t o = 0; o < co; ++o) {
            double acc = 0.0;
            for (std::size_t p = 0; p < ho * wo; ++p) acc += gout[o * ho * wo + p];
            (*gb)[o] += acc;
          }
        if (!gx && !gw) return;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto [ylo, yhi] = valid(ky, h, ho);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto [xlo, xhi] = valid(kx, wd, wo);
            for (std::size_t o = 0; o < co; ++o) {
              const double* go = gout + o * ho * wo;
              for (std::size_t c = 0; c < ci; ++c) {
                const std::size_t widx = ((o * ci + c) * k + ky) * k + kx;
                const double wk = wv[widx];
                double wacc = 0.0;
                for (std::size_t oy = ylo; oy < yhi; ++oy) {
                  const std::ptrdiff_t base =
                      static_cast<std::ptrdiff_t>(c * h * wd + (oy * stride + ky - pad) * wd + kx) -
                      static_cast<std::ptrdiff_t>(pad);
                  const double* grow = go + oy * wo;
                  if (gw)
                    for (std::size_t ox = xlo; ox < xhi; ++ox)
                      wacc += xv[base + static_cast<std::ptrdiff_t>(ox * stride)] * grow[ox];
                  if (gx) {
                    double* gxd = gx->data();
                    for (std::size_t ox = xlo; ox < xhi; ++ox)
                      gxd[base + static_cast<std::ptrdiff_t>(ox * stride)] += wk * grow[ox];
                  }
                }
                if (gw) (*gw)[widx] += wacc;
              }
            }
          }
        }
      });
}

/// Concatenates [n_i, D] blocks along the first axis. Empty blocks ([0, D])
/// are allowed; at least one input is needed to fix D.
inline Var concat_rows(const std::vector<Var>& blocks) {
  if (blocks.empty()) throw ArgumentError("concat_rows: no blocks");
  const std::size_t d = blocks.front().shape().size() == 2 ? blocks.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& blk : blocks) {
    if (blk.shape().size() != 2 || blk.dim(1) != d) {
      throw ArgumentError("concat_rows: token width mismatch, expected " + std::to_string(d) +
                          ", got " + shape_string(blk.shape()));
    }
    rows += blk.dim(0);
  }
  Tensor out({rows, d});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& blk : blocks) {
    offsets.push_back(off);
    std::copy(blk.value().data.begin(), blk.value().data.end(), out.data.begin() + off);
    off += blk.size();
  }
  return detail::make_result(std::move(out), blocks, [offsets](const Node& self) {
    for (std::size_t i = 0; i < offsets.size(); ++i)
      if (auto* g = detail::parent_grad(self, i))
        for (std::size_t j = 0; j < g->size(); ++j) (*g)[j] += self.grad[offsets[i] + j];
  });
}

/// Stacks K vectors of length C into a [K, C] matrix.
inline Var stack(const std::vector<Var>& rows) {
  if (rows.empty()) throw ArgumentError("stack: no rows");
  const std::size_t c = rows.front().size();
  std::vector<Var> as_blocks;
  as_blocks.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.shape().size() != 1 || r.size() != c) throw ArgumentError("stack: row length mismatch");
    as_blocks.push_back(reshape(r, {1, c}));
  }
  return concat_rows(as_blocks);
}

/// Mean over rows of an [n, D] matrix, n >= 1.
inline Var mean_rows(const Var& a) {
  detail::require_rank(a, 2, "mean_rows");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (n == 0) throw ArgumentError("mean_rows: empty input");
  Tensor out({d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[j] += a.value().data[r * d + j];
  for (auto& v : out.data) v /= static_cast<double>(n);
  return detail::make_result(std::move(out), {a}, [n, d](const Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) (*g)[r * d + j] += self.grad[j] / static_cast<double>(n);
  });
}

/// Mean of selected spatial positions pooled jointly across several [C, H, W]
/// maps. `selections[s]` lists flat pixel indices (y * W + x) of map s.
inline Var masked_mean(const std::vector<Var>& maps,
                       const std::vector<std::vector<std::size_t>>& selections) {
  if (maps.empty() || maps.size() != selections.size())
    throw ArgumentError("masked_mean: maps/selections mismatch");
  const std::size_t c = maps.front().dim(0);
  std::size_t count = 0;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    detail::require_rank(maps[s], 3, "masked_mean");
    if (maps[s].dim(0) != c) throw ArgumentError("masked_mean: channel mismatch");
    count += selections[s].size();
  }
  if (count == 0) throw ArgumentError("masked_mean: empty selection");
  Tensor out({c});
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const std::size_t hw = maps[s].dim(1) * maps[s].dim(2);
    const auto& v = maps[s].value().data;
    for (std::size_t p : selections[s])
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += v[ch * hw + p];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& v : out.data) v *= inv;
  return detail::make_result(std::move(out), maps, [selections, c, inv](const Node& self) {
    for (std::size_t s = 0; s < selections.size(); ++s) {
      auto* g = detail::parent_grad(self, s);
      if (!g) continue;
      const auto& shape = self.parents[s]->value.shape;
      const std::size_t hw = shape[1] * shape[2];
      for (std::size_t p : selections[s])
        for (std::size_t ch = 0; ch < c; ++ch) (*g)[ch * hw + p] += self.grad[ch] * inv;
    }
  });
}

/// Mean over all spatial positions of a [C, H, W] map.
inline Var spatial_mean(const Var& f) {
  detail::require_rank(f, 3, "spatial_mean");
  std::vector<std::size_t> all(f.dim(1) * f.dim(2));
  std::iota(all.begin(), all.end(), std::size_t{0});
  return masked_mean({f}, {all});
}

/// Inner products between every pixel of f: [C, H, W] and every row of
/// protos: [K, C]. Output [H*W, K] with entry (p, k) = <f[:, p], protos[k]>.
inline Var pixel_inner_products(const Var& f, const Var& protos) {
  detail::require_rank(f, 3, "pixel_inner_products");
  detail::require_rank(protos, 2, "pixel_inner_products");
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2), kk = protos.dim(0);
  if (protos.dim(1) != c) {
    throw ArgumentError("correlate: prototype dimension " + std::to_string(protos.dim(1)) +
                        " != feature channels " + std::to_string(c));
  }
  Tensor out({hw, kk});
  const auto& fv = f.value().data;
  const auto& pv = protos.value().data;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) {
      const double x = fv[ch * hw + p];
      for (std::size_t k = 0; k < kk; ++k) out[p * kk + k] += x * pv[k * c + ch];
    }
  return detail::make_result(std::move(out), {f, protos}, [c, hw, kk](const Node& self) {
    const auto& fv = self.parents[0]->value.data;
    const auto& pv = self.parents[1]->value.data;
    auto* gf = detail::parent_grad(self, 0);
    auto* gp = detail::parent_grad(self, 1);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const double* go = self.grad.data() + p * kk;
        if (gf) {
          double acc = 0.0;
          for (std::size_t k = 0; k < kk; ++k) acc += go[k] * pv[k * c + ch];
          (*gf)[ch * hw + p] += acc;
        }
        if (gp) {
          const double x = fv[ch * hw + p];
          for (std::size_t k = 0; k < kk; ++k) (*gp)[k * c + ch] += go[k] * x;
        }
      }
  });
}

/// L2-normalizes each row of an [R, D] matrix (rows with norm below eps are
/// divided by eps).
inline Var normalize_rows(const Var& a, double eps = 1e-12) {
  detail::require_rank(a, 2, "normalize_rows");
  const std::size_t r = a.dim(0), d = a.dim(1);
  Tensor out(a.shape());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a.value().data[i * d + j] * a.value().data[i * d + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a.value().data[i * d + j] / norms[i];
  }
  Tensor normalized = out;
  return detail::make_result(std::move(out), {a}, [r, d, norms, normalized, eps](const Node& self) {
    auto* g = detail::parent_grad(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = normalized.data.data() + i * d;
      const double* gy = self.grad.data() + i * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
      const bool clamped = norms[i] <= eps;
      for (std::size_t j = 0; j < d; ++j)
        (*g)[i * d + j] += clamped ? gy[j] / norms[i] : (gy[j] - y[j] * dot) / norms[i];
    }
  });
}

/// Transposes a [R, D] matrix.
inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), d = a.dim(1);
  Tensor out({d, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j * r + i] = a.value().data[i * d + j];
  return detail::make_result(std::move(out), {a}, [r, d](const Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)[i * d + j] += self.grad[j * r + i];
  });
}

/// Mean cross-entropy of row-wise softmax(logits) against integer targets.
/// logits: [M, K]; targets[m] in [0, K) or -1 to ignore the row. Returns a
/// scalar; zero with no gradient path when every row is ignored.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), kk = logits.dim(1);
  if (targets.size() != m) throw ArgumentError("softmax_cross_entropy: target count mismatch");
  std::size_t count = 0;
  for (int t : targets) {
    if (t >= static_cast<int>(kk) || t < -1)
      throw ArgumentError("softmax_cross_entropy: target " + std::to_string(t) + " out of range");
    if (t >= 0) ++count;
  }
  if (count == 0) return constant(Tensor({}, 0.0));
  const auto& lv = logits.value().data;
  std::vector<double> probs(m * kk, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0) continue;
    const double* row = lv.data() + i * kk;
    const double mx = *std::max_element(row, row + kk);
    double z = 0.0;
    for (std::size_t k = 0; k < kk; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < kk; ++k) probs[i * kk + k] = std::exp(row[k] - mx) / z;
    loss += -(row[targets[i]] - mx - std::log(z));
  }
  const double inv = 1.0 / static_cast<double>(count);
  return detail::make_result(Tensor({}, loss * inv), {logits},
                             [probs = std::move(probs), targets, kk, inv](const Node& self) {
                               auto* g = detail::parent_grad(self, 0);
                               if (!g) return;
                               const double go = self.grad[0] * inv;
                               for (std::size_t i = 0; i < targets.size(); ++i) {
                                 if (targets[i] < 0) continue;
                                 for (std::size_t k = 0; k < kk; ++k) {
                                   const double y = static_cast<int>(k) == targets[i] ? 1.0 : 0.0;
                                   (*g)[i * kk + k] += go * (probs[i * kk + k] - y);
                                 }
                               }
                             });
}

}  // namespace ad
}  // namespace partseg
