#pragma once

// Reverse-mode differentiation over a dynamically recorded graph, plus the
// layer primitives used by the capsule model.
//
// Every op returns a fresh node holding its value and, when any input needs
// a gradient, a closure that pushes the node's gradient into its inputs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "trajcaps/errors.hpp"
#include "trajcaps/random.hpp"
#include "trajcaps/tensor.hpp"

namespace trajcaps::ad {

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;

  void accumulate_ready() {
    if (grad.size() != value.size()) grad = Tensor::zeros_like(value);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() {
    node_->accumulate_ready();
    return node_->grad;
  }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  void zero_grad() {
    if (node_->grad.size() == node_->value.size()) node_->grad.fill(0.0);
  }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

/// Leaf that receives gradients.
inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->accumulate_ready();
  return Var(std::move(n));
}

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    for (auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

// Gradient buffer of an input when it participates, else nullptr.
inline double* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.accumulate_ready();
  return in.grad.data();
}

}  // namespace detail

/// Runs reverse accumulation from a scalar. `seed` scales the output
/// gradient (e.g. 1/B for a mini-batch mean). Parameter gradients
/// accumulate across calls until zeroed.
inline void backward(const Var& loss, double seed = 1.0) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Interior gradients are per-pass; only leaves accumulate across calls.
  for (Node* n : order) {
    if (n->backprop && n->grad.size() == n->value.size()) n->grad.fill(0.0);
  }
  Node* root = loss.node();
  root->accumulate_ready();
  root->grad[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return detail::make_op(Tensor::scalar(s), {x}, [](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) g[i] += up;
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = detail::grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = detail::grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Var scale(const Var& x, double k) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= k;
  return detail::make_op(std::move(out), {x}, [k](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += k * self.grad[i];
    }
  });
}

inline Var tanh(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.values()) v = std::tanh(v);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double y = self.value[i];
        g[i] += self.grad[i] * (1.0 - y * y);
      }
    }
  });
}

inline Var reshape(const Var& x, Shape shape) {
  return detail::make_op(x.value().reshaped(std::move(shape)), {x}, [](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Layers

struct Stride {
  std::size_t rows = 1;
  std::size_t cols = 1;
};

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  return (in - kernel) / stride + 1;
}

/// Valid (unpadded) multi-channel 2-D cross-correlation.
/// input [C x H x W] (or [H x W] for C = 1), kernels [O x C x kh x kw]
/// (or [O x kh x kw] for C = 1), bias [O]. Output [O x H' x W'].
inline Var conv2d(const Var& input, const Var& kernels, const Var& bias, Stride stride) {
  const Shape& is = input.shape();
  const Shape& ks = kernels.shape();
  if (is.size() != 2 && is.size() != 3) throw ShapeError("conv2d: input must be rank 2 or 3");
  const std::size_t C = is.size() == 3 ? is[0] : 1;
  const std::size_t H = is[is.size() - 2];
  const std::size_t W = is[is.size() - 1];
  const bool kernel_ok = (ks.size() == 3 && C == 1) || (ks.size() == 4 && ks[1] == C);
  if (!kernel_ok) {
    throw ShapeError("conv2d: kernel shape " + shape_str(ks) + " incompatible with input " + shape_str(is));
  }
  const std::size_t O = ks[0];
  const std::size_t kh = ks[ks.size() - 2];
  const std::size_t kw = ks[ks.size() - 1];
  if (bias.shape() != Shape{O}) throw ShapeError("conv2d: bias must have shape [O]");
  if (stride.rows < 1 || stride.cols < 1) throw ShapeError("conv2d: strides must be >= 1");
  if (kh > H || kw > W || kh == 0 || kw == 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than input " + std::to_string(H) + "x" + std::to_string(W));
  }
  const std::size_t Ho = conv_extent(H, kh, stride.rows);
  const std::size_t Wo = conv_extent(W, kw, stride.cols);
  const double* in = input.value().data();
  const double* k = kernels.value().data();
  const double* b = bias.value().data();
  Tensor out(Shape{O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        double acc = b[o];
        for (std::size_t c = 0; c < C; ++c) {
          const double* kc = k + ((o * C + c) * kh) * kw;
          const double* ic = in + c * H * W;
          for (std::size_t u = 0; u < kh; ++u) {
            const double* row = ic + (y * stride.rows + u) * W + x * stride.cols;
            for (std::size_t v = 0; v < kw; ++v) acc += kc[u * kw + v] * row[v];
          }
        }
        out[(o * Ho + y) * Wo + x] = acc;
      }
    }
  }
  return detail::make_op(std::move(out), {input, kernels, bias},
                         [C, H, W, O, kh, kw, Ho, Wo, stride](Node& self) {
                           const double* in = self.inputs[0]->value.data();
                           const double* k = self.inputs[1]->value.data();
                           double* gin = detail::grad_of(self, 0);
                           double* gk = detail::grad_of(self, 1);
                           double* gb = detail::grad_of(self, 2);
                           for (std::size_t o = 0; o < O; ++o) {
                             for (std::size_t y = 0; y < Ho; ++y) {
                               for (std::size_t x = 0; x < Wo; ++x) {
                                 const double up = self.grad[(o * Ho + y) * Wo + x];
                                 if (up == 0.0) continue;
                                 if (gb) gb[o] += up;
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const std::size_t kbase = ((o * C + c) * kh) * kw;
                                   for (std::size_t u = 0; u < kh; ++u) {
                                     const std::size_t ibase = c * H * W + (y * stride.rows + u) * W + x * stride.cols;
                                     for (std::size_t v = 0; v < kw; ++v) {
                                       if (gk) gk[kbase + u * kw + v] += up * in[ibase + v];
                                       if (gin) gin[ibase + v] += up * k[kbase + u * kw + v];
                                     }
                                   }
                                 }
                               }
                             }
                           }
                         });
}

/// Feature maps tanh(kernel * input + bias) of a single-channel input.
inline Var conv2d_tanh(const Var& input, const Var& kernels, const Var& bias, Stride stride) {
  return tanh(conv2d(input, kernels, bias, stride));
}

/// y = W x + b with x [n], W [m x n], b [m].
inline Var linear(const Var& x, const Var& weights, const Var& bias) {
  if (x.shape().size() != 1 || weights.shape().size() != 2) {
    throw ShapeError("linear: expects x [n] and W [m x n]");
  }
  const std::size_t m = weights.shape()[0];
  const std::size_t n = weights.shape()[1];
  if (x.shape()[0] != n) {
    throw ShapeError("linear: input length " + std::to_string(x.shape()[0]) + " != " + std::to_string(n));
  }
  if (bias.shape() != Shape{m}) throw ShapeError("linear: bias must have shape [m]");
  const double* xv = x.value().data();
  const double* w = weights.value().data();
  Tensor out = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += w[r * n + c] * xv[c];
    out[r] += acc;
  }
  return detail::make_op(std::move(out), {x, weights, bias}, [m, n](Node& self) {
    const double* xv = self.inputs[0]->value.data();
    const double* w = self.inputs[1]->value.data();
    double* gx = detail::grad_of(self, 0);
    double* gw = detail::grad_of(self, 1);
    double* gb = detail::grad_of(self, 2);
    for (std::size_t r = 0; r < m; ++r) {
      const double up = self.grad[r];
      if (gb) gb[r] += up;
      for (std::size_t c = 0; c < n; ++c) {
        if (gw) gw[r * n + c] += up * xv[c];
        if (gx) gx[c] += up * w[r * n + c];
      }
    }
  });
}

namespace detail {

inline void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += (out[i] = std::exp(in[i] - mx));
  for (std::size_t i = 0; i < n; ++i) out[i] /= z;
}

// v = (|s|^2 / (1 + |s|^2)) s / |s|, zero at s = 0.
inline void squash_row(const double* s, double* v, std::size_t n) {
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += s[i] * s[i];
  if (sq == 0.0) {
    for (std::size_t i = 0; i < n; ++i) v[i] = 0.0;
    return;
  }
  const double norm = std::sqrt(sq);
  const double factor = norm / (1.0 + sq);
  for (std::size_t i = 0; i < n; ++i) v[i] = factor * s[i];
}

// Vector-Jacobian product of squash: writes ds += J^T dv.
// With v = g(r) s, g(r) = r / (1 + r^2): dv/ds = g I + (g'(r)/r) s s^T.
inline void squash_row_vjp(const double* s, const double* dv, double* ds, std::size_t n) {
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) sq += s[i] * s[i];
  if (sq == 0.0) return;
  const double r = std::sqrt(sq);
  const double den = 1.0 + sq;
  const double g = r / den;
  const double gprime_over_r = (1.0 - sq) / (den * den * r);
  double sdot = 0.0;
  for (std::size_t i = 0; i < n; ++i) sdot += s[i] * dv[i];
  for (std::size_t i = 0; i < n; ++i) ds[i] += g * dv[i] + gprime_over_r * sdot * s[i];
}

inline std::pair<std::size_t, std::size_t> rows_of(const Shape& s, const char* op) {
  if (s.empty()) throw ShapeError(std::string(op) + ": rank-0 input");
  const std::size_t n = s.back();
  if (n == 0) throw ShapeError(std::string(op) + ": empty last axis");
  return {shape_size(s) / n, n};
}

}  // namespace detail

/// Softmax along the last axis.
inline Var softmax(const Var& x) {
  const auto [rows, n] = detail::rows_of(x.shape(), "softmax");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) detail::softmax_row(x.value().data() + r * n, out.data() + r * n, n);
  return detail::make_op(std::move(out), {x}, [rows, n](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * n;
        const double* up = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += y[i] * up[i];
        for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (up[i] - dot);
      }
    }
  });
}

/// Squash applied to each vector along the last axis.
inline Var squash(const Var& x) {
  const auto [rows, n] = detail::rows_of(x.shape(), "squash");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) detail::squash_row(x.value().data() + r * n, out.data() + r * n, n);
  return detail::make_op(std::move(out), {x}, [rows, n](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      const double* s = self.inputs[0]->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        detail::squash_row_vjp(s + r * n, self.grad.data() + r * n, g + r * n, n);
      }
    }
  });
}

enum class Mode { train, infer };

/// Inverted dropout: in train mode each element is zeroed with probability p
/// and survivors are scaled by 1/(1-p). Identity in infer mode or for p = 0.
inline Var dropout(const Var& x, double p, Rng& rng, Mode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
  if (mode == Mode::infer || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return detail::make_op(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

/// −log softmax(scores)[label] for scores [G].
inline Var cross_entropy(const Var& scores, std::size_t label) {
  if (scores.shape().size() != 1) throw ShapeError("cross_entropy: scores must be rank 1");
  const std::size_t n = scores.shape()[0];
  if (label >= n) throw OutOfBoundsError("cross_entropy: label out of range");
  const double* s = scores.value().data();
  double mx = s[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, s[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(s[i] - mx);
  const double lse = mx + std::log(z);
  return detail::make_op(Tensor::scalar(lse - s[label]), {scores}, [n, label, lse](Node& self) {
    if (double* g = detail::grad_of(self, 0)) {
      const double* s = self.inputs[0]->value.data();
      const double up = self.grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        g[i] += up * (std::exp(s[i] - lse) - (i == label ? 1.0 : 0.0));
      }
    }
  });
}

}  // namespace trajcaps::ad
