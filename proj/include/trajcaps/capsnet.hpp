#pragma once

// Capsule network for next-grid prediction:
//
//   frame (G x L one-hot) -> tanh conv (M maps) -> basic-capsule conv
//   -> basic capsules u_i (M/D channels of dimension D per position)
//   -> squash -> u_hat_{j|i} = W_{c(i),j} u_i -> dynamic routing -> v_j
//   -> flatten -> hidden linear + tanh + dropout -> G output scores
//
// Routing couplings are computed on values and held fixed for the
// backward pass; gradients reach u_hat through the final s_j = sum_i c_ij u_hat.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "trajcaps/adam.hpp"
#include "trajcaps/autodiff.hpp"
#include "trajcaps/checkpoint.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/frame_io.hpp"
#include "trajcaps/geogrid.hpp"
#include "trajcaps/ingest.hpp"
#include "trajcaps/random.hpp"
#include "trajcaps/tensor.hpp"

namespace trajcaps {

enum class FrameLayout { grid_by_window, window_by_grid };

/// Transformation matrices W: one per (capsule channel, advanced capsule),
/// shared across positions, or one per (basic capsule, advanced capsule).
enum class TransformSharing { per_channel, per_capsule };

struct Kernel2 {
  std::size_t rows = 1;
  std::size_t cols = 1;

  friend bool operator==(const Kernel2&, const Kernel2&) = default;
};

struct DependentParams {
  std::size_t basic_channels = 0;
  std::size_t advanced_dim = 0;
  std::size_t advanced_count = 0;

  friend bool operator==(const DependentParams&, const DependentParams&) = default;
};

/// Channel count M/D, advanced dimension 2D and advanced count G.
inline DependentParams derive_dependent_params(std::size_t filters, std::size_t capsule_dim, std::size_t grids) {
  if (filters == 0 || capsule_dim == 0 || grids == 0) {
    throw ConfigError("M, D and G must all be positive");
  }
  if (filters % capsule_dim != 0) {
    throw ConfigError("number of filters M=" + std::to_string(filters) +
                      " is not divisible by capsule dimension D=" + std::to_string(capsule_dim));
  }
  return {filters / capsule_dim, 2 * capsule_dim, grids};
}

struct ModelConfig {
  std::size_t grid_count = 16;
  std::size_t window_length = 3;
  FrameLayout layout = FrameLayout::grid_by_window;

  std::size_t filters = 80;  // M
  Kernel2 conv_kernel{1, 2};
  Kernel2 conv_stride{1, 2};

  std::size_t capsule_dim = 4;  // D
  Kernel2 caps_kernel{1, 8};
  Kernel2 caps_stride{1, 1};

  std::size_t advanced_count_override = 0;  // 0: use G
  TransformSharing transform_sharing = TransformSharing::per_channel;
  std::size_t fc_width = 100;
  double dropout = 0.2;
  std::size_t routing_iterations = 3;

  std::size_t epochs = 50;
  std::size_t patience = 5;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  DependentParams dependent() const {
    DependentParams d = derive_dependent_params(filters, capsule_dim, grid_count);
    if (advanced_count_override != 0) d.advanced_count = advanced_count_override;
    return d;
  }
  std::size_t basic_channels() const { return dependent().basic_channels; }
  std::size_t advanced_dim() const { return dependent().advanced_dim; }
  std::size_t advanced_count() const { return dependent().advanced_count; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Spatial sizes through the two convolutions.
struct ModelGeometry {
  std::size_t input_rows = 0, input_cols = 0;
  std::size_t conv_rows = 0, conv_cols = 0;
  std::size_t caps_rows = 0, caps_cols = 0;
  std::size_t basic_capsules = 0;
};

inline ModelGeometry geometry(const ModelConfig& c) {
  ModelGeometry g;
  if (c.layout == FrameLayout::grid_by_window) {
    g.input_rows = c.grid_count;
    g.input_cols = c.window_length;
  } else {
    g.input_rows = c.window_length;
    g.input_cols = c.grid_count;
  }
  auto stage = [](std::size_t in, std::size_t k, std::size_t s, const char* what, const char* axis) {
    if (k == 0 || s == 0) throw ConfigError(std::string(what) + " kernel and stride must be positive");
    if (k > in) {
      throw ConfigError(std::string(what) + " kernel " + axis + " extent " + std::to_string(k) +
                        " exceeds input extent " + std::to_string(in));
    }
    return ad::conv_extent(in, k, s);
  };
  g.conv_rows = stage(g.input_rows, c.conv_kernel.rows, c.conv_stride.rows, "convolution", "row");
  g.conv_cols = stage(g.input_cols, c.conv_kernel.cols, c.conv_stride.cols, "convolution", "column");
  g.caps_rows = stage(g.conv_rows, c.caps_kernel.rows, c.caps_stride.rows, "basic-capsule", "row");
  g.caps_cols = stage(g.conv_cols, c.caps_kernel.cols, c.caps_stride.cols, "basic-capsule", "column");
  g.basic_capsules = g.caps_rows * g.caps_cols * c.basic_channels();
  return g;
}

inline void validate(const ModelConfig& c) {
  if (c.grid_count < 1) throw ConfigError("grid count G must be >= 1");
  if (c.window_length < 1) throw ConfigError("window length L must be >= 1");
  (void)c.dependent();
  if (c.routing_iterations < 1) throw ConfigError("routing_iterations must be >= 1");
  if (c.fc_width < 1) throw ConfigError("fc_width must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) throw ConfigError("learning_rate must be positive");
  (void)geometry(c);
}

// ---------------------------------------------------------------------------
// Parameters

/// Learnable weights by value.
struct ModelParams {
  Tensor conv_kernels;  // [M x kh x kw]
  Tensor conv_bias;     // [M]
  Tensor caps_kernels;  // [M x M x kh2 x kw2]
  Tensor caps_bias;     // [M]
  Tensor transform;     // [channels (or basic capsules) x J x 2D x D]
  Tensor hidden_weight; // [fc x J*2D]
  Tensor hidden_bias;   // [fc]
  Tensor output_weight; // [G x fc]
  Tensor output_bias;   // [G]

  static constexpr std::size_t kCount = 9;

  std::array<Tensor*, kCount> all() {
    return {&conv_kernels, &conv_bias, &caps_kernels, &caps_bias, &transform,
            &hidden_weight, &hidden_bias, &output_weight, &output_bias};
  }
  std::array<const Tensor*, kCount> all() const {
    return {&conv_kernels, &conv_bias, &caps_kernels, &caps_bias, &transform,
            &hidden_weight, &hidden_bias, &output_weight, &output_bias};
  }
  static const std::array<const char*, kCount>& names() {
    static const std::array<const char*, kCount> n = {
        "conv.kernels", "conv.bias", "basic.kernels", "basic.bias", "routing.transform",
        "hidden.weight", "hidden.bias", "output.weight", "output.bias"};
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline ModelParams zero_params(const ModelConfig& c) {
  const auto d = c.dependent();
  ModelParams p;
  p.conv_kernels = Tensor(Shape{c.filters, c.conv_kernel.rows, c.conv_kernel.cols});
  p.conv_bias = Tensor(Shape{c.filters});
  p.caps_kernels = Tensor(Shape{c.filters, c.filters, c.caps_kernel.rows, c.caps_kernel.cols});
  p.caps_bias = Tensor(Shape{c.filters});
  const std::size_t w_rows =
      c.transform_sharing == TransformSharing::per_channel ? d.basic_channels : geometry(c).basic_capsules;
  p.transform = Tensor(Shape{w_rows, d.advanced_count, d.advanced_dim, c.capsule_dim});
  p.hidden_weight = Tensor(Shape{c.fc_width, d.advanced_count * d.advanced_dim});
  p.hidden_bias = Tensor(Shape{c.fc_width});
  p.output_weight = Tensor(Shape{c.grid_count, c.fc_width});
  p.output_bias = Tensor(Shape{c.grid_count});
  return p;
}

/// Glorot-uniform weights, zero biases.
inline ModelParams init_params(const ModelConfig& c, Rng& rng) {
  validate(c);
  ModelParams p = zero_params(c);
  const auto d = c.dependent();
  auto glorot = [&rng](Tensor& t, double fan_in, double fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.values()) v = rng.uniform(-limit, limit);
  };
  const double k1 = static_cast<double>(c.conv_kernel.rows * c.conv_kernel.cols);
  const double k2 = static_cast<double>(c.caps_kernel.rows * c.caps_kernel.cols);
  glorot(p.conv_kernels, k1, static_cast<double>(c.filters) * k1);
  glorot(p.caps_kernels, static_cast<double>(c.filters) * k2, static_cast<double>(c.filters) * k2);
  glorot(p.transform, static_cast<double>(c.capsule_dim), static_cast<double>(d.advanced_dim));
  glorot(p.hidden_weight, static_cast<double>(d.advanced_count * d.advanced_dim), static_cast<double>(c.fc_width));
  glorot(p.output_weight, static_cast<double>(c.fc_width), static_cast<double>(c.grid_count));
  return p;
}

/// Autodiff leaves over a parameter set.
struct ParamLeaves {
  std::array<ad::Var, ModelParams::kCount> vars;

  const ad::Var& conv_kernels() const { return vars[0]; }
  const ad::Var& conv_bias() const { return vars[1]; }
  const ad::Var& caps_kernels() const { return vars[2]; }
  const ad::Var& caps_bias() const { return vars[3]; }
  const ad::Var& transform() const { return vars[4]; }
  const ad::Var& hidden_weight() const { return vars[5]; }
  const ad::Var& hidden_bias() const { return vars[6]; }
  const ad::Var& output_weight() const { return vars[7]; }
  const ad::Var& output_bias() const { return vars[8]; }

  void zero_grad() {
    for (auto& v : vars) v.zero_grad();
  }
};

inline ParamLeaves make_leaves(const ModelParams& p, bool trainable) {
  ParamLeaves leaves;
  const auto src = p.all();
  for (std::size_t k = 0; k < ModelParams::kCount; ++k) {
    leaves.vars[k] = trainable ? ad::parameter(*src[k]) : ad::constant(*src[k]);
  }
  return leaves;
}

inline ModelParams snapshot(const ParamLeaves& leaves) {
  ModelParams p;
  auto dst = p.all();
  for (std::size_t k = 0; k < ModelParams::kCount; ++k) *dst[k] = leaves.vars[k].value();
  return p;
}

// ---------------------------------------------------------------------------
// Dynamic routing

struct RoutingState {
  std::size_t inputs = 0;   // basic capsules i
  std::size_t outputs = 0;  // advanced capsules j
  std::size_t dim = 0;
  Tensor logits;    // b [N x J] after the last agreement update
  Tensor coupling;  // c [N x J] that produced the returned v
  std::vector<Tensor> coupling_history;  // c after every softmax step
  std::vector<Tensor> input_history;     // s [J x A] per iteration
  std::vector<Tensor> output_history;    // v [J x A] per iteration
};

namespace detail {

// s_j = sum_i c_ij u_hat_{j|i}; u_hat [N x J x A], c [N x J] -> s [J x A].
inline Tensor weighted_inputs(const Tensor& u_hat, const Tensor& c, std::size_t n, std::size_t j_count,
                              std::size_t a) {
  Tensor s(Shape{j_count, a});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < j_count; ++j) {
      const double cij = c[i * j_count + j];
      const double* u = u_hat.data() + (i * j_count + j) * a;
      double* sj = s.data() + j * a;
      for (std::size_t k = 0; k < a; ++k) sj[k] += cij * u[k];
    }
  }
  return s;
}

inline void check_u_hat(const Shape& s) {
  if (s.size() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0) {
    throw ShapeError("routing: u_hat must have non-empty shape [N x J x A], got " + shape_str(s));
  }
}

}  // namespace detail

/// Routing by agreement on values: b = 0; repeat { c = softmax_j(b);
/// s_j = sum_i c_ij u_hat; v_j = squash(s_j); b_ij += u_hat . v_j }.
inline RoutingState route_values(const Tensor& u_hat, std::size_t iterations) {
  detail::check_u_hat(u_hat.shape());
  if (iterations < 1) throw ConfigError("routing needs at least one iteration");
  const std::size_t n = u_hat.dim(0), jc = u_hat.dim(1), a = u_hat.dim(2);
  RoutingState st;
  st.inputs = n;
  st.outputs = jc;
  st.dim = a;
  st.logits = Tensor(Shape{n, jc});
  for (std::size_t it = 0; it < iterations; ++it) {
    Tensor c(Shape{n, jc});
    for (std::size_t i = 0; i < n; ++i) ad::detail::softmax_row(st.logits.data() + i * jc, c.data() + i * jc, jc);
    Tensor s = detail::weighted_inputs(u_hat, c, n, jc, a);
    Tensor v(Shape{jc, a});
    for (std::size_t j = 0; j < jc; ++j) ad::detail::squash_row(s.data() + j * a, v.data() + j * a, a);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < jc; ++j) {
        const double* u = u_hat.data() + (i * jc + j) * a;
        const double* vj = v.data() + j * a;
        double agree = 0.0;
        for (std::size_t k = 0; k < a; ++k) agree += u[k] * vj[k];
        st.logits[i * jc + j] += agree;
      }
    }
    st.coupling = c;
    st.coupling_history.push_back(std::move(c));
    st.input_history.push_back(std::move(s));
    st.output_history.push_back(std::move(v));
  }
  return st;
}

/// v = squash(sum_i c_ij u_hat_{j|i}) with c held constant.
inline ad::Var weighted_squash(const ad::Var& u_hat, const Tensor& coupling) {
  detail::check_u_hat(u_hat.shape());
  const std::size_t n = u_hat.shape()[0], jc = u_hat.shape()[1], a = u_hat.shape()[2];
  if (coupling.shape() != Shape{n, jc}) throw ShapeError("routing: coupling must have shape [N x J]");
  Tensor s = detail::weighted_inputs(u_hat.value(), coupling, n, jc, a);
  Tensor v(Shape{jc, a});
  for (std::size_t j = 0; j < jc; ++j) ad::detail::squash_row(s.data() + j * a, v.data() + j * a, a);
  return ad::detail::make_op(std::move(v), {u_hat},
                             [coupling, s = std::move(s), n, jc, a](ad::Node& self) {
                               double* g = ad::detail::grad_of(self, 0);
                               if (!g) return;
                               Tensor ds(Shape{jc, a});
                               for (std::size_t j = 0; j < jc; ++j) {
                                 ad::detail::squash_row_vjp(s.data() + j * a, self.grad.data() + j * a,
                                                            ds.data() + j * a, a);
                               }
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < jc; ++j) {
                                   const double cij = coupling[i * jc + j];
                                   double* gu = g + (i * jc + j) * a;
                                   for (std::size_t k = 0; k < a; ++k) gu[k] += cij * ds[j * a + k];
                                 }
                               }
                             });
}

/// Full routing: couplings from route_values, gradient through the final step.
inline ad::Var route(const ad::Var& u_hat, std::size_t iterations, RoutingState* state = nullptr) {
  RoutingState st = route_values(u_hat.value(), iterations);
  ad::Var v = weighted_squash(u_hat, st.coupling);
  if (state) *state = std::move(st);
  return v;
}

// ---------------------------------------------------------------------------
// Capsule plumbing ops

/// Regroups conv maps [M x H x W] into basic capsules [H*W*C x D] where map
/// m = c*D + d supplies component d of channel c; capsule index is
/// (y*W + x)*C + c.
inline ad::Var to_capsules(const ad::Var& maps, std::size_t capsule_dim) {
  const Shape& s = maps.shape();
  if (s.size() != 3 || s[0] % capsule_dim != 0) throw ShapeError("to_capsules: maps must be [C*D x H x W]");
  const std::size_t channels = s[0] / capsule_dim, h = s[1], w = s[2];
  const std::size_t n = h * w * channels;
  std::vector<std::size_t> src(n * capsule_dim);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t i = (y * w + x) * channels + c;
        for (std::size_t d = 0; d < capsule_dim; ++d) src[i * capsule_dim + d] = ((c * capsule_dim + d) * h + y) * w + x;
      }
    }
  }
  Tensor out(Shape{n, capsule_dim});
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = maps.value()[src[k]];
  return ad::detail::make_op(std::move(out), {maps}, [src = std::move(src)](ad::Node& self) {
    if (double* g = ad::detail::grad_of(self, 0)) {
      for (std::size_t k = 0; k < src.size(); ++k) g[src[k]] += self.grad[k];
    }
  });
}

/// u_hat_{j|i} = W_{c(i), j} u_i with c(i) = i mod C; u [N x D],
/// W [C x J x A x D] -> [N x J x A]. With C = channels the matrices are
/// shared across positions; with C = N each capsule has its own.
inline ad::Var capsule_predictions(const ad::Var& u, const ad::Var& transform) {
  const Shape& us = u.shape();
  const Shape& ws = transform.shape();
  if (us.size() != 2 || ws.size() != 4 || ws[3] != us[1] || us[0] % ws[0] != 0) {
    throw ShapeError("capsule_predictions: incompatible shapes " + shape_str(us) + " and " + shape_str(ws));
  }
  const std::size_t n = us[0], dd = us[1], cc = ws[0], jc = ws[1], a = ws[2];
  Tensor out(Shape{n, jc, a});
  const double* uv = u.value().data();
  const double* wv = transform.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % cc;
    for (std::size_t j = 0; j < jc; ++j) {
      const double* wm = wv + ((c * jc + j) * a) * dd;
      double* o = out.data() + (i * jc + j) * a;
      for (std::size_t r = 0; r < a; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < dd; ++k) acc += wm[r * dd + k] * uv[i * dd + k];
        o[r] = acc;
      }
    }
  }
  return ad::detail::make_op(std::move(out), {u, transform}, [n, dd, cc, jc, a](ad::Node& self) {
    const double* uv = self.inputs[0]->value.data();
    const double* wv = self.inputs[1]->value.data();
    double* gu = ad::detail::grad_of(self, 0);
    double* gw = ad::detail::grad_of(self, 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = i % cc;
      for (std::size_t j = 0; j < jc; ++j) {
        const std::size_t wbase = ((c * jc + j) * a) * dd;
        const double* up = self.grad.data() + (i * jc + j) * a;
        for (std::size_t r = 0; r < a; ++r) {
          if (up[r] == 0.0) continue;
          for (std::size_t k = 0; k < dd; ++k) {
            if (gw) gw[wbase + r * dd + k] += up[r] * uv[i * dd + k];
            if (gu) gu[i * dd + k] += up[r] * wv[wbase + r * dd + k];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Forward, loss, predict

inline void check_frame(const ModelConfig& c, const TrajectoryFrame& f) {
  if (f.window.size() != c.window_length) {
    throw ConfigError("frame window length " + std::to_string(f.window.size()) + " != model L=" +
                      std::to_string(c.window_length));
  }
  for (auto g : f.window) {
    if (g.value >= c.grid_count) throw ConfigError("frame grid index exceeds model G");
  }
}

/// Binary input image of a frame in the configured layout.
inline Tensor frame_tensor(const ModelConfig& c, const TrajectoryFrame& f) {
  check_frame(c, f);
  const std::size_t L = c.window_length;
  if (c.layout == FrameLayout::grid_by_window) {
    Tensor t(Shape{c.grid_count, L});
    for (std::size_t k = 0; k < L; ++k) t[f.window[k].value * L + k] = 1.0;
    return t;
  }
  Tensor t(Shape{L, c.grid_count});
  for (std::size_t k = 0; k < L; ++k) t[k * c.grid_count + f.window[k].value] = 1.0;
  return t;
}

struct ForwardOptions {
  ad::Mode mode = ad::Mode::infer;
  Rng* rng = nullptr;                       // dropout masks, train mode only
  const Tensor* coupling_override = nullptr;  // replaces routed couplings
};

struct ForwardResult {
  ad::Var scores;    // [G]
  ad::Var capsules;  // v [J x 2D]
  ad::Var basic;     // squashed u [N x D]
  RoutingState routing;
};

inline ForwardResult forward(const ParamLeaves& p, const ModelConfig& c, const TrajectoryFrame& frame,
                             const ForwardOptions& opt = {}) {
  ad::Var x = ad::constant(frame_tensor(c, frame));
  ad::Var maps = ad::conv2d_tanh(x, p.conv_kernels(), p.conv_bias(),
                                 {c.conv_stride.rows, c.conv_stride.cols});
  ad::Var caps_maps = ad::conv2d(maps, p.caps_kernels(), p.caps_bias(), {c.caps_stride.rows, c.caps_stride.cols});
  ForwardResult r;
  r.basic = ad::squash(to_capsules(caps_maps, c.capsule_dim));
  ad::Var u_hat = capsule_predictions(r.basic, p.transform());
  if (opt.coupling_override) {
    r.capsules = weighted_squash(u_hat, *opt.coupling_override);
  } else {
    r.capsules = route(u_hat, c.routing_iterations, &r.routing);
  }
  ad::Var flat = ad::reshape(r.capsules, Shape{r.capsules.size()});
  ad::Var hidden = ad::tanh(ad::linear(flat, p.hidden_weight(), p.hidden_bias()));
  if (opt.mode == ad::Mode::train && c.dropout > 0.0) {
    if (!opt.rng) throw ConfigError("train-mode forward needs an rng for dropout");
    hidden = ad::dropout(hidden, c.dropout, *opt.rng, ad::Mode::train);
  }
  r.scores = ad::linear(hidden, p.output_weight(), p.output_bias());
  return r;
}

inline ForwardResult forward(const ModelParams& params, const ModelConfig& c, const TrajectoryFrame& frame,
                             const ForwardOptions& opt = {}) {
  return forward(make_leaves(params, false), c, frame, opt);
}

/// Softmax cross-entropy of the scores against the label grid.
inline ad::Var loss(const ad::Var& scores, GridIndex label) { return ad::cross_entropy(scores, label.value); }

/// First index of the maximum.
inline GridIndex argmax(const Tensor& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return GridIndex{static_cast<std::uint32_t>(best)};
}

inline GridIndex predict(const ParamLeaves& p, const ModelConfig& c, const TrajectoryFrame& frame) {
  return argmax(forward(p, c, frame).scores.value());
}

inline GridIndex predict(const ModelParams& params, const ModelConfig& c, const TrajectoryFrame& frame) {
  return predict(make_leaves(params, false), c, frame);
}

/// Holds constant leaves so repeated predictions avoid copying weights.
class Predictor {
 public:
  Predictor(const ModelParams& params, ModelConfig config)
      : leaves_(make_leaves(params, false)), config_(std::move(config)) {}

  GridIndex operator()(const TrajectoryFrame& frame) const { return predict(leaves_, config_, frame); }
  const ModelConfig& config() const noexcept { return config_; }

 private:
  ParamLeaves leaves_;
  ModelConfig config_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> train_accuracy;       // percent, infer mode
  std::vector<double> validation_accuracy;  // percent
  std::size_t stopping_epoch = 0;
  std::size_t best_epoch = 0;
  std::uint64_t adam_steps = 0;
  double wall_seconds = 0.0;

  std::size_t epochs() const noexcept { return train_loss.size(); }
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

inline void check_compatible(const ModelConfig& c, const FrameSet& fs, const char* which) {
  if (fs.grid_spec.grid_count() != c.grid_count || fs.window_length != c.window_length) {
    throw ConfigError(std::string(which) + " frames have G=" + std::to_string(fs.grid_spec.grid_count()) +
                      ", L=" + std::to_string(fs.window_length) + " but the model expects G=" +
                      std::to_string(c.grid_count) + ", L=" + std::to_string(c.window_length));
  }
}

/// Percentage of frames whose prediction equals the label.
inline double percent_correct(const ParamLeaves& p, const ModelConfig& c, const FrameSet& fs) {
  if (fs.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& f : fs.frames) hit += predict(p, c, f) == f.label ? 1 : 0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(fs.size());
}

using EpochCallback = std::function<void(std::size_t epoch, const TrainReport&)>;

/// Mini-batch Adam with per-epoch validation and early stopping. Returns the
/// parameters of the best-validation epoch. Deterministic for a fixed seed.
inline TrainResult train(const DatasetSplit& split, const ModelConfig& c, const EpochCallback& on_epoch = {}) {
  validate(c);
  check_compatible(c, split.train, "train");
  check_compatible(c, split.validation, "validation");
  if (split.train.empty() || split.validation.empty()) throw DataError("train and validation sets must be non-empty");
  const auto t0 = std::chrono::steady_clock::now();

  Rng root(c.seed);
  Rng init_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);
  Rng dropout_rng = root.fork(3);

  ModelParams init = init_params(c, init_rng);
  ParamLeaves leaves = make_leaves(init, true);
  AdamState adam;
  adam.hyper.learning_rate = c.learning_rate;

  TrainResult result;
  result.params = init;
  double best_val = -1.0;
  std::size_t stale = 0;
  const std::size_t n = split.train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += c.batch_size) {
      const std::size_t stop = std::min(n, start + c.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      leaves.zero_grad();
      for (std::size_t k = start; k < stop; ++k) {
        const auto& frame = split.train.frames[order[k]];
        ForwardOptions opt{ad::Mode::train, &dropout_rng, nullptr};
        ad::Var l = loss(forward(leaves, c, frame, opt).scores, frame.label);
        const double lv = l.value().item();
        if (!std::isfinite(lv)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                                std::to_string(k));
        }
        loss_sum += lv;
        ad::backward(l, inv_b);
      }
      adam_step(leaves.vars, adam);
      for (const auto& v : leaves.vars) {
        if (!v.value().all_finite()) {
          throw DivergenceError("non-finite parameters after Adam step " + std::to_string(adam.step));
        }
      }
    }
    TrainReport& rep = result.report;
    rep.train_loss.push_back(loss_sum / static_cast<double>(n));
    rep.train_accuracy.push_back(percent_correct(leaves, c, split.train));
    rep.validation_accuracy.push_back(percent_correct(leaves, c, split.validation));
    rep.stopping_epoch = epoch;
    rep.adam_steps = adam.step;
    if (rep.validation_accuracy.back() > best_val) {
      best_val = rep.validation_accuracy.back();
      rep.best_epoch = epoch;
      result.params = snapshot(leaves);
      stale = 0;
    } else {
      ++stale;
    }
    if (on_epoch) on_epoch(epoch, rep);
    if (stale > c.patience) break;
  }
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string to_string(FrameLayout l) { return l == FrameLayout::grid_by_window ? "GxL" : "LxG"; }

inline std::string to_string(TransformSharing t) { return t == TransformSharing::per_channel ? "channel" : "capsule"; }

inline TransformSharing sharing_from_string(const std::string& s) {
  if (s == "channel") return TransformSharing::per_channel;
  if (s == "capsule") return TransformSharing::per_capsule;
  throw ConfigError("transform_sharing must be \"channel\" or \"capsule\", got \"" + s + "\"");
}

inline FrameLayout layout_from_string(const std::string& s) {
  if (s == "GxL") return FrameLayout::grid_by_window;
  if (s == "LxG") return FrameLayout::window_by_grid;
  throw ConfigError("frame layout must be \"GxL\" or \"LxG\", got \"" + s + "\"");
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  auto k2 = [](const Kernel2& k) { return nlohmann::json::array({k.rows, k.cols}); };
  return {{"G", c.grid_count},
          {"L", c.window_length},
          {"layout", to_string(c.layout)},
          {"filters", c.filters},
          {"conv_kernel", k2(c.conv_kernel)},
          {"conv_stride", k2(c.conv_stride)},
          {"capsule_dim", c.capsule_dim},
          {"caps_kernel", k2(c.caps_kernel)},
          {"caps_stride", k2(c.caps_stride)},
          {"advanced_count", c.advanced_count_override},
          {"transform_sharing", to_string(c.transform_sharing)},
          {"fc_width", c.fc_width},
          {"dropout", c.dropout},
          {"routing_iterations", c.routing_iterations},
          {"epochs", c.epochs},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed}};
}

/// Reads keys present in `j` over `base`; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  static const std::vector<std::string> known = {
      "G", "L", "layout", "filters", "conv_kernel", "conv_stride", "capsule_dim", "caps_kernel",
      "caps_stride", "advanced_count", "transform_sharing", "fc_width", "dropout", "routing_iterations", "epochs",
      "patience", "batch_size", "learning_rate", "seed"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  try {
    auto k2 = [](const nlohmann::json& v) {
      if (!v.is_array() || v.size() != 2) throw ConfigError("kernel/stride entries must be [rows, cols]");
      return Kernel2{v[0].get<std::size_t>(), v[1].get<std::size_t>()};
    };
    ModelConfig c = base;
    if (j.contains("G")) c.grid_count = j["G"].get<std::size_t>();
    if (j.contains("L")) c.window_length = j["L"].get<std::size_t>();
    if (j.contains("layout")) c.layout = layout_from_string(j["layout"].get<std::string>());
    if (j.contains("filters")) c.filters = j["filters"].get<std::size_t>();
    if (j.contains("conv_kernel")) c.conv_kernel = k2(j["conv_kernel"]);
    if (j.contains("conv_stride")) c.conv_stride = k2(j["conv_stride"]);
    if (j.contains("capsule_dim")) c.capsule_dim = j["capsule_dim"].get<std::size_t>();
    if (j.contains("caps_kernel")) c.caps_kernel = k2(j["caps_kernel"]);
    if (j.contains("caps_stride")) c.caps_stride = k2(j["caps_stride"]);
    if (j.contains("advanced_count")) c.advanced_count_override = j["advanced_count"].get<std::size_t>();
    if (j.contains("transform_sharing")) c.transform_sharing = sharing_from_string(j["transform_sharing"].get<std::string>());
    if (j.contains("fc_width")) c.fc_width = j["fc_width"].get<std::size_t>();
    if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
    if (j.contains("routing_iterations")) c.routing_iterations = j["routing_iterations"].get<std::size_t>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("patience")) c.patience = j["patience"].get<std::size_t>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
}

inline nlohmann::json split_policy_to_json(const SplitPolicy& p) {
  if (p.kind == SplitPolicy::Kind::by_fraction) {
    return {{"policy", "by_fraction"}, {"fraction", p.fraction}, {"val_fraction", p.val_fraction}};
  }
  return {{"policy", "by_time"},
          {"train_end", p.train_end},
          {"test_start", p.test_start},
          {"val_fraction", p.val_fraction}};
}

inline SplitPolicy split_policy_from_json(const nlohmann::json& j) {
  try {
    const std::string kind = j.value("policy", "by_fraction");
    const double val = j.value("val_fraction", 0.3);
    if (kind == "by_fraction") return SplitPolicy::by_fraction(j.value("fraction", 0.7), val);
    if (kind == "by_time") {
      return SplitPolicy::by_time(j.at("train_end").get<std::int64_t>(), j.at("test_start").get<std::int64_t>(), val);
    }
    throw ConfigError("split policy must be \"by_fraction\" or \"by_time\"");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid split policy: ") + e.what());
  }
}

/// A model checkpoint is self-describing: the parameter file's header embeds
/// the model config, the grid spec and the split policy used for training.
struct ModelCheckpoint {
  ModelConfig config;
  GridSpec grid_spec;
  SplitPolicy split_policy;
  ModelParams params;
};

inline Checkpoint to_checkpoint(const ModelCheckpoint& m) {
  Checkpoint ck;
  ck.seed = m.config.seed;
  ck.header = {{"kind", "capsnet"},
               {"model_config", model_config_to_json(m.config)},
               {"grid_spec", grid_spec_to_json(m.grid_spec)},
               {"split_policy", split_policy_to_json(m.split_policy)}};
  const auto tensors = m.params.all();
  for (std::size_t k = 0; k < ModelParams::kCount; ++k) ck.tensors.push_back({ModelParams::names()[k], *tensors[k]});
  return ck;
}

inline ModelCheckpoint from_checkpoint(const Checkpoint& ck) {
  if (!ck.header.contains("kind") || ck.header["kind"] != "capsnet") throw DataError("checkpoint is not a capsnet model");
  ModelCheckpoint m;
  m.config = model_config_from_json(ck.header.at("model_config"));
  validate(m.config);
  m.grid_spec = grid_spec_from_json(ck.header.at("grid_spec"));
  m.split_policy = split_policy_from_json(ck.header.at("split_policy"));
  if (m.grid_spec.grid_count() != m.config.grid_count) throw DataError("checkpoint grid spec disagrees with model G");
  const ModelParams shapes = zero_params(m.config);
  const auto expect = shapes.all();
  auto dst = m.params.all();
  for (std::size_t k = 0; k < ModelParams::kCount; ++k) {
    const Tensor& t = ck.at(ModelParams::names()[k]);
    if (t.shape() != expect[k]->shape()) {
      throw DataError(std::string("checkpoint tensor ") + ModelParams::names()[k] + " has shape " +
                      shape_str(t.shape()) + ", expected " + shape_str(expect[k]->shape()));
    }
    *dst[k] = t;
  }
  return m;
}

}  // namespace trajcaps
