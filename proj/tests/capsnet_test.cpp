#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "gradcheck.hpp"
#include "trajcaps/capsnet.hpp"

using namespace trajcaps;
using trajcaps::testing::grad_check;
using trajcaps::testing::random_tensor;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.grid_count = 4;
  c.window_length = 2;
  c.filters = 8;
  c.capsule_dim = 4;
  c.conv_kernel = {1, 2};
  c.conv_stride = {1, 1};
  c.caps_kernel = {1, 1};
  c.caps_stride = {1, 1};
  c.fc_width = 6;
  c.dropout = 0.0;
  return c;
}

TrajectoryFrame frame_of(std::vector<std::uint32_t> window, std::uint32_t label, std::int64_t t = 0) {
  TrajectoryFrame f;
  for (auto g : window) f.window.push_back(GridIndex{g});
  f.label = GridIndex{label};
  f.frame_time = t;
  f.vehicle_id = "v";
  f.trip_id = "t";
  return f;
}

ModelParams random_params(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams p = init_params(c, rng);
  for (Tensor* t : p.all()) {
    for (double& v : t->values()) v += rng.uniform(-0.3, 0.3);
  }
  return p;
}

FrameSet frame_set(const ModelConfig& c, std::vector<TrajectoryFrame> frames) {
  FrameSet fs;
  fs.grid_spec = build_grid_spec({0, 1, 0, 1}, static_cast<std::uint32_t>(c.grid_count), 1);
  fs.window_length = static_cast<std::uint32_t>(c.window_length);
  fs.frames = std::move(frames);
  return fs;
}

FrameSet synthetic_frames(const ModelConfig& c, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrajectoryFrame> frames;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint32_t> w;
    for (std::size_t k = 0; k < c.window_length; ++k) w.push_back(static_cast<std::uint32_t>(rng.below(c.grid_count)));
    // Label follows the last grid most of the time.
    const auto label = rng.uniform() < 0.8 ? w.back() : static_cast<std::uint32_t>(rng.below(c.grid_count));
    frames.push_back(frame_of(w, label, static_cast<std::int64_t>(i)));
  }
  return frame_set(c, std::move(frames));
}

double squash_norm(double n) { return n * n / (1.0 + n * n); }

// Plain re-implementation of routing by agreement over nested vectors.
using Vec = std::vector<double>;
std::vector<Vec> reference_route(const std::vector<std::vector<Vec>>& u_hat, std::size_t iterations,
                                 std::vector<Vec>* coupling_out) {
  const std::size_t n = u_hat.size(), jc = u_hat[0].size(), a = u_hat[0][0].size();
  std::vector<Vec> b(n, Vec(jc, 0.0)), c(n, Vec(jc, 0.0)), v(jc, Vec(a, 0.0));
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double mx = b[i][0];
      for (double x : b[i]) mx = std::max(mx, x);
      double z = 0.0;
      for (std::size_t j = 0; j < jc; ++j) z += std::exp(b[i][j] - mx);
      for (std::size_t j = 0; j < jc; ++j) c[i][j] = std::exp(b[i][j] - mx) / z;
    }
    for (std::size_t j = 0; j < jc; ++j) {
      Vec s(a, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < a; ++k) s[k] += c[i][j] * u_hat[i][j][k];
      }
      double sq = 0.0;
      for (double x : s) sq += x * x;
      const double factor = sq == 0.0 ? 0.0 : sq / (1.0 + sq) / std::sqrt(sq);
      for (std::size_t k = 0; k < a; ++k) v[j][k] = factor * s[k];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < jc; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < a; ++k) dot += u_hat[i][j][k] * v[j][k];
        b[i][j] += dot;
      }
    }
  }
  if (coupling_out) *coupling_out = c;
  return v;
}

Tensor pack(const std::vector<std::vector<Vec>>& u_hat) {
  const std::size_t n = u_hat.size(), jc = u_hat[0].size(), a = u_hat[0][0].size();
  Tensor t(Shape{n, jc, a});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < jc; ++j)
      for (std::size_t k = 0; k < a; ++k) t[(i * jc + j) * a + k] = u_hat[i][j][k];
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(DependentParams, Examples) {
  EXPECT_EQ(derive_dependent_params(80, 4, 16), (DependentParams{20, 8, 16}));
  EXPECT_EQ(derive_dependent_params(32, 4, 100), (DependentParams{8, 8, 100}));
  EXPECT_EQ(derive_dependent_params(4, 4, 1), (DependentParams{1, 8, 1}));
}

TEST(DependentParams, Errors) {
  EXPECT_THROW(derive_dependent_params(6, 4, 16), ConfigError);
  EXPECT_THROW(derive_dependent_params(0, 4, 16), ConfigError);
  EXPECT_THROW(derive_dependent_params(8, 0, 16), ConfigError);
  EXPECT_THROW(derive_dependent_params(8, 4, 0), ConfigError);
}

TEST(ModelConfig, AdvancedCountOverride) {
  ModelConfig c;
  c.grid_count = 100;
  c.filters = 32;
  EXPECT_EQ(c.advanced_count(), 100u);
  c.advanced_count_override = 32;
  EXPECT_EQ(c.advanced_count(), 32u);
  EXPECT_EQ(zero_params(c).transform.shape(), (Shape{8, 32, 8, 4}));
}

TEST(ModelConfig, ValidateRejectsBadValues) {
  ModelConfig c = toy_config();
  EXPECT_NO_THROW(validate(c));
  auto bad = [&](auto mutate) {
    ModelConfig x = c;
    mutate(x);
    EXPECT_THROW(validate(x), ConfigError);
  };
  bad([](ModelConfig& x) { x.routing_iterations = 0; });
  bad([](ModelConfig& x) { x.dropout = 1.0; });
  bad([](ModelConfig& x) { x.epochs = 0; });
  bad([](ModelConfig& x) { x.batch_size = 0; });
  bad([](ModelConfig& x) { x.learning_rate = 0; });
  bad([](ModelConfig& x) { x.filters = 6; });
  bad([](ModelConfig& x) { x.conv_kernel = {1, 3}; });
  bad([](ModelConfig& x) { x.caps_kernel = {5, 1}; });
  bad([](ModelConfig& x) { x.conv_stride = {0, 1}; });
}

TEST(Geometry, PortoShapeWalk) {
  ModelConfig c;
  c.grid_count = 16;
  c.window_length = 19;
  const ModelGeometry g = geometry(c);
  EXPECT_EQ(g.conv_rows, 16u);
  EXPECT_EQ(g.conv_cols, 9u);
  EXPECT_EQ(g.caps_rows, 16u);
  EXPECT_EQ(g.caps_cols, 2u);
  EXPECT_EQ(c.basic_channels(), 20u);
  EXPECT_EQ(g.basic_capsules, 640u);

  const ForwardResult r = forward(zero_params(c), c, frame_of(std::vector<std::uint32_t>(19, 3), 3));
  EXPECT_EQ(r.basic.shape(), (Shape{640, 4}));
  EXPECT_EQ(r.capsules.shape(), (Shape{16, 8}));
  EXPECT_EQ(r.scores.shape(), (Shape{16}));
}

TEST(Geometry, TransposedLayout) {
  ModelConfig c;
  c.grid_count = 100;
  c.window_length = 10;
  c.layout = FrameLayout::window_by_grid;
  c.filters = 32;
  c.conv_kernel = {1, 100};
  c.conv_stride = {1, 1};
  c.caps_kernel = {2, 1};
  const ModelGeometry g = geometry(c);
  EXPECT_EQ(g.input_rows, 10u);
  EXPECT_EQ(g.input_cols, 100u);
  EXPECT_EQ(g.conv_rows, 10u);
  EXPECT_EQ(g.conv_cols, 1u);
  EXPECT_EQ(g.caps_rows, 9u);
  EXPECT_EQ(g.basic_capsules, 72u);
}

TEST(FrameTensor, OneHotColumns) {
  ModelConfig c = toy_config();
  const Tensor t = frame_tensor(c, frame_of({1, 3}, 0));
  EXPECT_EQ(t.shape(), (Shape{4, 2}));
  const auto m = frame_of({1, 3}, 0).history_matrix(4);
  for (std::size_t k = 0; k < m.size(); ++k) EXPECT_EQ(t[k], m[k]);
  c.layout = FrameLayout::window_by_grid;
  const Tensor u = frame_tensor(c, frame_of({1, 3}, 0));
  EXPECT_EQ(u.shape(), (Shape{2, 4}));
  EXPECT_EQ(u[1], 1.0);
  EXPECT_EQ(u[4 + 3], 1.0);
  EXPECT_DOUBLE_EQ(std::accumulate(u.values().begin(), u.values().end(), 0.0), 2.0);
}

TEST(FrameTensor, RejectsMismatchedFrames) {
  const ModelConfig c = toy_config();
  EXPECT_THROW(frame_tensor(c, frame_of({1, 2, 3}, 0)), ConfigError);
  EXPECT_THROW(frame_tensor(c, frame_of({1, 4}, 0)), ConfigError);
}

TEST(Forward, ToySingleChannel) {
  ModelConfig c;
  c.grid_count = 2;
  c.window_length = 1;
  c.filters = 4;
  c.capsule_dim = 4;
  c.conv_kernel = {1, 1};
  c.conv_stride = {1, 1};
  c.caps_kernel = {1, 1};
  c.fc_width = 3;
  EXPECT_EQ(c.basic_channels(), 1u);
  const ForwardResult r = forward(random_params(c, 1), c, frame_of({1}, 0));
  EXPECT_EQ(r.scores.shape(), (Shape{2}));
  EXPECT_EQ(r.capsules.shape(), (Shape{2, 8}));
}

TEST(Forward, ZeroParamsGiveEqualScores) {
  const ModelConfig c = toy_config();
  const ForwardResult r = forward(zero_params(c), c, frame_of({2, 1}, 0));
  for (double s : r.scores.value().values()) EXPECT_EQ(s, r.scores.value()[0]);
  EXPECT_EQ(predict(zero_params(c), c, frame_of({2, 1}, 3)).value, 0u);
}

TEST(Forward, InferModeIsDeterministicAndTrainNeedsRng) {
  ModelConfig c = toy_config();
  c.dropout = 0.5;
  const ModelParams p = random_params(c, 2);
  const auto f = frame_of({0, 3}, 1);
  EXPECT_EQ(forward(p, c, f).scores.value(), forward(p, c, f).scores.value());
  EXPECT_THROW(forward(p, c, f, {ad::Mode::train, nullptr, nullptr}), ConfigError);
  Rng a(5), b(5);
  EXPECT_EQ(forward(p, c, f, {ad::Mode::train, &a, nullptr}).scores.value(),
            forward(p, c, f, {ad::Mode::train, &b, nullptr}).scores.value());
}

TEST(Forward, BasicCapsulesAreSquashed) {
  const ModelConfig c = toy_config();
  const ForwardResult r = forward(random_params(c, 3), c, frame_of({3, 0}, 1));
  const Tensor& u = r.basic.value();
  for (std::size_t i = 0; i < u.dim(0); ++i) {
    double sq = 0.0;
    for (std::size_t k = 0; k < u.dim(1); ++k) sq += u[i * u.dim(1) + k] * u[i * u.dim(1) + k];
    EXPECT_LT(std::sqrt(sq), 1.0);
  }
}

TEST(ToCapsules, RegroupsChannelMajorMaps) {
  // maps [C*D x H x W] with C=2, D=2, H=1, W=3; value encodes (map, x).
  Tensor maps(Shape{4, 1, 3});
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t x = 0; x < 3; ++x) maps[m * 3 + x] = 10.0 * m + x;
  const Tensor caps = to_capsules(ad::constant(maps), 2).value();
  ASSERT_EQ(caps.shape(), (Shape{6, 2}));
  for (std::size_t x = 0; x < 3; ++x) {
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t i = x * 2 + c;
      for (std::size_t d = 0; d < 2; ++d) EXPECT_EQ(caps[i * 2 + d], 10.0 * (c * 2 + d) + x);
    }
  }
}

TEST(CapsulePredictions, MatchesPerCapsuleMatrixProduct) {
  Rng rng(4);
  const Tensor u = random_tensor(Shape{6, 3}, rng);
  const Tensor w = random_tensor(Shape{2, 4, 5, 3}, rng);
  const Tensor out = capsule_predictions(ad::constant(u), ad::constant(w)).value();
  ASSERT_EQ(out.shape(), (Shape{6, 4, 5}));
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t r = 0; r < 5; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 3; ++k) acc += w[(((i % 2) * 4 + j) * 5 + r) * 3 + k] * u[i * 3 + k];
        EXPECT_NEAR(out[(i * 4 + j) * 5 + r], acc, 1e-14);
      }
  EXPECT_THROW(capsule_predictions(ad::constant(Tensor(Shape{5, 3})), ad::constant(w)), ShapeError);
}

// ---------------------------------------------------------------------------
// Routing

TEST(Route, SingleCapsuleIsSquash) {
  const Tensor u(Shape{1, 1, 3}, {0.3, -1.2, 2.0});
  for (std::size_t it : {1u, 3u, 7u}) {
    const RoutingState st = route_values(u, it);
    const Tensor& v = st.output_history.back();
    const double n = std::sqrt(0.09 + 1.44 + 4.0);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(v[k], squash_norm(n) * u[k] / n, 1e-15);
    EXPECT_EQ(st.coupling[0], 1.0);
  }
}

TEST(Route, IdenticalInputsShareCoupling) {
  const Tensor u(Shape{2, 1, 2}, {0.7, 0.1, 0.7, 0.1});
  const RoutingState st = route_values(u, 3);
  for (const Tensor& c : st.coupling_history) EXPECT_EQ(c[0], c[1]);
  const Tensor& s = st.input_history.back();
  EXPECT_NEAR(s[0], 0.7 * (st.coupling[0] + st.coupling[1]), 1e-15);
}

TEST(Route, ThreeCapsuleReference) {
  const std::vector<std::vector<Vec>> u_hat = {
      {{0.5, -0.2}, {0.1, 0.9}},
      {{0.4, 0.3}, {-0.6, 0.2}},
      {{-0.1, 0.8}, {0.7, -0.5}},
  };
  std::vector<Vec> c_ref;
  const auto v_ref = reference_route(u_hat, 3, &c_ref);
  const RoutingState st = route_values(pack(u_hat), 3);
  const Tensor& v = st.output_history.back();
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(v[j * 2 + k], v_ref[j][k], 1e-12);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(st.coupling[i * 2 + j], c_ref[i][j], 1e-12);
  ad::Var routed = route(ad::constant(pack(u_hat)), 3);
  EXPECT_EQ(routed.value(), v);
}

TEST(Route, CouplingRowsSumToOneAndOutputsAreShort) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(12), jc = 1 + rng.below(6), a = 1 + rng.below(8);
    const Tensor u = random_tensor(Shape{n, jc, a}, rng, -3, 3);
    const RoutingState st = route_values(u, 1 + rng.below(5));
    for (const Tensor& c : st.coupling_history) {
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < jc; ++j) sum += c[i * jc + j];
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
    for (const Tensor& v : st.output_history) {
      for (std::size_t j = 0; j < jc; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < a; ++k) sq += v[j * a + k] * v[j * a + k];
        EXPECT_LT(std::sqrt(sq), 1.0);
      }
    }
    EXPECT_TRUE(st.logits.all_finite());
  }
}

TEST(Route, OneIterationIsSquashOfMean) {
  Rng rng(10);
  const std::size_t n = 5, jc = 3, a = 4;
  const Tensor u = random_tensor(Shape{n, jc, a}, rng);
  const RoutingState st = route_values(u, 1);
  for (double c : st.coupling.values()) EXPECT_EQ(c, 1.0 / 3.0);
  for (std::size_t j = 0; j < jc; ++j) {
    Vec s(a, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < a; ++k) s[k] += u[(i * jc + j) * a + k] / 3.0;
    double sq = 0.0;
    for (double x : s) sq += x * x;
    for (std::size_t k = 0; k < a; ++k) {
      EXPECT_NEAR(st.output_history[0][j * a + k], sq / (1 + sq) * s[k] / std::sqrt(sq), 1e-14);
    }
  }
}

TEST(Route, RejectsBadInput) {
  EXPECT_THROW(route_values(Tensor(Shape{2, 2}), 3), ShapeError);
  EXPECT_THROW(route_values(Tensor(Shape{2, 2, 2}), 0), ConfigError);
}

// ---------------------------------------------------------------------------
// Loss and prediction

TEST(Loss, Examples) {
  EXPECT_NEAR(loss(ad::constant(Tensor(Shape{16})), GridIndex{5}).value().item(), std::log(16.0), 1e-12);
  EXPECT_NEAR(loss(ad::constant(Tensor(Shape{2}, {1, 0})), GridIndex{0}).value().item(), 0.3133, 5e-5);
  EXPECT_NEAR(loss(ad::constant(Tensor(Shape{2}, {1, 0})), GridIndex{0}).value().item(),
              -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-14);
  EXPECT_LT(loss(ad::constant(Tensor(Shape{3}, {0, 800, 0})), GridIndex{1}).value().item(), 1e-300);
}

TEST(Predict, ArgmaxTieBreaksLow) {
  EXPECT_EQ(argmax(Tensor(Shape{4}, {1, 3, 3, 2})).value, 1u);
  EXPECT_EQ(argmax(Tensor(Shape{3}, {0, 0, 0})).value, 0u);
}

TEST(Predict, InvariantToOutputBiasShift) {
  const ModelConfig c = toy_config();
  ModelParams p = random_params(c, 6);
  ModelParams shifted = p;
  for (double& b : shifted.output_bias.values()) b += 7.25;
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const auto f = frame_of({static_cast<std::uint32_t>(rng.below(4)), static_cast<std::uint32_t>(rng.below(4))}, 0);
    EXPECT_EQ(predict(p, c, f), predict(shifted, c, f));
  }
}

TEST(Predict, PredictorMatchesFreeFunction) {
  const ModelConfig c = toy_config();
  const ModelParams p = random_params(c, 8);
  const Predictor pred(p, c);
  for (std::uint32_t a = 0; a < 4; ++a)
    for (std::uint32_t b = 0; b < 4; ++b) EXPECT_EQ(pred(frame_of({a, b}, 0)), predict(p, c, frame_of({a, b}, 0)));
}

// ---------------------------------------------------------------------------
// Gradients

TEST(Gradient, EndToEndSingleIteration) {
  ModelConfig c = toy_config();
  c.routing_iterations = 1;
  ParamLeaves leaves = make_leaves(random_params(c, 11), true);
  std::vector<ad::Var> vars(leaves.vars.begin(), leaves.vars.end());
  const std::vector<std::string> names(ModelParams::names().begin(), ModelParams::names().end());
  const auto f = frame_of({1, 3}, 2);
  const auto r = grad_check(vars, [&] { return loss(forward(leaves, c, f).scores, f.label); }, names);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_EQ(r.checked, [&] {
    std::size_t n = 0;
    for (const auto& v : vars) n += v.size();
    return n;
  }());
}

TEST(Gradient, EndToEndFrozenCouplings) {
  const ModelConfig c = toy_config();
  ParamLeaves leaves = make_leaves(random_params(c, 12), true);
  std::vector<ad::Var> vars(leaves.vars.begin(), leaves.vars.end());
  const auto f = frame_of({0, 2}, 3);
  const ForwardResult routed = forward(leaves, c, f);
  const Tensor coupling = routed.routing.coupling;
  ASSERT_EQ(coupling.shape(), (Shape{routed.routing.inputs, c.advanced_count()}));
  ForwardOptions frozen;
  frozen.coupling_override = &coupling;
  EXPECT_EQ(forward(leaves, c, f, frozen).scores.value(), routed.scores.value());

  leaves.zero_grad();
  ad::backward(loss(routed.scores, f.label));
  std::vector<Tensor> routed_grads;
  for (const auto& v : vars) routed_grads.push_back(v.grad());

  const auto r = grad_check(vars, [&] { return loss(forward(leaves, c, f, frozen).scores, f.label); });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  for (std::size_t k = 0; k < vars.size(); ++k) EXPECT_EQ(vars[k].grad(), routed_grads[k]);
}

TEST(Gradient, PermutationConsistency) {
  const ModelConfig c = toy_config();
  const ModelParams p = random_params(c, 13);
  const std::vector<std::uint32_t> perm = {2, 0, 3, 1};
  ModelParams q = p;
  for (std::size_t g = 0; g < 4; ++g) {
    for (std::size_t h = 0; h < c.fc_width; ++h) q.output_weight[perm[g] * c.fc_width + h] = p.output_weight[g * c.fc_width + h];
    q.output_bias[perm[g]] = p.output_bias[g];
  }
  Rng rng(14);
  for (int i = 0; i < 30; ++i) {
    const std::uint32_t a = static_cast<std::uint32_t>(rng.below(4)), b = static_cast<std::uint32_t>(rng.below(4));
    const std::uint32_t y = static_cast<std::uint32_t>(rng.below(4));
    const double base = loss(forward(p, c, frame_of({a, b}, y)).scores, GridIndex{y}).value().item();
    const double moved =
        loss(forward(q, c, frame_of({perm[a], perm[b]}, perm[y])).scores, GridIndex{perm[y]}).value().item();
    EXPECT_NEAR(base, moved, 1e-9);
  }
}

TEST(TransformSharing, ShapeFollowsMode) {
  ModelConfig c = toy_config();
  EXPECT_EQ(zero_params(c).transform.shape(), (Shape{2, 4, 8, 4}));
  c.transform_sharing = TransformSharing::per_capsule;
  EXPECT_EQ(zero_params(c).transform.shape(), (Shape{geometry(c).basic_capsules, 4, 8, 4}));
  EXPECT_EQ(geometry(c).basic_capsules, 8u);
}

TEST(TransformSharing, ChannelModeIsBlindToRowPermutation) {
  const std::vector<std::uint32_t> perm = {2, 0, 3, 1};
  for (const auto mode : {TransformSharing::per_channel, TransformSharing::per_capsule}) {
    ModelConfig c = toy_config();
    c.transform_sharing = mode;
    const ModelParams p = random_params(c, 21);
    const Tensor a = forward(p, c, frame_of({1, 3}, 0)).capsules.value();
    const Tensor b = forward(p, c, frame_of({perm[1], perm[3]}, 0)).capsules.value();
    double diff = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) diff = std::max(diff, std::abs(a[k] - b[k]));
    if (mode == TransformSharing::per_channel) {
      EXPECT_LT(diff, 1e-12);
    } else {
      EXPECT_GT(diff, 1e-6);
    }
  }
}

TEST(TransformSharing, GradientPerCapsule) {
  ModelConfig c = toy_config();
  c.transform_sharing = TransformSharing::per_capsule;
  c.routing_iterations = 1;
  ParamLeaves leaves = make_leaves(random_params(c, 22), true);
  std::vector<ad::Var> vars(leaves.vars.begin(), leaves.vars.end());
  const std::vector<std::string> names(ModelParams::names().begin(), ModelParams::names().end());
  const auto f = frame_of({0, 2}, 1);
  const auto r = grad_check(vars, [&] { return loss(forward(leaves, c, f).scores, f.label); }, names);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(TransformSharing, LearnsPositionDependentMapping) {
  ModelConfig c = toy_config();
  c.transform_sharing = TransformSharing::per_capsule;
  c.epochs = 150;
  c.patience = 150;
  c.batch_size = 4;
  c.learning_rate = 0.01;
  const std::vector<std::uint32_t> perm = {2, 0, 3, 1};
  std::vector<TrajectoryFrame> frames;
  for (std::uint32_t g = 0; g < 4; ++g) frames.push_back(frame_of({g, g}, perm[g]));
  const FrameSet fs = frame_set(c, frames);
  const TrainResult r = train(DatasetSplit{fs, fs, {}, {}}, c);
  for (const auto& f : frames) EXPECT_EQ(predict(r.params, c, f).value, f.label.value);
}

// ---------------------------------------------------------------------------
// Training

TEST(Train, OneEpochOneBatchIsOneAdamStep) {
  ModelConfig c = toy_config();
  c.epochs = 1;
  c.batch_size = 64;
  const FrameSet fs = synthetic_frames(c, 30, 1);
  DatasetSplit split{detail::subset(fs, {fs.frames.begin(), fs.frames.begin() + 20}),
                     detail::subset(fs, {fs.frames.begin() + 20, fs.frames.end()}), {}, {}};
  const TrainResult r = train(split, c);
  EXPECT_EQ(r.report.adam_steps, 1u);
  EXPECT_EQ(r.report.epochs(), 1u);
  EXPECT_EQ(r.report.train_accuracy.size(), 1u);
  EXPECT_EQ(r.report.validation_accuracy.size(), 1u);
  EXPECT_EQ(r.report.stopping_epoch, 1u);
}

TEST(Train, StepsPerEpochFollowBatchSize) {
  ModelConfig c = toy_config();
  c.epochs = 3;
  c.patience = 10;
  c.batch_size = 8;
  const FrameSet fs = synthetic_frames(c, 30, 2);
  DatasetSplit split{detail::subset(fs, {fs.frames.begin(), fs.frames.begin() + 20}),
                     detail::subset(fs, {fs.frames.begin() + 20, fs.frames.end()}), {}, {}};
  EXPECT_EQ(train(split, c).report.adam_steps, 9u);
}

TEST(Train, PatienceZeroStopsAtFirstNonImprovement) {
  ModelConfig c = toy_config();
  c.epochs = 40;
  c.patience = 0;
  c.batch_size = 4;
  const FrameSet fs = synthetic_frames(c, 60, 3);
  DatasetSplit split{detail::subset(fs, {fs.frames.begin(), fs.frames.begin() + 40}),
                     detail::subset(fs, {fs.frames.begin() + 40, fs.frames.end()}), {}, {}};
  const TrainReport rep = train(split, c).report;
  const auto& val = rep.validation_accuracy;
  ASSERT_GE(val.size(), 1u);
  for (std::size_t e = 1; e + 1 < val.size(); ++e) EXPECT_GT(val[e], val[e - 1]);
  if (rep.stopping_epoch < c.epochs) {
    EXPECT_LE(val.back(), val[val.size() - 2]);
  }
  EXPECT_EQ(rep.best_epoch + (rep.stopping_epoch < c.epochs ? 1 : 0), rep.stopping_epoch);
}

TEST(Train, ReturnsBestValidationParams) {
  ModelConfig c = toy_config();
  c.epochs = 12;
  c.patience = 3;
  c.batch_size = 8;
  const FrameSet fs = synthetic_frames(c, 80, 4);
  DatasetSplit split{detail::subset(fs, {fs.frames.begin(), fs.frames.begin() + 60}),
                     detail::subset(fs, {fs.frames.begin() + 60, fs.frames.end()}), {}, {}};
  std::size_t calls = 0;
  const TrainResult r = train(split, c, [&](std::size_t epoch, const TrainReport& rep) {
    ++calls;
    EXPECT_EQ(rep.epochs(), epoch);
  });
  EXPECT_EQ(calls, r.report.epochs());
  const auto& val = r.report.validation_accuracy;
  EXPECT_EQ(val[r.report.best_epoch - 1], *std::max_element(val.begin(), val.end()));
  const ParamLeaves leaves = make_leaves(r.params, false);
  EXPECT_DOUBLE_EQ(percent_correct(leaves, c, split.validation), val[r.report.best_epoch - 1]);
  EXPECT_EQ(r.report.train_loss.size(), r.report.epochs());
}

TEST(Train, Deterministic) {
  ModelConfig c = toy_config();
  c.epochs = 4;
  c.batch_size = 8;
  c.dropout = 0.3;
  c.seed = 21;
  const FrameSet fs = synthetic_frames(c, 50, 5);
  DatasetSplit split{detail::subset(fs, {fs.frames.begin(), fs.frames.begin() + 35}),
                     detail::subset(fs, {fs.frames.begin() + 35, fs.frames.end()}), {}, {}};
  const TrainResult a = train(split, c), b = train(split, c);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.report.train_loss, b.report.train_loss);
  EXPECT_EQ(a.report.validation_accuracy, b.report.validation_accuracy);
  c.seed = 22;
  EXPECT_NE(train(split, c).params, a.params);
}

TEST(Train, OverfitsRepeatedFrame) {
  ModelConfig c = toy_config();
  c.epochs = 30;
  c.patience = 30;
  c.batch_size = 4;
  const auto f = frame_of({1, 1}, 3);
  const FrameSet fs = frame_set(c, std::vector<TrajectoryFrame>(8, f));
  DatasetSplit split{fs, fs, {}, {}};
  const TrainResult r = train(split, c);
  EXPECT_EQ(predict(r.params, c, f).value, 3u);
  EXPECT_LT(r.report.train_loss.back(), r.report.train_loss.front());
}

TEST(Train, RejectsIncompatibleOrEmptySplit) {
  const ModelConfig c = toy_config();
  const FrameSet fs = synthetic_frames(c, 10, 6);
  EXPECT_THROW(train(DatasetSplit{fs, FrameSet{{}, fs.grid_spec, fs.window_length}, {}, {}}, c), DataError);
  ModelConfig other = c;
  other.window_length = 3;
  other.conv_kernel = {1, 1};
  EXPECT_THROW(train(DatasetSplit{fs, fs, {}, {}}, other), ConfigError);
}

TEST(Train, DivergenceIsReported) {
  ModelConfig c = toy_config();
  c.learning_rate = std::numeric_limits<double>::max();
  c.epochs = 3;
  const FrameSet fs = synthetic_frames(c, 10, 7);
  EXPECT_THROW(train(DatasetSplit{fs, fs, {}, {}}, c), DivergenceError);
}

// ---------------------------------------------------------------------------
// Serialization

TEST(ModelConfigJson, RoundTrip) {
  ModelConfig c = toy_config();
  c.layout = FrameLayout::window_by_grid;
  c.advanced_count_override = 7;
  c.transform_sharing = TransformSharing::per_capsule;
  c.learning_rate = 3.5e-4;
  c.seed = 99;
  EXPECT_EQ(model_config_from_json(model_config_to_json(c)), c);
}

TEST(ModelConfigJson, RejectsUnknownAndMalformed) {
  EXPECT_THROW(model_config_from_json({{"filterz", 8}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"conv_kernel", {1, 2, 3}}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"layout", "GL"}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"transform_sharing", "position"}}), ConfigError);
  EXPECT_THROW(model_config_from_json({{"epochs", "many"}}), ConfigError);
  EXPECT_THROW(model_config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(SplitPolicyJson, RoundTrip) {
  const SplitPolicy t = split_policy_from_json(split_policy_to_json(SplitPolicy::by_time(100, 200, 0.25)));
  EXPECT_EQ(t.kind, SplitPolicy::Kind::by_time);
  EXPECT_EQ(t.train_end, 100);
  EXPECT_EQ(t.test_start, 200);
  EXPECT_EQ(t.val_fraction, 0.25);
  const SplitPolicy f = split_policy_from_json(split_policy_to_json(SplitPolicy::by_fraction(0.6, 0.2)));
  EXPECT_EQ(f.kind, SplitPolicy::Kind::by_fraction);
  EXPECT_EQ(f.fraction, 0.6);
  EXPECT_THROW(split_policy_from_json({{"policy", "random"}}), ConfigError);
}

TEST(ModelCheckpoint, RoundTripThroughBytes) {
  const ModelConfig c = toy_config();
  const ModelCheckpoint m{c, build_grid_spec({-8.7, -8.5, 41.1, 41.2}, 2, 2), SplitPolicy::by_fraction(0.8, 0.1),
                          random_params(c, 15)};
  std::stringstream ss;
  write_checkpoint(ss, to_checkpoint(m));
  const ModelCheckpoint back = from_checkpoint(read_checkpoint(ss));
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.grid_spec.grid_count(), 4u);
  EXPECT_EQ(back.split_policy.fraction, 0.8);
}

TEST(ModelCheckpoint, RejectsMismatchedShapesAndGrid) {
  const ModelConfig c = toy_config();
  ModelCheckpoint m{c, build_grid_spec({0, 1, 0, 1}, 2, 2), {}, random_params(c, 16)};
  Checkpoint ck = to_checkpoint(m);
  ck.tensors[0].tensor = Tensor(Shape{3});
  EXPECT_THROW(from_checkpoint(ck), DataError);
  m.grid_spec = build_grid_spec({0, 1, 0, 1}, 3, 1);
  EXPECT_THROW(from_checkpoint(to_checkpoint(m)), DataError);
  Checkpoint other = to_checkpoint(ModelCheckpoint{c, build_grid_spec({0, 1, 0, 1}, 2, 2), {}, random_params(c, 16)});
  other.header["kind"] = "other";
  EXPECT_THROW(from_checkpoint(other), DataError);
}
