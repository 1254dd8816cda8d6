#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "trajcaps/autodiff.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/tensor.hpp"

namespace trajcaps {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// One bias-corrected Adam update of `params` in place. Moment buffers are
/// created on the first call and must keep matching shapes afterwards.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
  if (state.first_moment.empty()) {
    for (const Tensor* p : params) {
      state.first_moment.push_back(Tensor::zeros_like(*p));
      state.second_moment.push_back(Tensor::zeros_like(*p));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state/params count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->shape() != grads[k]->shape() || params[k]->shape() != state.first_moment[k].shape()) {
      throw ShapeError("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
  }
  const AdamHyper& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

/// Adam over autodiff parameter leaves, reading their accumulated gradients.
inline void adam_step(std::span<ad::Var> params, AdamState& state) {
  std::vector<Tensor*> values;
  std::vector<const Tensor*> grads;
  values.reserve(params.size());
  grads.reserve(params.size());
  for (auto& p : params) {
    p.mutable_grad();
    values.push_back(&p.mutable_value());
    grads.push_back(&p.grad());
  }
  adam_step(values, grads, state);
}

}  // namespace trajcaps
