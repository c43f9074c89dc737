#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dpc/common.hpp"

namespace dpc {

/// Adam with decoupled weight decay: w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0005;
};

template <typename T>
struct AdamState {
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
  std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(const std::vector<const Matrix<T>*>& params) {
  AdamState<T> s;
  for (const auto* p : params) {
    s.m.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix<T>::Zero(p->rows(), p->cols()));
  }
  return s;
}

template <typename T>
void adam_update(const std::vector<Matrix<T>*>& params, const std::vector<Matrix<T>>& grads, AdamState<T>& state,
                 const AdamOptions& opt, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeMismatch("optimizer: parameter, gradient and state counts differ");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = T(opt.beta1), b2 = T(opt.beta2);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T decay = T(1.0 - lr * opt.weight_decay);
  const T eps = T(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw ShapeMismatch("optimizer: gradient shape mismatch");
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g.cwiseProduct(g);
    p *= decay;
    p.array() -= step_size * state.m[i].array() / (state.v[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

}  // namespace dpc
