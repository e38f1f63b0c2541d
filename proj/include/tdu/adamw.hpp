#pragma once

#include <cmath>
#include <string>

#include "tdu/tensor.hpp"

namespace tdu {

struct AdamWConfig {
  double lr = 8e-5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// First/second moment buffers plus the per-parameter step count.
template <typename T>
struct AdamWState {
  Tensor<T> m;
  Tensor<T> v;
  long long t = 0;

  static AdamWState<T> for_param(const Tensor<T>& param) {
    AdamWState<T> s;
    s.m = Tensor<T>::zeros(param.shape);
    s.v = Tensor<T>::zeros(param.shape);
    return s;
  }
};

// One decoupled-weight-decay Adam update:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   param <- param - lr * ( mhat / (sqrt(vhat) + eps) + wd * param )
// Bias correction uses the state's own step count so freshly created
// parameters warm up independently.
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, AdamWState<T>& state,
                const AdamWConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(state.m)) {
    throw ShapeError("adamw_step: param " + shape_str(param.shape) + ", grad " +
                     shape_str(grad.shape) + ", state " + shape_str(state.m.shape));
  }
  state.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = static_cast<double>(grad.data[i]);
    double m = b1 * static_cast<double>(state.m.data[i]) + (1.0 - b1) * g;
    double v = b2 * static_cast<double>(state.v.data[i]) + (1.0 - b2) * g * g;
    state.m.data[i] = static_cast<T>(m);
    state.v.data[i] = static_cast<T>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    const double p = static_cast<double>(param.data[i]);
    param.data[i] = static_cast<T>(
        p - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p));
  }
  check_finite("adamw_step", param);
}

}  // namespace tdu
