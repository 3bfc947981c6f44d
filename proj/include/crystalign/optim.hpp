#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "crystalign/tensor.hpp"

namespace crystalign {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
struct AdamWState {
  std::uint64_t step = 0;
  std::vector<tensor::Tensor<T>> first_moment;
  std::vector<tensor::Tensor<T>> second_moment;
};

/// One AdamW step with decoupled weight decay and bias correction:
///   p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)
/// Parameters whose gradient buffer is empty are treated as having zero gradient.
template <class T>
void adamw_step(std::span<tensor::Tensor<T>> params, AdamWState<T>& state, const AdamWConfig& cfg) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(tensor::Tensor<T>::zeros(p.shape()));
      state.second_moment.push_back(tensor::Tensor<T>::zeros(p.shape()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw Error(Errc::ShapeMismatch, "optimizer state tracks " + std::to_string(state.first_moment.size()) +
                                         " tensors, got " + std::to_string(params.size()));
  }
  ++state.step;
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(cfg.lr);
  const T decay = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (state.first_moment[k].shape() != p.shape() || state.second_moment[k].shape() != p.shape()) {
      tensor::shape_error("adamw_step", state.first_moment[k].shape(), p.shape());
    }
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(p.numel());
    Eigen::Map<Arr> value(p.data().data(), n);
    Eigen::Map<Arr> m(state.first_moment[k].data().data(), n);
    Eigen::Map<Arr> v(state.second_moment[k].data().data(), n);
    if (p.grad().empty()) {
      m *= b1;
      v *= b2;
    } else {
      Eigen::Map<const Arr> g(p.grad().data(), n);
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.square();
    }
    value = value * decay - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

}  // namespace crystalign
