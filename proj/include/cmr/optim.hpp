#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmr/tensor.hpp"

namespace cmr::ad {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Throws NonFiniteError naming the parameter when `grad` holds NaN or inf.
template <typename T>
void check_finite_grad(const std::string& name, const typename Node<T>::Array& grad) {
  if (grad.allFinite()) return;
  const auto bad = (!grad.isFinite()).count();
  throw NonFiniteError("non-finite gradient in parameter '" + name + "': " + std::to_string(bad) + " of " +
                       std::to_string(grad.size()) + " entries");
}

template <typename T>
void sgd_step(typename Node<T>::Array& param, const typename Node<T>::Array& grad, T lr) {
  if (param.size() != grad.size()) throw ShapeError("sgd_step: parameter/gradient size mismatch");
  param -= lr * grad;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  typename Node<T>::Array m;
  typename Node<T>::Array v;
  long step = 0;
};

template <typename T>
void adam_step(typename Node<T>::Array& param, const typename Node<T>::Array& grad, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (param.size() != grad.size()) throw ShapeError("adam_step: parameter/gradient size mismatch");
  if (state.m.size() != param.size()) {
    state.m = Node<T>::Array::Zero(param.size());
    state.v = Node<T>::Array::Zero(param.size());
    state.step = 0;
  }
  ++state.step;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  state.m = b1 * state.m + (T(1) - b1) * grad;
  state.v = b2 * state.v + (T(1) - b2) * grad.square();
  const T c1 = T(1) - T(std::pow(cfg.beta1, double(state.step)));
  const T c2 = T(1) - T(std::pow(cfg.beta2, double(state.step)));
  param -= T(cfg.lr) * (state.m / c1) / ((state.v / c2).sqrt() + T(cfg.eps));
}

/// Adam over a fixed parameter list. Parameters without an accumulated
/// gradient are treated as having a zero gradient.
template <typename T>
class Adam {
 public:
  explicit Adam(ParamList<T> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg), state_(params_.size()) {}

  void step() {
    for (const auto& p : params_)
      if (p.tensor.has_grad()) check_finite_grad<T>(p.name, p.tensor.grad_buffer());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Tensor<T>& t = params_[i].tensor;
      adam_step<T>(t.mutable_value(), t.grad(), state_[i], cfg_);
    }
  }
  void zero_grad() {
    for (const auto& p : params_) p.tensor.zero_grad();
  }
  const ParamList<T>& params() const { return params_; }
  AdamConfig& config() { return cfg_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<AdamState<T>> state_;
};

}  // namespace cmr::ad
