#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/tensor.hpp"

namespace cmr {

inline constexpr double kLogFloor = 1e-12;

/// -sum_i O_i log(max(P_i, 1e-12)), averaged over the batch.
/// probs and onehot are [N, 8]; every row of probs must sum to 1 within 1e-4.
template <typename T>
ad::Tensor<T> orientation_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& onehot) {
  if (probs.rank() != 2 || probs.dim(1) != 8 || probs.shape() != onehot.shape())
    throw ad::ShapeError("orientation_loss: expected matching [N, 8] tensors, got " + ad::shape_str(probs.shape()) +
                         " and " + ad::shape_str(onehot.shape()));
  const int n = probs.dim(0);
  for (int i = 0; i < n; ++i) {
    const double s = double(probs.value().segment(Eigen::Index(i) * 8, 8).sum());
    if (!(std::abs(s - 1.0) <= 1e-4))
      throw std::invalid_argument("orientation_loss: row " + std::to_string(i) + " sums to " + std::to_string(s));
  }
  return ad::scale(ad::sum(ad::mul(onehot, ad::log_clamped(probs, T(kLogFloor)))), T(-1) / T(n));
}

/// Class-weighted binary cross-entropy over [N, 4, H, W] probability maps:
/// per-pixel BCE averaged over pixels and batch, multiplied by the class
/// weight, and summed over the four classes. Logs are floored at 1e-12.
template <typename T>
ad::Tensor<T> segmentation_loss(const ad::Tensor<T>& probs, const ad::Tensor<T>& target,
                                const std::vector<double>& weights) {
  if (probs.rank() != 4 || probs.shape() != target.shape())
    throw ad::ShapeError("segmentation_loss: expected matching [N, 4, H, W] tensors");
  if (probs.dim(1) != 4) throw std::invalid_argument("segmentation_loss: expected 4 classes, got " + std::to_string(probs.dim(1)));
  if (weights.size() != 4) throw std::invalid_argument("segmentation_loss: expected 4 class weights");
  const Eigen::Index plane = Eigen::Index(probs.dim(2)) * probs.dim(3);
  const T per_pixel = T(1) / T(Eigen::Index(probs.dim(0)) * plane);
  typename ad::Node<T>::Array w(probs.numel());
  for (Eigen::Index i = 0; i < probs.numel(); ++i) w[i] = -T(weights[std::size_t((i / plane) % 4)]) * per_pixel;
  const auto ones = ad::Tensor<T>::full(probs.shape(), T(1));
  const auto pos = ad::mul(target, ad::log_clamped(probs, T(kLogFloor)));
  const auto neg = ad::mul(ad::sub(ones, target), ad::log_clamped(ad::sub(ones, probs), T(kLogFloor)));
  return ad::sum(ad::mul(ad::Tensor<T>::from_data(probs.shape(), std::move(w)), ad::add(pos, neg)));
}

/// L_segmentation + L_orientation, unweighted.
template <typename T>
ad::Tensor<T> integral_loss(const ad::Tensor<T>& seg_loss, const ad::Tensor<T>& orient_loss) {
  return ad::add(seg_loss, orient_loss);
}

/// Training form of orientation_loss from [N, 8] log-probabilities.
template <typename T>
ad::Tensor<T> orientation_nll(const ad::Tensor<T>& log_probs, const ad::Tensor<T>& onehot) {
  if (log_probs.shape() != onehot.shape()) throw ad::ShapeError("orientation_nll: shape mismatch");
  return ad::scale(ad::sum(ad::mul(onehot, log_probs)), T(-1) / T(log_probs.dim(0)));
}

/// Training form of segmentation_loss evaluated on logits z, using
/// BCE(sigmoid(z), y) = softplus(z) - y z without clamping.
template <typename T>
ad::Tensor<T> segmentation_loss_logits(const ad::Tensor<T>& logits, const ad::Tensor<T>& target,
                                       const std::vector<double>& weights) {
  if (logits.rank() != 4 || logits.shape() != target.shape())
    throw ad::ShapeError("segmentation_loss_logits: expected matching [N, C, H, W] tensors");
  const int classes = logits.dim(1);
  if (weights.size() != std::size_t(classes)) throw std::invalid_argument("segmentation_loss_logits: weight count mismatch");
  const Eigen::Index plane = Eigen::Index(logits.dim(2)) * logits.dim(3);
  const T per_pixel = T(1) / T(Eigen::Index(logits.dim(0)) * plane);
  const auto& z = logits.value();
  const auto& y = target.value();
  double total = 0;  // float accumulation over a full batch loses digits
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double zi = z[i];
    const double softplus = zi > 0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi));
    total += weights[std::size_t((i / plane) % classes)] * (softplus - double(y[i]) * zi);
  }
  typename ad::Node<T>::Array v(1);
  v[0] = T(total * double(per_pixel));
  return ad::make_op<T>({}, std::move(v), {logits, target}, [plane, classes, per_pixel, weights](ad::Node<T>& self) {
    auto& pz = self.parents[0];
    auto& py = self.parents[1];
    const T g = self.grad[0] * per_pixel;
    for (Eigen::Index i = 0; i < pz->value.size(); ++i) {
      const T w = T(weights[std::size_t((i / plane) % classes)]) * g;
      if (pz->needs_grad) pz->grad_buffer()[i] += w * (T(1) / (T(1) + std::exp(-pz->value[i])) - py->value[i]);
      if (py->needs_grad) py->grad_buffer()[i] -= w * pz->value[i];
    }
  });
}

/// 2|A ∩ B| / (|A| + |B|) for binary masks; 1 when both are empty.
template <typename DA, typename DB>
double dice(const Eigen::DenseBase<DA>& a, const Eigen::DenseBase<DB>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dice: masks differ in size");
  Eigen::Index inter = 0, na = 0, nb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const bool x = a.derived().coeff(i) != 0;
    const bool y = b.derived().coeff(i) != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

}  // namespace cmr
