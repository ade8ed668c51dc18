#pragma once

// Central finite-difference checks for every differentiable primitive and
// loss. Each case draws its own random shapes; the scalar under test is
// sum(op(inputs) * R) for a fixed random R, so no gradient is trivially ones.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cmr/losses.hpp"
#include "cmr/tensor.hpp"

namespace gradcheck {

using cmr::ad::Shape;
using cmr::ad::Tensor;

template <typename T>
using Fn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

template <typename T>
struct Case {
  std::vector<Tensor<T>> inputs;  // leaves; those requiring grad are checked
  Fn<T> fn;
};

struct Result {
  std::string op;
  int shapes = 0;
  double max_error = 0.0;  // worst norm-relative error over all shapes
};

template <typename T>
T default_step() {
  return std::is_same_v<T, float> ? T(1e-2) : T(1e-6);
}

inline double tolerance_for(bool single) { return single ? 1e-3 : 1e-6; }

template <typename T>
long double project(const Tensor<T>& out, const Eigen::Array<T, Eigen::Dynamic, 1>& r) {
  long double s = 0;
  for (Eigen::Index i = 0; i < r.size(); ++i) s += static_cast<long double>(out.value()[i]) * r[i];
  return s;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||), over all checked
/// inputs at once. Absolute when both norms vanish.
template <typename T>
double check(const Case<T>& c, std::mt19937_64& rng, T step = default_step<T>()) {
  Tensor<T> out = c.fn(c.inputs);
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::Array<T, Eigen::Dynamic, 1> r(out.numel());
  for (Eigen::Index i = 0; i < r.size(); ++i) r[i] = T(nd(rng));

  for (const auto& t : c.inputs)
    if (t.requires_grad()) t.zero_grad();
  cmr::ad::sum(cmr::ad::mul(out, Tensor<T>::from_data(out.shape(), r))).backward();

  long double diff = 0, na = 0, nn = 0;
  for (const auto& t : c.inputs) {
    if (!t.requires_grad()) continue;
    const auto analytic = t.grad();
    auto& v = t.mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const T keep = v[i];
      long double fp, fm;
      {
        cmr::ad::NoGradGuard guard;
        v[i] = keep + step;
        fp = project(c.fn(c.inputs), r);
        v[i] = keep - step;
        fm = project(c.fn(c.inputs), r);
      }
      v[i] = keep;
      const long double numeric = (fp - fm) / (2.0L * step);
      diff += std::pow(numeric - analytic[i], 2.0L);
      na += std::pow(static_cast<long double>(analytic[i]), 2.0L);
      nn += numeric * numeric;
    }
  }
  const long double scale = std::sqrt(std::max(na, nn));
  return double(scale > 1e-12L ? std::sqrt(diff) / scale : std::sqrt(diff));
}

// ---------------------------------------------------------------- inputs

template <typename T>
Tensor<T> param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::Array<T, Eigen::Dynamic, 1> v(cmr::ad::numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = T(u(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

/// Values kept at least `gap` away from zero, for relu.
template <typename T>
Tensor<T> param_off_zero(Shape shape, std::mt19937_64& rng, double gap) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Eigen::Array<T, Eigen::Dynamic, 1> v(cmr::ad::numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = T(sign(rng) ? u(rng) : -u(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

/// Distinct values spaced by `gap`, shuffled, for max pooling.
template <typename T>
Tensor<T> param_distinct(Shape shape, std::mt19937_64& rng, double gap) {
  Eigen::Array<T, Eigen::Dynamic, 1> v(cmr::ad::numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = T(gap * double(i) - gap * double(v.size()) / 2);
  std::shuffle(v.data(), v.data() + v.size(), rng);
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::Array<T, Eigen::Dynamic, 1> v(cmr::ad::numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = T(u(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> onehot_rows(int n, int c, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, c - 1);
  Eigen::Array<T, Eigen::Dynamic, 1> v = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(Eigen::Index(n) * c);
  for (int i = 0; i < n; ++i) v[Eigen::Index(i) * c + pick(rng)] = T(1);
  return Tensor<T>::from_data({n, c}, std::move(v));
}

inline int draw(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// ---------------------------------------------------------------- the suite

template <typename T>
using CaseMaker = std::function<Case<T>(std::mt19937_64&)>;

template <typename T>
struct Entry {
  std::string op;
  CaseMaker<T> make;
};

/// Every primitive and both losses, generic over the scalar type.
template <typename T>
std::vector<Entry<T>> suite() {
  namespace ad = cmr::ad;
  const double gap = std::is_same_v<T, float> ? 0.05 : 1e-3;
  auto any_shape = [](std::mt19937_64& rng) {
    Shape s;
    const int rank = draw(rng, 1, 4);
    for (int i = 0; i < rank; ++i) s.push_back(draw(rng, 1, 4));
    return s;
  };
  std::vector<Entry<T>> e;
  e.push_back({"add", [=](auto& rng) {
                 const Shape s = any_shape(rng);
                 return Case<T>{{param<T>(s, rng), param<T>(s, rng)}, [](const auto& in) { return ad::add(in[0], in[1]); }};
               }});
  e.push_back({"sub", [=](auto& rng) {
                 const Shape s = any_shape(rng);
                 return Case<T>{{param<T>(s, rng), param<T>(s, rng)}, [](const auto& in) { return ad::sub(in[0], in[1]); }};
               }});
  e.push_back({"mul", [=](auto& rng) {
                 const Shape s = any_shape(rng);
                 return Case<T>{{param<T>(s, rng), param<T>(s, rng)}, [](const auto& in) { return ad::mul(in[0], in[1]); }};
               }});
  e.push_back({"scale", [=](auto& rng) {
                 const T f = T(std::uniform_real_distribution<double>(-3, 3)(rng));
                 return Case<T>{{param<T>(any_shape(rng), rng)}, [f](const auto& in) { return ad::scale(in[0], f); }};
               }});
  e.push_back({"relu", [=](auto& rng) {
                 return Case<T>{{param_off_zero<T>(any_shape(rng), rng, gap)}, [](const auto& in) { return ad::relu(in[0]); }};
               }});
  e.push_back({"sigmoid", [=](auto& rng) {
                 return Case<T>{{param<T>(any_shape(rng), rng, -4, 4)}, [](const auto& in) { return ad::sigmoid(in[0]); }};
               }});
  e.push_back({"log_clamped", [=](auto& rng) {
                 return Case<T>{{param<T>(any_shape(rng), rng, 0.2, 3.0)},
                                [](const auto& in) { return ad::log_clamped(in[0], T(1e-12)); }};
               }});
  e.push_back({"sum", [=](auto& rng) {
                 return Case<T>{{param<T>(any_shape(rng), rng)}, [](const auto& in) { return ad::sum(in[0]); }};
               }});
  e.push_back({"mean", [=](auto& rng) {
                 return Case<T>{{param<T>(any_shape(rng), rng)}, [](const auto& in) { return ad::mean(in[0]); }};
               }});
  e.push_back({"reshape", [=](auto& rng) {
                 const int a = draw(rng, 1, 4), b = draw(rng, 1, 4), c = draw(rng, 1, 3);
                 return Case<T>{{param<T>({a, b, c}, rng)}, [=](const auto& in) { return ad::reshape(in[0], {c, a * b}); }};
               }});
  e.push_back({"flatten", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 3), draw(rng, 1, 3), draw(rng, 1, 4), draw(rng, 1, 4)};
                 return Case<T>{{param<T>(s, rng)}, [](const auto& in) { return ad::flatten(in[0]); }};
               }});
  e.push_back({"concat", [=](auto& rng) {
                 Shape s{draw(rng, 1, 3), draw(rng, 1, 3), draw(rng, 1, 4)};
                 const int axis = draw(rng, 0, 2);
                 Shape s2 = s;
                 s2[std::size_t(axis)] = draw(rng, 1, 3);
                 return Case<T>{{param<T>(s, rng), param<T>(s2, rng)},
                                [axis](const auto& in) { return ad::concat(std::vector<Tensor<T>>{in[0], in[1]}, axis); }};
               }});
  e.push_back({"matmul", [=](auto& rng) {
                 const int m = draw(rng, 1, 4), k = draw(rng, 1, 5), n = draw(rng, 1, 4);
                 return Case<T>{{param<T>({m, k}, rng), param<T>({k, n}, rng)}, [](const auto& in) { return ad::matmul(in[0], in[1]); }};
               }});
  e.push_back({"linear", [=](auto& rng) {
                 const int n = draw(rng, 1, 4), f = draw(rng, 1, 6), o = draw(rng, 1, 4);
                 return Case<T>{{param<T>({n, f}, rng), param<T>({o, f}, rng), param<T>({o}, rng)},
                                [](const auto& in) { return ad::linear(in[0], in[1], in[2]); }};
               }});
  e.push_back({"softmax", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 4), draw(rng, 2, 8)};
                 return Case<T>{{param<T>(s, rng, -2, 2)}, [](const auto& in) { return ad::softmax(in[0]); }};
               }});
  e.push_back({"log_softmax", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 4), draw(rng, 2, 8)};
                 return Case<T>{{param<T>(s, rng, -2, 2)}, [](const auto& in) { return ad::log_softmax(in[0]); }};
               }});
  e.push_back({"conv2d", [=](auto& rng) {
                 const int n = draw(rng, 1, 2), c = draw(rng, 1, 3), h = draw(rng, 3, 6), w = draw(rng, 3, 6);
                 const int o = draw(rng, 1, 3), k = draw(rng, 1, 3);
                 const ad::Conv2dOptions opt{draw(rng, 1, 2), draw(rng, 0, 1)};
                 return Case<T>{{param<T>({n, c, h, w}, rng), param<T>({o, c, k, k}, rng), param<T>({o}, rng)},
                                [opt](const auto& in) { return ad::conv2d(in[0], in[1], in[2], opt); }};
               }});
  e.push_back({"max_pool2d", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 2), draw(rng, 1, 3), draw(rng, 2, 7), draw(rng, 2, 7)};
                 return Case<T>{{param_distinct<T>(s, rng, gap)}, [](const auto& in) { return ad::max_pool2d(in[0], 2, 2); }};
               }});
  e.push_back({"upsample_nearest", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 2), draw(rng, 1, 2), draw(rng, 1, 4), draw(rng, 1, 4)};
                 const int oh = draw(rng, 1, 8), ow = draw(rng, 1, 8);
                 return Case<T>{{param<T>(s, rng)}, [=](const auto& in) { return ad::upsample_nearest(in[0], oh, ow); }};
               }});
  e.push_back({"batch_norm", [=](auto& rng) {
                 const int c = draw(rng, 1, 3);
                 const Shape s{draw(rng, 2, 3), c, draw(rng, 1, 3), draw(rng, 2, 3)};
                 return Case<T>{{param<T>(s, rng, -2, 2), param<T>({c}, rng, 0.5, 1.5), param<T>({c}, rng)},
                                [](const auto& in) { return ad::batch_norm(in[0], in[1], in[2], T(1e-5)); }};
               }});
  e.push_back({"channel_affine", [=](auto& rng) {
                 const int c = draw(rng, 1, 4);
                 const Shape s{draw(rng, 1, 3), c, draw(rng, 1, 4), draw(rng, 1, 4)};
                 return Case<T>{{param<T>(s, rng), param<T>({c}, rng), param<T>({c}, rng)},
                                [](const auto& in) { return ad::channel_affine(in[0], in[1], in[2]); }};
               }});
  e.push_back({"segmentation_loss_logits", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 3), 4, draw(rng, 1, 4), draw(rng, 1, 4)};
                 std::vector<double> w{0.5, 1.0, 1.5, 2.0};
                 return Case<T>{{param<T>(s, rng, -3, 3), constant<T>(s, rng, 0, 1)},
                                [w](const auto& in) { return cmr::segmentation_loss_logits(in[0], in[1], w); }};
               }});
  e.push_back({"orientation_nll", [=](auto& rng) {
                 const int n = draw(rng, 1, 6);
                 return Case<T>{{param<T>({n, 8}, rng, -3, 0), onehot_rows<T>(n, 8, rng)},
                                [](const auto& in) { return cmr::orientation_nll(in[0], in[1]); }};
               }});
  // Both spec losses, on probabilities produced by a differentiable map so
  // perturbed inputs stay valid probabilities.
  e.push_back({"orientation_loss", [=](auto& rng) {
                 const int n = draw(rng, 1, 6);
                 return Case<T>{{param<T>({n, 8}, rng, -2, 2), onehot_rows<T>(n, 8, rng)},
                                [](const auto& in) { return cmr::orientation_loss(ad::softmax(in[0]), in[1]); }};
               }});
  e.push_back({"segmentation_loss", [=](auto& rng) {
                 const Shape s{draw(rng, 1, 3), 4, draw(rng, 1, 4), draw(rng, 1, 4)};
                 return Case<T>{{param<T>(s, rng, -3, 3), constant<T>(s, rng, 0, 1)},
                                [](const auto& in) { return cmr::segmentation_loss(ad::sigmoid(in[0]), in[1], {1.0, 2.0, 0.5, 1.0}); }};
               }});
  return e;
}

/// Runs every suite entry on `shapes` random shape draws.
template <typename T>
std::vector<Result> run(std::uint64_t seed, int shapes = 5) {
  std::vector<Result> out;
  std::mt19937_64 rng(seed);
  for (const auto& entry : suite<T>()) {
    Result r{entry.op, 0, 0.0};
    for (int k = 0; k < shapes; ++k) {
      const Case<T> c = entry.make(rng);
      r.max_error = std::max(r.max_error, check(c, rng));
      ++r.shapes;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace gradcheck
