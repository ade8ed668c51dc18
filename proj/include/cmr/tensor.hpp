#pragma once

// Dense tensors with tape-style reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Ops record their inputs and a
// backward closure only while gradient recording is enabled and at least one
// input needs a gradient, so inference and frozen sub-networks build no graph.
// Layout is row-major (last axis fastest); images are [N, C, H, W].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace cmr::ad {

using Shape = std::vector<int>;

inline Eigen::Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Eigen::Index{1}, [](Eigen::Index a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
inline thread_local bool grad_recording = true;
}

inline bool grad_enabled() { return detail::grad_recording; }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording) { detail::grad_recording = false; }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;
  bool requires_grad = false;  // leaf flag set by the user
  bool needs_grad = false;     // requires_grad, or some input needs it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads grad, accumulates into parents

  bool is_leaf() const { return parents.empty(); }
  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Array = typename Node<T>::Array;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from_data(Shape shape, Array values) {
    if (ad::numel(shape) != values.size())
      throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto count = ad::numel(shape);
    return from_data(std::move(shape), Array::Zero(count));
  }
  static Tensor full(Shape shape, T v) {
    const auto count = ad::numel(shape);
    return from_data(std::move(shape), Array::Constant(count, v));
  }
  static Tensor scalar(T v) { return full({}, v); }
  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, Array values) {
    Tensor t = from_data(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(std::size_t(i < 0 ? rank() + i : i)); }
  Eigen::Index numel() const { return node_->value.size(); }

  const Array& value() const { return node_->value; }
  /// Direct access for optimizers and initializers; do not resize.
  Array& mutable_value() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  /// Accumulated gradient; zeros when nothing has been accumulated yet.
  Array grad() const { return node_->grad.size() == numel() ? node_->grad : Array::Zero(numel()); }
  Array& grad_buffer() const { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.size() == numel(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const {
    if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    node_->needs_grad = on;
  }
  bool needs_grad() const { return node_->needs_grad; }
  void zero_grad() const { node_->grad = Array::Zero(numel()); }

  /// Same values, no history.
  Tensor detach() const { return from_data(shape(), value()); }

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls;
  /// interior gradients are recomputed from zero each call.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (!node_->needs_grad) return;

  // Post-order DFS: every node appears after all of its inputs, exactly once.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (!n->is_leaf()) n->grad.resize(0);

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->backward_fn) continue;
    n->grad_buffer();
    n->backward_fn(*n);
    n->grad.resize(0);
  }
}

/// Builds an op result. `backward` runs only when some input needs a gradient
/// and must skip inputs whose needs_grad is false.
template <typename T, typename Fn>
Tensor<T> make_op(Shape shape, typename Node<T>::Array value, const std::vector<Tensor<T>>& inputs, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.defined() && t.needs_grad(); });
    if (any) {
      n->needs_grad = true;
      for (const auto& t : inputs) n->parents.push_back(t.defined() ? t.node() : std::make_shared<Node<T>>());
      n->backward_fn = std::forward<Fn>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, int rank, const char* op) {
  if (a.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

template <typename T>
bool wants(const std::shared_ptr<Node<T>>& p) {
  return p->needs_grad;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  return make_op<T>(a.shape(), a.value() + b.value(), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (detail::wants(p)) p->grad_buffer() += self.grad;
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  return make_op<T>(a.shape(), a.value() - b.value(), {a, b}, [](Node<T>& self) {
    if (detail::wants(self.parents[0])) self.parents[0]->grad_buffer() += self.grad;
    if (detail::wants(self.parents[1])) self.parents[1]->grad_buffer() -= self.grad;
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  return make_op<T>(a.shape(), a.value() * b.value(), {a, b}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (detail::wants(pa)) pa->grad_buffer() += self.grad * pb->value;
    if (detail::wants(pb)) pb->grad_buffer() += self.grad * pa->value;
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return make_op<T>(a.shape(), a.value() * factor, {a}, [factor](Node<T>& self) {
    if (detail::wants(self.parents[0])) self.parents[0]->grad_buffer() += self.grad * factor;
  });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(T factor, const Tensor<T>& a) { return scale(a, factor); }

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return make_op<T>(x.shape(), x.value().max(T(0)), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    if (detail::wants(p)) p->grad_buffer() += (p->value > T(0)).select(self.grad, T(0));
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  typename Node<T>::Array y = (T(1) + (-x.value()).exp()).inverse();
  return make_op<T>(x.shape(), std::move(y), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    if (detail::wants(p)) p->grad_buffer() += self.grad * self.value * (T(1) - self.value);
  });
}

/// log(max(x, floor)); the gradient is zero where the floor is active.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& x, T floor) {
  return make_op<T>(x.shape(), x.value().max(floor).log(), {x}, [floor](Node<T>& self) {
    auto& p = self.parents[0];
    if (detail::wants(p)) p->grad_buffer() += (p->value > floor).select(self.grad / p->value, T(0));
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  typename Node<T>::Array v(1);
  v[0] = x.value().sum();
  return make_op<T>({}, std::move(v), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    if (detail::wants(p)) p->grad_buffer() += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

// ------------------------------------------------------------------- reshapes

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  return make_op<T>(std::move(shape), x.value(), {x}, [](Node<T>& self) {
    auto& p = self.parents[0];
    if (detail::wants(p)) p->grad_buffer() += self.grad;
  });
}

/// [N, ...] -> [N, prod(...)].
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("flatten: needs a batch axis");
  return reshape(x, {x.dim(0), static_cast<int>(x.numel() / x.dim(0))});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[std::size_t(axis)] = 0;
  std::vector<Eigen::Index> widths;
  for (const auto& t : parts) {
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && t.dim(d) != first[std::size_t(d)])
        throw ShapeError("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(first));
    out_shape[std::size_t(axis)] += t.dim(axis);
  }
  Eigen::Index outer = 1;
  for (int d = 0; d < axis; ++d) outer *= first[std::size_t(d)];
  Eigen::Index inner = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= first[std::size_t(d)];
  for (const auto& t : parts) widths.push_back(Eigen::Index(t.dim(axis)) * inner);
  const Eigen::Index row = Eigen::Index(out_shape[std::size_t(axis)]) * inner;

  typename Node<T>::Array out(numel(out_shape));
  for (Eigen::Index o = 0; o < outer; ++o) {
    Eigen::Index col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      out.segment(o * row + col, widths[k]) = parts[k].value().segment(o * widths[k], widths[k]);
      col += widths[k];
    }
  }
  return make_op<T>(out_shape, std::move(out), parts, [outer, row, widths](Node<T>& self) {
    Eigen::Index col = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = self.parents[k];
      if (detail::wants(p)) {
        auto& g = p->grad_buffer();
        for (Eigen::Index o = 0; o < outer; ++o) g.segment(o * widths[k], widths[k]) += self.grad.segment(o * row + col, widths[k]);
      }
      col += widths[k];
    }
  });
}

// ------------------------------------------------------------- linear algebra

/// [M, K] x [K, N] -> [M, N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using M = detail::RowMat<T>;
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  typename Node<T>::Array out(Eigen::Index(m) * n);
  Eigen::Map<M>(out.data(), m, n).noalias() =
      Eigen::Map<const M>(a.value().data(), m, k) * Eigen::Map<const M>(b.value().data(), k, n);
  return make_op<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    Eigen::Map<const M> g(self.grad.data(), m, n);
    if (detail::wants(pa))
      Eigen::Map<M>(pa->grad_buffer().data(), m, k).noalias() += g * Eigen::Map<const M>(pb->value.data(), k, n).transpose();
    if (detail::wants(pb))
      Eigen::Map<M>(pb->grad_buffer().data(), k, n).noalias() += Eigen::Map<const M>(pa->value.data(), m, k).transpose() * g;
  });
}

/// x [N, F], weight [O, F], bias [O] -> [N, O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  using M = detail::RowMat<T>;
  detail::require_rank(x, 2, "linear");
  detail::require_rank(weight, 2, "linear");
  const int n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f) throw ShapeError("linear: feature mismatch " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != o) throw ShapeError("linear: bias size mismatch");
  typename Node<T>::Array out(Eigen::Index(n) * o);
  Eigen::Map<M> y(out.data(), n, o);
  y.noalias() = Eigen::Map<const M>(x.value().data(), n, f) * Eigen::Map<const M>(weight.value().data(), o, f).transpose();
  if (bias.defined()) y.rowwise() += Eigen::Map<const detail::Vec<T>>(bias.value().data(), o).transpose();
  return make_op<T>({n, o}, std::move(out), {x, weight, bias}, [n, f, o](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    Eigen::Map<const M> g(self.grad.data(), n, o);
    if (detail::wants(px))
      Eigen::Map<M>(px->grad_buffer().data(), n, f).noalias() += g * Eigen::Map<const M>(pw->value.data(), o, f);
    if (detail::wants(pw))
      Eigen::Map<M>(pw->grad_buffer().data(), o, f).noalias() += g.transpose() * Eigen::Map<const M>(px->value.data(), n, f);
    if (detail::wants(pb)) Eigen::Map<detail::Vec<T>>(pb->grad_buffer().data(), o) += g.colwise().sum().transpose();
  });
}

// ---------------------------------------------------------------- probability

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  using M = detail::RowMat<T>;
  if (x.rank() < 1) throw ShapeError("softmax: needs at least one axis");
  const int c = x.dim(-1);
  const Eigen::Index rows = x.numel() / c;
  typename Node<T>::Array out(x.numel());
  Eigen::Map<M> y(out.data(), rows, c);
  y = Eigen::Map<const M>(x.value().data(), rows, c);
  y.colwise() -= y.rowwise().maxCoeff();
  y = y.array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return make_op<T>(x.shape(), std::move(out), {x}, [rows, c](Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants(p)) return;
    Eigen::Map<const M> y(self.value.data(), rows, c);
    Eigen::Map<const M> g(self.grad.data(), rows, c);
    const detail::Vec<T> dot = (g.array() * y.array()).rowwise().sum();
    M dx = y.array() * (g.colwise() - dot).array();
    Eigen::Map<M>(p->grad_buffer().data(), rows, c) += dx;
  });
}

/// log(softmax(x)) over the last axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  using M = detail::RowMat<T>;
  if (x.rank() < 1) throw ShapeError("log_softmax: needs at least one axis");
  const int c = x.dim(-1);
  const Eigen::Index rows = x.numel() / c;
  typename Node<T>::Array out(x.numel());
  Eigen::Map<M> y(out.data(), rows, c);
  y = Eigen::Map<const M>(x.value().data(), rows, c);
  y.colwise() -= y.rowwise().maxCoeff();
  const detail::Vec<T> lse = y.array().exp().rowwise().sum().log();
  y.colwise() -= lse;
  return make_op<T>(x.shape(), std::move(out), {x}, [rows, c](Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants(p)) return;
    Eigen::Map<const M> y(self.value.data(), rows, c);
    Eigen::Map<const M> g(self.grad.data(), rows, c);
    const detail::Vec<T> gsum = g.rowwise().sum();
    M dx = g - (y.array().exp().colwise() * gsum.array()).matrix();
    Eigen::Map<M>(p->grad_buffer().data(), rows, c) += dx;
  });
}

// ------------------------------------------------------------------- imaging

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
};

namespace detail {

struct ConvGeom {
  int c, h, w, kh, kw, stride, pad, ho, wo;
  Eigen::Index rows() const { return Eigen::Index(c) * kh * kw; }
  Eigen::Index cols() const { return Eigen::Index(ho) * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const Eigen::Index ncols = g.cols();
  for (int ch = 0; ch < g.c; ++ch) {
    const T* plane = x + Eigen::Index(ch) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((Eigen::Index(ch) * g.kh + ki) * g.kw + kj) * ncols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          T* out = dst + Eigen::Index(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* src = plane + Eigen::Index(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  const Eigen::Index ncols = g.cols();
  for (int ch = 0; ch < g.c; ++ch) {
    T* plane = x + Eigen::Index(ch) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((Eigen::Index(ch) * g.kh + ki) * g.kw + kj) * ncols;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + Eigen::Index(iy) * g.w;
          const T* row = src + Eigen::Index(oy) * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// x [N, C, H, W], weight [O, C, KH, KW], optional bias [O] -> [N, O, Ho, Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {}) {
  using M = detail::RowMat<T>;
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  if (opt.stride < 1 || opt.pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  const int n = x.dim(0), o = weight.dim(0);
  detail::ConvGeom g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), opt.stride, opt.pad, 0, 0};
  if (weight.dim(1) != g.c)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  if (bias.defined() && bias.numel() != o) throw ShapeError("conv2d: bias size mismatch");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

  const Eigen::Index in_stride = Eigen::Index(g.c) * g.h * g.w;
  const Eigen::Index out_stride = Eigen::Index(o) * g.cols();
  typename Node<T>::Array out(Eigen::Index(n) * out_stride);
  M cols(g.rows(), g.cols());
  Eigen::Map<const M> wm(weight.value().data(), o, g.rows());
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.value().data() + i * in_stride, g, cols.data());
    Eigen::Map<M> y(out.data() + i * out_stride, o, g.cols());
    y.noalias() = wm * cols;
    if (bias.defined()) y.colwise() += Eigen::Map<const detail::Vec<T>>(bias.value().data(), o);
  }
  return make_op<T>({n, o, g.ho, g.wo}, std::move(out), {x, weight, bias}, [n, o, g, in_stride, out_stride](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    Eigen::Map<const M> wm(pw->value.data(), o, g.rows());
    M cols(g.rows(), g.cols());
    for (int i = 0; i < n; ++i) {
      Eigen::Map<const M> gy(self.grad.data() + i * out_stride, o, g.cols());
      if (detail::wants(pw)) {
        detail::im2col(px->value.data() + i * in_stride, g, cols.data());
        Eigen::Map<M>(pw->grad_buffer().data(), o, g.rows()).noalias() += gy * cols.transpose();
      }
      if (detail::wants(pb)) Eigen::Map<detail::Vec<T>>(pb->grad_buffer().data(), o) += gy.rowwise().sum();
      if (detail::wants(px)) {
        cols.noalias() = wm.transpose() * gy;
        detail::col2im_add(cols.data(), g, px->grad_buffer().data() + i * in_stride);
      }
    }
  });
}

/// Max pooling with a square window; output size floor((H - k) / stride) + 1.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kernel = 2, int stride = 2) {
  detail::require_rank(x, 4, "max_pool2d");
  if (kernel < 1 || stride < 1) throw ShapeError("max_pool2d: invalid kernel/stride");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h - kernel) / stride + 1;
  const int wo = (w - kernel) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("max_pool2d: window larger than input " + shape_str(x.shape()));
  typename Node<T>::Array out(Eigen::Index(n) * c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(std::size_t(out.size()));
  const T* src = x.value().data();
  Eigen::Index k = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const Eigen::Index base = Eigen::Index(plane) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++k) {
        Eigen::Index best = base + Eigen::Index(oy * stride) * w + ox * stride;
        for (int dy = 0; dy < kernel; ++dy)
          for (int dx = 0; dx < kernel; ++dx) {
            const Eigen::Index idx = base + Eigen::Index(oy * stride + dy) * w + ox * stride + dx;
            if (src[idx] > src[best]) best = idx;
          }
        out[k] = src[best];
        (*argmax)[std::size_t(k)] = best;
      }
    }
  }
  return make_op<T>({n, c, ho, wo}, std::move(out), {x}, [argmax](Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->grad_buffer();
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += self.grad[Eigen::Index(i)];
  });
}

/// Nearest-neighbor upsampling of [N, C, H, W] to [N, C, out_h, out_w].
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int out_h, int out_w) {
  detail::require_rank(x, 4, "upsample_nearest");
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample_nearest: invalid output size");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto src = std::make_shared<std::vector<std::int64_t>>(std::size_t(out_h) * out_w);
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      (*src)[std::size_t(oy) * out_w + ox] = Eigen::Index(Eigen::Index(oy) * h / out_h) * w + Eigen::Index(ox) * w / out_w;
  const Eigen::Index in_plane = Eigen::Index(h) * w;
  const Eigen::Index out_plane = Eigen::Index(out_h) * out_w;
  typename Node<T>::Array out(Eigen::Index(n) * c * out_plane);
  for (Eigen::Index pl = 0; pl < Eigen::Index(n) * c; ++pl)
    for (Eigen::Index i = 0; i < out_plane; ++i) out[pl * out_plane + i] = x.value()[pl * in_plane + (*src)[std::size_t(i)]];
  return make_op<T>({n, c, out_h, out_w}, std::move(out), {x}, [src, in_plane, out_plane, planes = Eigen::Index(n) * c](Node<T>& self) {
    auto& p = self.parents[0];
    if (!detail::wants(p)) return;
    auto& g = p->grad_buffer();
    for (Eigen::Index pl = 0; pl < planes; ++pl)
      for (Eigen::Index i = 0; i < out_plane; ++i) g[pl * in_plane + (*src)[std::size_t(i)]] += self.grad[pl * out_plane + i];
  });
}

/// Per-channel normalization with statistics of the current batch (over N,
/// H, W), followed by the affine gamma, beta. x is [N, C, H, W] or [N, C].
/// The biased batch mean and variance are written to the optional outputs.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5),
                     typename Node<T>::Array* batch_mean = nullptr, typename Node<T>::Array* batch_var = nullptr) {
  if (x.rank() != 4 && x.rank() != 2) throw ShapeError("batch_norm: expected [N, C, H, W] or [N, C]");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index plane = x.rank() == 4 ? Eigen::Index(x.dim(2)) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("batch_norm: gamma/beta size mismatch");
  const T count = T(Eigen::Index(n) * plane);
  auto xhat = std::make_shared<typename Node<T>::Array>(x.numel());
  auto inv_std = std::make_shared<typename Node<T>::Array>(c);
  typename Node<T>::Array out(x.numel());
  const auto& xv = x.value();
  if (batch_mean) batch_mean->resize(c);
  if (batch_var) batch_var->resize(c);
  for (int ch = 0; ch < c; ++ch) {
    T mu = 0;
    for (int i = 0; i < n; ++i) mu += xv.segment((Eigen::Index(i) * c + ch) * plane, plane).sum();
    mu /= count;
    T var = 0;
    for (int i = 0; i < n; ++i) var += (xv.segment((Eigen::Index(i) * c + ch) * plane, plane) - mu).square().sum();
    var /= count;
    if (batch_mean) (*batch_mean)[ch] = mu;
    if (batch_var) (*batch_var)[ch] = var;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    for (int i = 0; i < n; ++i) {
      const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
      xhat->segment(off, plane) = (xv.segment(off, plane) - mu) * is;
      out.segment(off, plane) = xhat->segment(off, plane) * gamma.value()[ch] + beta.value()[ch];
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta}, [xhat, inv_std, n, c, plane, count](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    for (int ch = 0; ch < c; ++ch) {
      T sum_g = 0;
      T sum_gx = 0;
      for (int i = 0; i < n; ++i) {
        const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
        sum_g += self.grad.segment(off, plane).sum();
        sum_gx += (self.grad.segment(off, plane) * xhat->segment(off, plane)).sum();
      }
      if (detail::wants(pg)) pg->grad_buffer()[ch] += sum_gx;
      if (detail::wants(pb)) pb->grad_buffer()[ch] += sum_g;
      if (detail::wants(px)) {
        const T k = pg->value[ch] * (*inv_std)[ch] / count;
        auto& gx = px->grad_buffer();
        for (int i = 0; i < n; ++i) {
          const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
          gx.segment(off, plane) += k * (count * self.grad.segment(off, plane) - sum_g - xhat->segment(off, plane) * sum_gx);
        }
      }
    }
  });
}

/// y[n, c, ...] = x[n, c, ...] * scale[c] + shift[c].
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  if (x.rank() != 4 && x.rank() != 2) throw ShapeError("channel_affine: expected [N, C, H, W] or [N, C]");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index plane = x.rank() == 4 ? Eigen::Index(x.dim(2)) * x.dim(3) : 1;
  if (scale.numel() != c || shift.numel() != c) throw ShapeError("channel_affine: scale/shift size mismatch");
  typename Node<T>::Array out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
      out.segment(off, plane) = x.value().segment(off, plane) * scale.value()[ch] + shift.value()[ch];
    }
  return make_op<T>(x.shape(), std::move(out), {x, scale, shift}, [n, c, plane](Node<T>& self) {
    auto& px = self.parents[0];
    auto& ps = self.parents[1];
    auto& pt = self.parents[2];
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const Eigen::Index off = (Eigen::Index(i) * c + ch) * plane;
        const auto g = self.grad.segment(off, plane);
        if (detail::wants(px)) px->grad_buffer().segment(off, plane) += g * ps->value[ch];
        if (detail::wants(ps)) ps->grad_buffer()[ch] += (g * px->value.segment(off, plane)).sum();
        if (detail::wants(pt)) pt->grad_buffer()[ch] += g.sum();
      }
  });
}

}  // namespace cmr::ad
