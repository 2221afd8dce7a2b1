#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tape records every operation executed on this thread while it is alive
// and at least one input requires a gradient. Creation order is a
// topological order, so backward is a single reverse sweep over the tape.
// Without an active tape, operations compute values only (inference mode).
//
// Second-order gradients (input_gradient) are supported only for the op set
// used by the convolutional critic: matmul, transpose, reshape, gather,
// scatter_add, relu, add, sub, mul, scale, sum, mean, broadcast and the
// conv1d/maxpool1d composites built from them. Every other op throws
// DoubleBackwardUnsupported when traversed in that mode.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "twinlab/error.hpp"

namespace twinlab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor;
template <class T>
class Tape;

template <class T>
struct Node {
  using GraphBackward =
      std::function<std::vector<Tensor<T>>(Node&, const Tensor<T>&, const std::vector<bool>&)>;

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  Tape<T>* tape = nullptr;
  std::size_t tape_index = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
  // Same, but builds the parent gradients as recorded tensors.
  GraphBackward backward_graph;

  T* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Tape {
 public:
  Tape() : previous_(current_) { current_ = this; }
  ~Tape() {
    clear();
    current_ = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  void record(const std::shared_ptr<Node<T>>& n) {
    n->tape = this;
    n->tape_index = nodes_.size();
    nodes_.push_back(n);
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<Node<T>>>& nodes() const { return nodes_; }

  void clear() {
    for (auto& n : nodes_) n->tape = nullptr;
    nodes_.clear();
  }

 private:
  template <class>
  friend class NoGrad;

  std::vector<std::shared_ptr<Node<T>>> nodes_;
  Tape* previous_;
  inline static thread_local Tape* current_ = nullptr;
};

// Suspends recording on this thread for its lifetime.
template <class T>
class NoGrad {
 public:
  NoGrad() : saved_(Tape<T>::current_) { Tape<T>::current_ = nullptr; }
  ~NoGrad() { Tape<T>::current_ = saved_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* saved_;
};

template <class T = float>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<T> values) {
    if (ad::numel(shape) != values.size())
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }
  static Tensor filled(Shape shape, T fill) {
    std::vector<T> v(ad::numel(shape), fill);
    return constant(std::move(shape), std::move(v));
  }
  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }
  static Tensor scalar(T v) { return constant({}, {v}); }
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Only meaningful for leaves; used by optimizers between passes.
  std::span<T> mutable_data() { return node_->value; }
  T at(std::size_t i) const { return node_->value.at(i); }
  T item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Zero-filled if nothing has been accumulated yet.
  std::span<const T> grad() const { return {node_->grad_data(), node_->value.size()}; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_history() const { return !node_->leaf; }
  const char* op() const { return node_->op; }

  // Identity of the underlying buffer; two tensors share parameters iff equal.
  const void* storage() const { return node_->value.data(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;

template <class T>
Tensor<T> result(const char* op, Shape shape, std::vector<T> value,
                 std::initializer_list<const Tensor<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  Tape<T>* tape = Tape<T>::current();
  const bool rec = tape != nullptr && std::any_of(inputs.begin(), inputs.end(),
                                                  [](const Tensor<T>* t) { return t->requires_grad(); });
  if (rec) {
    n->requires_grad = true;
    n->leaf = false;
    for (const Tensor<T>* t : inputs) n->parents.push_back(t->node_ptr());
    tape->record(n);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> result_n(const char* op, Shape shape, std::vector<T> value, std::span<const Tensor<T>> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  Tape<T>* tape = Tape<T>::current();
  const bool rec = tape != nullptr &&
                   std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (rec) {
    n->requires_grad = true;
    n->leaf = false;
    for (const Tensor<T>& t : inputs) n->parents.push_back(t.node_ptr());
    tape->record(n);
  }
  return Tensor<T>(std::move(n));
}

// The message is only built on failure.
template <class Msg>
void require(bool ok, Msg&& what) {
  if (!ok) throw ShapeError(std::forward<Msg>(what)());
}

template <class T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), [&] { return std::string(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())); });
}

template <class T>
Tensor<T> parent(Node<T>& self, std::size_t i) {
  return Tensor<T>(self.parents[i]);
}

template <class T, class F, class D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, D dydx) {
  std::vector<T> y(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i]);
  Tensor<T> out = result<T>(op, a.shape(), std::move(y), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [dydx](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      for (std::size_t i = 0; i < self.value.size(); ++i) gp[i] += self.grad[i] * dydx(p.value[i], self.value[i]);
    };
  }
  return out;
}

using Index = std::vector<std::size_t>;
using IndexPtr = std::shared_ptr<const Index>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> transpose(const Tensor<T>& a);

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), [&] { return std::string("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape())); });
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n);
  detail::Map<T>(c.data(), m, n).noalias() =
      detail::CMap<T>(a.data().data(), m, k) * detail::CMap<T>(b.data().data(), k, n);
  Tensor<T> out = detail::result<T>("matmul", {m, n}, std::move(c), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [m, k, n](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      detail::CMap<T> g(self.grad.data(), m, n);
      if (pa.requires_grad)
        detail::Map<T>(pa.grad_data(), m, k).noalias() += g * detail::CMap<T>(pb.value.data(), k, n).transpose();
      if (pb.requires_grad)
        detail::Map<T>(pb.grad_data(), k, n).noalias() += detail::CMap<T>(pa.value.data(), m, k).transpose() * g;
    };
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>& need) {
      std::vector<Tensor<T>> r(2);
      if (need[0]) r[0] = matmul(g, transpose(detail::parent(self, 1)));
      if (need[1]) r[1] = matmul(transpose(detail::parent(self, 0)), g);
      return r;
    };
  }
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2, [&] { return std::string("transpose: expected rank 2, got " + shape_str(a.shape())); });
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> v(m * n);
  detail::Map<T>(v.data(), n, m) = detail::CMap<T>(a.data().data(), m, n).transpose();
  Tensor<T> out = detail::result<T>("transpose", {n, m}, std::move(v), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [m, n](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (p.requires_grad)
        detail::Map<T>(p.grad_data(), m, n) += detail::CMap<T>(self.grad.data(), n, m).transpose();
    };
    out.node()->backward_graph = [](Node<T>&, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{transpose(g)};
    };
  }
  return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel(shape) == a.numel(), [&] { return std::string("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape)); });
  std::vector<T> v(a.data().begin(), a.data().end());
  Tensor<T> out = detail::result<T>("reshape", std::move(shape), std::move(v), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += self.grad[i];
    };
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{reshape(g, self.parents[0]->shape)};
    };
  }
  return out;
}

template <class T>
Tensor<T> scatter_add(const Tensor<T>& src, detail::IndexPtr index, Shape shape);

// out.flat[i] = x.flat[index[i]]
template <class T>
Tensor<T> gather(const Tensor<T>& x, detail::IndexPtr index, Shape shape) {
  detail::require(index->size() == numel(shape), [&] { return std::string("gather: index count does not match output shape " +
                                                     shape_str(shape)); });
  std::vector<T> v(index->size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    detail::require((*index)[i] < xs.size(), [&] { return std::string("gather: index out of range for " + shape_str(x.shape())); });
    v[i] = xs[(*index)[i]];
  }
  Tensor<T> out = detail::result<T>("gather", std::move(shape), std::move(v), {&x});
  if (out.requires_grad()) {
    out.node()->backward = [index](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      for (std::size_t i = 0; i < index->size(); ++i) gp[(*index)[i]] += self.grad[i];
    };
    out.node()->backward_graph = [index](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{scatter_add(g, index, self.parents[0]->shape)};
    };
  }
  return out;
}

// Adjoint of gather: out = zeros(shape); out.flat[index[i]] += src.flat[i]
template <class T>
Tensor<T> scatter_add(const Tensor<T>& src, detail::IndexPtr index, Shape shape) {
  detail::require(index->size() == src.numel(), [&] { return std::string("scatter_add: index count does not match source " +
                                                    shape_str(src.shape())); });
  std::vector<T> v(numel(shape), T(0));
  const auto s = src.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    detail::require((*index)[i] < v.size(), [&] { return std::string("scatter_add: index out of range for " + shape_str(shape)); });
    v[(*index)[i]] += s[i];
  }
  Tensor<T> out = detail::result<T>("scatter_add", std::move(shape), std::move(v), {&src});
  if (out.requires_grad()) {
    out.node()->backward = [index](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      for (std::size_t i = 0; i < index->size(); ++i) gp[i] += self.grad[(*index)[i]];
    };
    out.node()->backward_graph = [index](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{gather(g, index, self.parents[0]->shape)};
    };
  }
  return out;
}

// Rows of a 2-D tensor selected by id (embedding lookup).
template <class T>
Tensor<T> take_rows(const Tensor<T>& m, std::span<const std::size_t> ids) {
  detail::require(m.rank() == 2, [&] { return std::string("take_rows: expected rank 2, got " + shape_str(m.shape())); });
  const std::size_t cols = m.dim(1);
  std::vector<T> v(ids.size() * cols);
  const auto src = m.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    detail::require(ids[r] < m.dim(0), [&] { return std::string("take_rows: row " + std::to_string(ids[r]) + " out of range for " +
                                           shape_str(m.shape())); });
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[r] * cols), cols,
                v.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  Tensor<T> out = detail::result<T>("take_rows", {ids.size(), cols}, std::move(v), {&m});
  if (out.requires_grad()) {
    out.node()->backward = [rows = std::vector<std::size_t>(ids.begin(), ids.end()), cols](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) gp[rows[r] * cols + c] += self.grad[r * cols + c];
    };
  }
  return out;
}

// 2-D concatenation along axis 0 (rows) or 1 (columns).
template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  detail::require(!parts.empty(), [&] { return std::string("concat: no inputs"); });
  detail::require(axis < 2, [&] { return std::string("concat: axis must be 0 or 1"); });
  const std::size_t other = 1 - axis;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(other) == parts[0].dim(other), [&] { return std::string("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape())); });
    total += p.dim(axis);
  }
  Shape shape = parts[0].shape();
  shape[axis] = total;
  const std::size_t rows = shape[0], cols = shape[1];
  std::vector<T> v(rows * cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto d = p.data();
    if (axis == 0) {
      std::copy(d.begin(), d.end(), v.begin() + static_cast<std::ptrdiff_t>(off * cols));
    } else {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < p.dim(1); ++c) v[r * cols + off + c] = d[r * p.dim(1) + c];
    }
    off += p.dim(axis);
  }
  Tensor<T> out = detail::result_n<T>("concat", std::move(shape), std::move(v), parts);
  if (out.requires_grad()) {
    out.node()->backward = [offsets, axis, cols](Node<T>& self) {
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node<T>& p = *self.parents[k];
        if (!p.requires_grad) continue;
        T* gp = p.grad_data();
        if (axis == 0) {
          const T* g = self.grad.data() + offsets[k] * cols;
          for (std::size_t i = 0; i < p.value.size(); ++i) gp[i] += g[i];
        } else {
          const std::size_t pc = p.shape[1];
          for (std::size_t r = 0; r < p.shape[0]; ++r)
            for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += self.grad[r * cols + offsets[k] + c];
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  return concat(std::span<const Tensor<T>>(parts.begin(), parts.size()), axis);
}

// Half-open range [begin, end) of a 2-D tensor along axis 0 or 1.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  detail::require(a.rank() == 2 && axis < 2 && begin < end && end <= a.dim(axis), [&] { return std::string("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                      std::to_string(axis) + " invalid for " + shape_str(a.shape())); });
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Shape shape = a.shape();
  shape[axis] = end - begin;
  std::vector<T> v(numel(shape));
  const auto d = a.data();
  if (axis == 0) {
    std::copy(d.begin() + static_cast<std::ptrdiff_t>(begin * cols), d.begin() + static_cast<std::ptrdiff_t>(end * cols),
              v.begin());
  } else {
    const std::size_t w = end - begin;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) v[r * w + c] = d[r * cols + begin + c];
  }
  Tensor<T> out = detail::result<T>("slice", std::move(shape), std::move(v), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [axis, begin, end, rows, cols](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* gp = p.grad_data();
      if (axis == 0) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) gp[begin * cols + i] += self.grad[i];
      } else {
        const std::size_t w = end - begin;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < w; ++c) gp[r * cols + begin + c] += self.grad[r * w + c];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <class T>
Tensor<T> sum(const Tensor<T>& a);
template <class T>
Tensor<T> row_sum(const Tensor<T>& a);

// Same-shape addition, or a [rows, cols] + [cols] row broadcast.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool broadcast = a.shape() != b.shape();
  if (broadcast)
    detail::require(a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1), [&] { return std::string("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape())); });
  std::vector<T> v(a.data().begin(), a.data().end());
  const auto bd = b.data();
  const std::size_t bn = bd.size();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bd[broadcast ? i % bn : i];
  Tensor<T> out = detail::result<T>("add", a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [bn, broadcast](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      if (pa.requires_grad) {
        T* g = pa.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        T* g = pb.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[broadcast ? i % bn : i] += self.grad[i];
      }
    };
    if (!broadcast) {
      out.node()->backward_graph = [](Node<T>&, const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{g, g};
      };
    }
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  Tensor<T> out = detail::result<T>("sub", a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      if (pa.requires_grad) {
        T* g = pa.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        T* g = pb.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
      }
    };
    out.node()->backward_graph = [](Node<T>&, const Tensor<T>& g, const std::vector<bool>& need) {
      std::vector<Tensor<T>> r{g, Tensor<T>()};
      if (need[1]) r[1] = scale(g, T(-1));
      return r;
    };
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  Tensor<T> out = detail::result<T>("mul", a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      if (pa.requires_grad) {
        T* g = pa.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
      }
      if (pb.requires_grad) {
        T* g = pb.grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
      }
    };
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>& need) {
      std::vector<Tensor<T>> r(2);
      if (need[0]) r[0] = mul(g, detail::parent(self, 1));
      if (need[1]) r[1] = mul(g, detail::parent(self, 0));
      return r;
    };
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * s;
  Tensor<T> out = detail::result<T>("scale", a.shape(), std::move(v), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [s](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    };
    out.node()->backward_graph = [s](Node<T>&, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{scale(g, s)};
    };
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

// Rows of `a` where mask[row] is set, rows of `b` otherwise.
template <class T>
Tensor<T> blend(std::span<const std::uint8_t> mask, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("blend", a, b);
  detail::require(a.rank() == 2 && mask.size() == a.dim(0), [&] { return std::string("blend: mask of length " + std::to_string(mask.size()) + " for " + shape_str(a.shape())); });
  const std::size_t cols = a.dim(1);
  std::vector<T> v(a.numel());
  for (std::size_t r = 0; r < mask.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = (mask[r] ? a : b).data()[r * cols + c];
  Tensor<T> out = detail::result<T>("blend", a.shape(), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [m = std::vector<std::uint8_t>(mask.begin(), mask.end()), cols](Node<T>& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        Node<T>& p = *self.parents[k];
        if (!p.requires_grad) continue;
        T* g = p.grad_data();
        for (std::size_t r = 0; r < m.size(); ++r) {
          if ((m[r] != 0) != (k == 0)) continue;
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c];
        }
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::constant(a.shape(), std::vector<T>(a.data().begin(), a.data().end()));
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary<T>(
      "tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
  if (out.requires_grad()) {
    // Second derivative is zero almost everywhere: the backward is a
    // multiplication by a constant mask.
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      const auto& x = self.parents[0]->value;
      std::vector<T> mask(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > T(0) ? T(1) : T(0);
      return std::vector<Tensor<T>>{mul(g, Tensor<T>::constant(self.shape, std::move(mask)))};
    };
  }
  return out;
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// Gradient passes where lo <= x <= hi and is zero where the value was clipped.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> broadcast(const Tensor<T>& s, Shape shape);

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T x : a.data()) acc += static_cast<double>(x);
  Tensor<T> out = detail::result<T>("sum", {}, {static_cast<T>(acc)}, {&a});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_data();
      for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[0];
    };
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{broadcast(g, self.parents[0]->shape)};
    };
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  detail::require(a.numel() > 0, [&] { return std::string("mean: empty tensor"); });
  const auto n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (T x : a.data()) acc += static_cast<double>(x);
  Tensor<T> out = detail::result<T>("mean", {}, {static_cast<T>(acc / n)}, {&a});
  if (out.requires_grad()) {
    out.node()->backward = [n](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_data();
      const T share = static_cast<T>(static_cast<double>(self.grad[0]) / n);
      for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += share;
    };
    out.node()->backward_graph = [n](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{scale(broadcast(g, self.parents[0]->shape), static_cast<T>(1.0 / n))};
    };
  }
  return out;
}

// A single-element tensor repeated to `shape`; adjoint of sum.
template <class T>
Tensor<T> broadcast(const Tensor<T>& s, Shape shape) {
  detail::require(s.numel() == 1, [&] { return std::string("broadcast: expected a single element, got " + shape_str(s.shape())); });
  std::vector<T> v(numel(shape), s.data()[0]);
  Tensor<T> out = detail::result<T>("broadcast", std::move(shape), std::move(v), {&s});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      double acc = 0.0;
      for (T x : self.grad) acc += static_cast<double>(x);
      p.grad_data()[0] += static_cast<T>(acc);
    };
    out.node()->backward_graph = [](Node<T>& self, const Tensor<T>& g, const std::vector<bool>&) {
      return std::vector<Tensor<T>>{reshape(sum(g), self.parents[0]->shape)};
    };
  }
  return out;
}

// [rows, cols] -> [rows]
template <class T>
Tensor<T> row_sum(const Tensor<T>& a) {
  detail::require(a.rank() == 2, [&] { return std::string("row_sum: expected rank 2, got " + shape_str(a.shape())); });
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> v(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(a.data()[r * cols + c]);
    v[r] = static_cast<T>(acc);
  }
  Tensor<T> out = detail::result<T>("row_sum", {rows}, std::move(v), {&a});
  if (out.requires_grad()) {
    out.node()->backward = [cols](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_data();
      for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[i / cols];
    };
  }
  return out;
}

// Row-wise cosine similarity: [n] x [n] -> [] or [rows, n] x [rows, n] -> [rows].
// Rows with a zero vector have cosine 0 and receive zero gradient.
template <class T>
Tensor<T> cosine(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("cosine", a, b);
  detail::require(a.rank() == 1 || a.rank() == 2, [&] { return std::string("cosine: expected rank 1 or 2, got " + shape_str(a.shape())); });
  const std::size_t rows = a.rank() == 1 ? 1 : a.dim(0);
  const std::size_t n = a.rank() == 1 ? a.dim(0) : a.dim(1);
  std::vector<T> v(rows);
  std::vector<double> na(rows), nb(rows), dots(rows);
  const auto ad = a.data(), bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0, sa = 0, sb = 0;
    for (std::size_t c = 0; c < n; ++c) {
      const double x = ad[r * n + c], y = bd[r * n + c];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    dots[r] = dot;
    v[r] = (na[r] > 0 && nb[r] > 0) ? static_cast<T>(dot / (na[r] * nb[r])) : T(0);
  }
  Shape shape = a.rank() == 1 ? Shape{} : Shape{rows};
  Tensor<T> out = detail::result<T>("cosine", std::move(shape), std::move(v), {&a, &b});
  if (out.requires_grad()) {
    out.node()->backward = [rows, n, na, nb, dots](Node<T>& self) {
      Node<T>& pa = *self.parents[0];
      Node<T>& pb = *self.parents[1];
      for (std::size_t r = 0; r < rows; ++r) {
        if (na[r] == 0 || nb[r] == 0) continue;
        const double g = self.grad[r];
        const double cos = dots[r] / (na[r] * nb[r]);
        const double inv = 1.0 / (na[r] * nb[r]);
        if (pa.requires_grad) {
          T* ga = pa.grad_data();
          for (std::size_t c = 0; c < n; ++c) {
            const double x = pa.value[r * n + c], y = pb.value[r * n + c];
            ga[r * n + c] += static_cast<T>(g * (y * inv - cos * x / (na[r] * na[r])));
          }
        }
        if (pb.requires_grad) {
          T* gb = pb.grad_data();
          for (std::size_t c = 0; c < n; ++c) {
            const double x = pa.value[r * n + c], y = pb.value[r * n + c];
            gb[r * n + c] += static_cast<T>(g * (x * inv - cos * y / (nb[r] * nb[r])));
          }
        }
      }
    };
  }
  return out;
}

// Mean over positions with mask 1 of -log softmax(logits[i])[targets[i]].
// Returns 0 when the mask selects nothing.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets,
                                std::type_identity_t<std::span<const T>> mask) {
  detail::require(logits.rank() == 2 && targets.size() == logits.dim(0) && mask.size() == logits.dim(0), [&] { return std::string("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " with " +
                      std::to_string(targets.size()) + " targets and mask of length " + std::to_string(mask.size())); });
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  double active = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] != T(0) && mask[r] != T(1)) throw ShapeError("softmax_cross_entropy: mask values must be 0 or 1");
    active += static_cast<double>(mask[r]);
    if (mask[r] != T(0) && targets[r] >= classes)
      throw ShapeError("softmax_cross_entropy: target " + std::to_string(targets[r]) + " out of range for " +
                       shape_str(logits.shape()));
  }
  const auto z = logits.data();
  std::vector<T> probs(rows * classes);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * classes;
    const double mx = *std::max_element(zr, zr + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(static_cast<double>(zr[c]) - mx);
    for (std::size_t c = 0; c < classes; ++c)
      probs[r * classes + c] = static_cast<T>(std::exp(static_cast<double>(zr[c]) - mx) / denom);
    if (mask[r] != T(0)) loss += std::log(denom) + mx - static_cast<double>(zr[targets[r]]);
  }
  const double value = active > 0 ? loss / active : 0.0;
  Tensor<T> out = detail::result<T>("softmax_cross_entropy", {}, {static_cast<T>(value)}, {&logits});
  if (out.requires_grad() && active > 0) {
    out.node()->backward = [probs = std::move(probs), t = std::vector<std::size_t>(targets.begin(), targets.end()),
                            m = std::vector<T>(mask.begin(), mask.end()), rows, classes, active](Node<T>& self) {
      Node<T>& p = *self.parents[0];
      if (!p.requires_grad) return;
      T* g = p.grad_data();
      const double share = static_cast<double>(self.grad[0]) / active;
      for (std::size_t r = 0; r < rows; ++r) {
        if (m[r] == T(0)) continue;
        for (std::size_t c = 0; c < classes; ++c) {
          const double d = static_cast<double>(probs[r * classes + c]) - (c == t[r] ? 1.0 : 0.0);
          g[r * classes + c] += static_cast<T>(share * d);
        }
      }
    };
  } else if (out.requires_grad()) {
    out.node()->backward = [](Node<T>&) {};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling (composites of gather and matmul, so they support
// double backward)
// ---------------------------------------------------------------------------

// x: [batch, length], filters: [F, k] -> [batch, F, length - k + 1]
// (single input channel, stride 1, no padding).
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& filters) {
  detail::require(x.rank() == 2 && filters.rank() == 2 && filters.dim(1) >= 1 && filters.dim(1) <= x.dim(1), [&] { return std::string("conv1d: signal " + shape_str(x.shape()) + " incompatible with filters " +
                      shape_str(filters.shape())); });
  const std::size_t batch = x.dim(0), len = x.dim(1), nf = filters.dim(0), k = filters.dim(1);
  const std::size_t positions = len - k + 1;
  auto cols_idx = std::make_shared<detail::Index>(batch * positions * k);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t j = 0; j < k; ++j) (*cols_idx)[(b * positions + p) * k + j] = b * len + p + j;
  const Tensor<T> cols = gather(x, cols_idx, {batch * positions, k});
  const Tensor<T> y = matmul(cols, transpose(filters));  // [batch * positions, F]
  auto perm = std::make_shared<detail::Index>(batch * nf * positions);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < nf; ++f)
      for (std::size_t p = 0; p < positions; ++p) (*perm)[(b * nf + f) * positions + p] = (b * positions + p) * nf + f;
  return gather(y, perm, {batch, nf, positions});
}

// Non-overlapping max pooling over the last axis with the given window
// (stride = window). Ties go to the lowest index, so the gradient is routed
// to exactly one position per window.
template <class T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t window) {
  detail::require(x.rank() >= 1 && window >= 1 && window <= x.shape().back(), [&] { return std::string("maxpool1d: window " + std::to_string(window) + " invalid for " + shape_str(x.shape())); });
  const std::size_t len = x.shape().back();
  const std::size_t outer = x.numel() / len;
  const std::size_t out_len = len / window;
  auto idx = std::make_shared<detail::Index>(outer * out_len);
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t w = 0; w < out_len; ++w) {
      std::size_t best = o * len + w * window;
      for (std::size_t j = 1; j < window; ++j) {
        const std::size_t at = o * len + w * window + j;
        if (d[at] > d[best]) best = at;
      }
      (*idx)[o * out_len + w] = best;
    }
  Shape shape = x.shape();
  shape.back() = out_len;
  return gather(x, idx, std::move(shape));
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
// Leaf gradients are not reset; call zero_grad between passes.
template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (loss.numel() != 1) throw RankError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  Node<T>* root = loss.node();
  if (root->tape != &tape) throw Error("backward: loss was not recorded on this tape");
  const auto& nodes = tape.nodes();
  for (const auto& n : nodes) n->grad.clear();
  root->grad_data()[0] = T(1);
  for (std::size_t i = root->tape_index + 1; i-- > 0;) {
    Node<T>& n = *nodes[i];
    if (n.grad.empty()) continue;
    n.backward(n);
  }
}

// Gradient of a scalar `out` with respect to `x`, returned as a recorded
// tensor so that functions of it can be differentiated again (w.r.t. any
// leaf other than x that the path from x to out touches).
template <class T>
Tensor<T> input_gradient(const Tensor<T>& out, const Tensor<T>& x) {
  if (out.numel() != 1) throw RankError("input_gradient: output must be scalar, got " + shape_str(out.shape()));
  Node<T>* root = out.node();
  Tape<T>* tape = root->tape;
  if (tape == nullptr || tape != Tape<T>::current())
    throw Error("input_gradient: output must be recorded on the active tape");
  const std::size_t last = root->tape_index;

  // Nodes that depend on x, in tape order.
  std::unordered_set<const Node<T>*> dependent{x.node()};
  for (std::size_t i = (x.node()->tape == tape ? x.node()->tape_index + 1 : 0); i <= last; ++i) {
    const Node<T>* n = tape->nodes()[i].get();
    for (const auto& p : n->parents)
      if (dependent.count(p.get())) {
        dependent.insert(n);
        break;
      }
  }
  if (!dependent.count(root)) return Tensor<T>::zeros(x.shape());

  std::unordered_map<const Node<T>*, Tensor<T>> grads;
  grads.emplace(root, Tensor<T>::filled(root->shape, T(1)));
  for (std::size_t i = last + 1; i-- > 0;) {
    std::shared_ptr<Node<T>> n = tape->nodes()[i];
    auto it = grads.find(n.get());
    if (it == grads.end()) continue;
    if (!n->backward_graph) throw DoubleBackwardUnsupported(n->op);
    std::vector<bool> need(n->parents.size());
    for (std::size_t j = 0; j < need.size(); ++j) need[j] = dependent.count(n->parents[j].get()) > 0;
    const Tensor<T> g = it->second;
    std::vector<Tensor<T>> pg = n->backward_graph(*n, g, need);
    for (std::size_t j = 0; j < need.size(); ++j) {
      if (!need[j]) continue;
      const Node<T>* p = n->parents[j].get();
      auto pit = grads.find(p);
      if (pit == grads.end())
        grads.emplace(p, pg[j]);
      else
        pit->second = add(pit->second, pg[j]);
    }
    if (n.get() != x.node()) grads.erase(n.get());
  }
  auto it = grads.find(x.node());
  return it == grads.end() ? Tensor<T>::zeros(x.shape()) : it->second;
}

// Storage of every gradient-requiring leaf that `out` was computed from.
template <class T>
std::unordered_set<const void*> leaf_storages(const Tensor<T>& out) {
  std::unordered_set<const void*> found;
  std::unordered_set<const Node<T>*> seen;
  std::vector<const Node<T>*> stack{out.node()};
  while (!stack.empty()) {
    const Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    if (n->leaf) {
      if (n->requires_grad) found.insert(n->value.data());
      continue;
    }
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  return found;
}

// Row-wise argmax of a 2-D tensor; ties go to the lowest index.
template <class T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& a) {
  detail::require(a.rank() == 2, [&] { return std::string("argmax_rows: expected rank 2, got " + shape_str(a.shape())); });
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = a.data().data() + r * cols;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
  return out;
}

}  // namespace twinlab::ad
