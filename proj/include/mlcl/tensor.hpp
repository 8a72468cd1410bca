#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mlcl/rng.hpp"

namespace mlcl {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);
[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b);

namespace detail {
bool grad_enabled();
void set_grad_enabled(bool on);
}  // namespace detail

// RAII guard that disables graph construction. Used for eval-mode forwards
// and finite-difference probes.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::set_grad_enabled(false); }
  ~NoGradGuard() { detail::set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor;

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated on demand, same length as values
  bool requires_grad = false;

  // Reverse-mode graph: parents keep the inputs alive, backward distributes
  // this node's grad into the parents' grads.
  std::vector<Tensor<T>> parents;
  std::function<void(TensorData<T>&)> backward;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

// Lightweight handle over shared tensor storage. Values are treated as
// immutable once the tensor participates in a graph; values_mut() exists for
// initialization and test setup only.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.data_ = std::make_shared<TensorData<T>>();
    t.data_->shape = std::move(shape);
    t.data_->values.assign(shape_numel(t.data_->shape), T(0));
    t.data_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data_->values) v = value;
    return t;
  }

  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.data_ = std::make_shared<TensorData<T>>();
    t.data_->shape = std::move(shape);
    t.data_->values = std::move(values);
    t.data_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_values({1}, {value}, requires_grad);
  }

  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const int n = static_cast<int>(values.size());
    return from_values({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    const int r = static_cast<int>(rows.size());
    const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
    std::vector<T> vals;
    vals.reserve(static_cast<std::size_t>(r) * c);
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) {
        throw std::invalid_argument("Tensor::matrix: ragged rows");
      }
      vals.insert(vals.end(), row.begin(), row.end());
    }
    return from_values({r, c}, std::move(vals), requires_grad);
  }

  // Gaussian init, values drawn in row-major order.
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data_->values) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  // Normal draw clamped to two standard deviations, the usual transformer init.
  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data_->values) {
      double x = rng.normal() * stddev;
      if (x > 2.0 * stddev) x = 2.0 * stddev;
      if (x < -2.0 * stddev) x = -2.0 * stddev;
      v = static_cast<T>(x);
    }
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int ndim() const { return static_cast<int>(data_->shape.size()); }
  int dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_->values.size(); }

  // dim 0 for matrices, element count for vectors.
  int rows() const { return data_->shape.empty() ? 1 : data_->shape.front(); }
  // last dim.
  int cols() const { return data_->shape.empty() ? 1 : data_->shape.back(); }

  std::span<const T> values() const { return {data_->values.data(), data_->values.size()}; }

  // Initialization/test setup only; never mutate a tensor already in a graph.
  std::span<T> values_mut() { return {data_->values.data(), data_->values.size()}; }

  std::span<const T> grad() const {
    data_->ensure_grad();
    return {data_->grad.data(), data_->grad.size()};
  }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  void zero_grad() {
    if (!data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) +
                                  " elements, expected 1");
    }
    return data_->values[0];
  }

  // Deep value copy with no graph attached.
  Tensor clone_values(bool requires_grad = false) const {
    return from_values(shape(), std::vector<T>(data_->values), requires_grad);
  }

  // Reverse-mode backprop from a scalar root.
  void backward() {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::backward: root must be scalar, got shape " +
                                  shape_str(shape()));
    }
    if (!requires_grad()) return;

    // Reverse DFS post-order is a topological order of the DAG.
    std::vector<TensorData<T>*> order;
    std::unordered_set<TensorData<T>*> seen;
    struct Frame {
      TensorData<T>* node;
      std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({data_.get(), 0});
    seen.insert(data_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.node->parents.size()) {
        TensorData<T>* p = f.node->parents[f.next++].data_.get();
        if (p != nullptr && p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    data_->ensure_grad();
    data_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  TensorData<T>* raw() const { return data_.get(); }

 private:
  std::shared_ptr<TensorData<T>> data_;
};

namespace detail {

// Shared by all ops: marks the output as graph-recording when enabled and any
// input requires grad.
template <class T>
bool wants_grad(const Tensor<T>& a) {
  return grad_enabled() && a.requires_grad();
}

template <class T>
bool wants_grad(const Tensor<T>& a, const Tensor<T>& b) {
  return grad_enabled() && (a.requires_grad() || b.requires_grad());
}

template <class T, class Fn>
void attach(Tensor<T>& out, std::vector<Tensor<T>> parents, Fn&& fn) {
  out.raw()->parents = std::move(parents);
  out.raw()->backward = std::forward<Fn>(fn);
}

}  // namespace detail

}  // namespace mlcl
