#include "mlcl/losses.hpp"

#include <cmath>

namespace mlcl {

namespace {

template <class T>
double stable_sigmoid(T z) {
  const double x = static_cast<double>(z);
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

template <class T>
BceResult<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets,
                             const Tensor<T>* class_mask) {
  if (logits.shape() != targets.shape()) shape_error("bce_with_logits", logits.shape(), targets.shape());
  const int cols = logits.cols();
  const int rows = cols > 0 ? static_cast<int>(logits.size()) / cols : 0;
  if (class_mask != nullptr && static_cast<int>(class_mask->size()) != cols) {
    shape_error("bce_with_logits", logits.shape(), class_mask->shape());
  }

  // Column keep flags plus the unmasked-position count.
  std::vector<char> keep(static_cast<std::size_t>(cols), 1);
  if (class_mask != nullptr) {
    const auto mv = class_mask->values();
    for (int j = 0; j < cols; ++j) keep[static_cast<std::size_t>(j)] = mv[j] != T(0);
  }
  std::size_t unmasked_cols = 0;
  for (char c : keep) unmasked_cols += c != 0;
  const std::size_t n = static_cast<std::size_t>(rows) * unmasked_cols;

  BceResult<T> result;
  if (n == 0) {
    result.loss = Tensor<T>::scalar(T(0), false);
    result.all_masked = true;
    return result;
  }

  const T* zv = logits.values().data();
  const T* tv = targets.values().data();
  double acc = 0.0;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      if (!keep[static_cast<std::size_t>(j)]) continue;
      const std::size_t idx = static_cast<std::size_t>(i) * cols + j;
      const double z = static_cast<double>(zv[idx]);
      const double t = static_cast<double>(tv[idx]);
      acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
  }
  Tensor<T> loss =
      Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)), detail::wants_grad(logits, targets));
  if (loss.requires_grad()) {
    const std::vector<char> keep_copy = keep;
    detail::attach(loss, {logits, targets}, [logits, targets, keep_copy, rows, cols, n](TensorData<T>& o) {
      const double scale = static_cast<double>(o.grad[0]) / static_cast<double>(n);
      const T* zv2 = logits.values().data();
      const T* tv2 = targets.values().data();
      if (logits.requires_grad()) logits.raw()->ensure_grad();
      if (targets.requires_grad()) targets.raw()->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          if (!keep_copy[static_cast<std::size_t>(j)]) continue;
          const std::size_t idx = static_cast<std::size_t>(i) * cols + j;
          if (logits.requires_grad()) {
            const double s = stable_sigmoid(zv2[idx]);
            logits.raw()->grad[idx] += static_cast<T>((s - static_cast<double>(tv2[idx])) * scale);
          }
          if (targets.requires_grad()) {
            targets.raw()->grad[idx] += static_cast<T>(-static_cast<double>(zv2[idx]) * scale);
          }
        }
      }
    });
  }
  result.loss = loss;
  return result;
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  if (a.size() == 0) throw std::invalid_argument("mse: empty tensors");
  const std::size_t n = a.size();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    acc += d * d;
  }
  Tensor<T> out =
      Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)), detail::wants_grad(a, b));
  if (out.requires_grad()) {
    detail::attach(out, {a, b}, [a, b, n](TensorData<T>& o) {
      const double scale = 2.0 * static_cast<double>(o.grad[0]) / static_cast<double>(n);
      const T* av2 = a.values().data();
      const T* bv2 = b.values().data();
      if (a.requires_grad()) {
        a.raw()->ensure_grad();
        T* g = a.raw()->grad.data();
        for (std::size_t i = 0; i < n; ++i)
          g[i] += static_cast<T>((static_cast<double>(av2[i]) - bv2[i]) * scale);
      }
      if (b.requires_grad()) {
        b.raw()->ensure_grad();
        T* g = b.raw()->grad.data();
        for (std::size_t i = 0; i < n; ++i)
          g[i] -= static_cast<T>((static_cast<double>(av2[i]) - bv2[i]) * scale);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> bce_probs_mean(const Tensor<T>& probs, const Tensor<T>& targets) {
  if (probs.shape() != targets.shape()) shape_error("bce_probs_mean", probs.shape(), targets.shape());
  if (probs.size() == 0) throw std::invalid_argument("bce_probs_mean: empty tensors");
  constexpr double kLo = 1e-6;
  constexpr double kHi = 1.0 - 1e-6;
  const std::size_t n = probs.size();
  const T* pv = probs.values().data();
  const T* tv = targets.values().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::min(std::max(static_cast<double>(pv[i]), kLo), kHi);
    const double t = static_cast<double>(tv[i]);
    acc += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  Tensor<T> out =
      Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)), detail::wants_grad(probs));
  if (out.requires_grad()) {
    detail::attach(out, {probs}, [probs, targets, n](TensorData<T>& o) {
      probs.raw()->ensure_grad();
      const double scale = static_cast<double>(o.grad[0]) / static_cast<double>(n);
      const T* pv2 = probs.values().data();
      const T* tv2 = targets.values().data();
      T* g = probs.raw()->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double p = static_cast<double>(pv2[i]);
        if (p <= kLo || p >= kHi) continue;  // clamp region: zero gradient
        const double t = static_cast<double>(tv2[i]);
        g[i] += static_cast<T>((p - t) / (p * (1.0 - p)) * scale);
      }
    });
  }
  return out;
}

template struct BceResult<float>;
template struct BceResult<double>;
template BceResult<float> bce_with_logits<float>(const Tensor<float>&, const Tensor<float>&,
                                                 const Tensor<float>*);
template BceResult<double> bce_with_logits<double>(const Tensor<double>&, const Tensor<double>&,
                                                   const Tensor<double>*);
template Tensor<float> mse<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> mse<double>(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> bce_probs_mean<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_probs_mean<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace mlcl
