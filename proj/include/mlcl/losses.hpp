#pragma once

#include "mlcl/tensor.hpp"

namespace mlcl {

template <class T>
struct BceResult {
  Tensor<T> loss;           // scalar
  bool all_masked = false;  // every position was masked out; loss is a detached zero
};

// Numerically stable binary cross-entropy on logits:
//   per position  max(z,0) - z*t + log(1 + exp(-|z|))
// reduced as the mean over unmasked positions. `class_mask`, when given, is a
// binary vector over the class (last) axis; masked classes contribute exactly
// zero to both the value and the gradient. If every position is masked the
// result is a detached zero scalar with `all_masked` set.
template <class T>
BceResult<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets,
                             const Tensor<T>* class_mask = nullptr);

// Mean of squared differences over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// Binary cross-entropy in probability space against fixed binary targets,
// mean over all elements. Probabilities are clamped to [1e-6, 1-1e-6] to stay
// finite on saturated inputs; clamped positions receive zero gradient.
// Gradients flow into `probs` only (targets are stored constants).
template <class T>
Tensor<T> bce_probs_mean(const Tensor<T>& probs, const Tensor<T>& targets);

}  // namespace mlcl
