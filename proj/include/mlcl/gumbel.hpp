#pragma once

#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

enum class GumbelMode { kTrain, kEval };

template <class T>
struct GumbelResult {
  Tensor<T> hard_bits;  // length-n vector in {0,1}; straight-through gradient
  Tensor<T> keep_prob;  // length-n vector in [0,1]
};

// Binary Gumbel-Softmax over `logit_pairs` of shape (n, 2) with the fixed
// channel convention (drop = column 0, keep = column 1).
//
// Train: independent Gumbel(0,1) noise is added to both channels (drawn
// drop-then-keep per row, in row order), followed by a temperature softmax;
// keep_prob is the soft keep-channel probability and hard_bits thresholds it
// at 0.5 (equivalently, noisy-channel argmax; ties break toward keep). The
// gradient of hard_bits is defined as the gradient of keep_prob
// (straight-through). Eval: no noise, no rng consumption; hard_bits is the
// argmax of the raw logits with ties toward keep.
//
// soft_forward=true returns keep_prob itself in place of the thresholded
// bits, giving a fully smooth path for finite-difference verification.
//
// `rng` must be non-null in train mode; temperature must be positive.
template <class T>
GumbelResult<T> gumbel_binary(const Tensor<T>& logit_pairs, double temperature, GumbelMode mode,
                              Rng* rng, bool soft_forward = false);

}  // namespace mlcl
