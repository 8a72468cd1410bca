#pragma once

#include <vector>

#include "mlcl/tensor.hpp"

namespace mlcl {

// Differentiable primitives. All ops validate shapes and throw
// std::invalid_argument naming the op and both shapes on mismatch.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> transpose(const Tensor<T>& a);

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& a, double c);

// rows(a) x cols(a) matrix plus a length-cols(a) vector broadcast over rows.
template <class T>
Tensor<T> add_bias_rows(const Tensor<T>& a, const Tensor<T>& bias);

// Vertically repeats the whole matrix `times` times.
template <class T>
Tensor<T> tile_rows(const Tensor<T>& a, int times);

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

// Slice along axis 0 (elements of a vector, rows of a matrix).
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len);

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int len);

// Rows offset, offset+stride, ... of a matrix whose row count is a multiple
// of stride. Used to pull per-sample rows out of batch-flattened matrices.
template <class T>
Tensor<T> take_rows_strided(const Tensor<T>& a, int stride, int offset);

template <class T>
Tensor<T> sum_all(const Tensor<T>& a);

template <class T>
Tensor<T> mean_all(const Tensor<T>& a);

template <class T>
Tensor<T> sum_squares(const Tensor<T>& a);

// Softmax over the last axis (rows of a matrix, the whole vector for 1-D).
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& a);

// Softmax over a chosen axis of a 1-D or 2-D tensor.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a);

template <class T>
Tensor<T> gelu(const Tensor<T>& a);

// Row-wise layer normalization with learned gain/shift (both length cols(a)).
template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                          double eps = 1e-5);

// Rows scaled to unit L2 norm. Rows with norm <= 1e-12 pass through
// unchanged and receive zero gradient.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a);

// Per-sample Gram matrix of a batch-flattened matrix: input (B*T) x D,
// output (B*T) x T where rows [i*T, (i+1)*T) hold X_i * X_i^T.
template <class T>
Tensor<T> batched_gram(const Tensor<T>& a, int batch);

// Scaled dot-product multi-head self attention over a batch-flattened token
// matrix. q, k, v are (B*T) x D with D divisible by num_heads.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               int num_heads, int batch);

// Value copy that blocks gradient flow.
template <class T>
Tensor<T> detach(const Tensor<T>& a);

// Two same-shape tensors interleaved into (numel, 2) columns.
template <class T>
Tensor<T> stack_pair(const Tensor<T>& a, const Tensor<T>& b);

// Inserts a shared row in front of every sample's row block:
// cls is 1 x D (or length D), patches is (B*S) x D, output (B*(S+1)) x D.
template <class T>
Tensor<T> prepend_class_token(const Tensor<T>& cls, const Tensor<T>& patches, int batch);

// Scales each block of block_rows consecutive rows by a fixed per-block
// factor. The factors are constants (no gradient into them).
template <class T>
Tensor<T> scale_row_blocks(const Tensor<T>& a, const std::vector<T>& factors, int block_rows);

}  // namespace mlcl
