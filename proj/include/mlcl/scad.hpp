#pragma once

#include <vector>

#include "mlcl/gumbel.hpp"
#include "mlcl/optim.hpp"
#include "mlcl/tensor.hpp"
#include "mlcl/vit.hpp"

namespace mlcl {

// Token-correlation map of a batch-flattened trace: rows are L2-normalized,
// then each sample's R = normalized * normalized^T. Input (B*T) x D, output
// (B*T) x T; each sample block is symmetric with unit diagonal.
template <class T>
Tensor<T> correlation_map(const Tensor<T>& trace, int batch);

// Row 0 of each sample's correlation map (the class token's correlation with
// every token, self-correlation included): (B*T) x T -> B x T.
template <class T>
Tensor<T> class_attention(const Tensor<T>& corr, int batch);

// Elementwise teacher-minus-student difference of the class-attention rows
// with the self-correlation entry dropped: B x (S+1) inputs -> B x S output.
// The teacher side is detached; gradients flow only into the student.
template <class T>
Tensor<T> attention_distance(const Tensor<T>& r_teacher, const Tensor<T>& r_student);

// Per-layer adapter: two affine maps (drop and keep channels) from the
// teacher's length-(S+1) class-attention vector to length-(S+1) channel
// logits, fed to the binary Gumbel-Softmax. Zero-initialized, so an untrained
// adapter emits all-ones masks in eval mode (ties break toward keep) and the
// distillation starts unfiltered.
template <class T>
class Adapter {
 public:
  Adapter(int layer_index, int seq_len, double temperature = 1.0);

  int layer_index() const { return layer_; }
  int seq_len() const { return seq_; }
  double temperature() const { return temperature_; }

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

  struct Masks {
    Tensor<T> hard_bits;  // B x (S+1), strictly binary, straight-through grad
    Tensor<T> keep_prob;  // B x (S+1)
  };

  // r_rows: B x (S+1) teacher class-attention rows. Detached internally; the
  // adapter parameters are the only trainable path. Gumbel noise is drawn per
  // row-major position, drop channel then keep channel.
  Masks forward(const Tensor<T>& r_rows, GumbelMode mode, Rng* rng,
                bool soft_forward = false) const;

 private:
  int layer_ = 0;
  int seq_ = 0;
  double temperature_ = 1.0;
  Parameter<T> w_drop_, b_drop_, w_keep_, b_keep_;
};

// Per-sample record of the hard masks of every distilled layer, written at
// buffer-insertion time and never refreshed.
template <class T>
struct MaskRecord {
  std::vector<std::vector<T>> bits;  // [layer position in the layer set][S+1]
};

// Feature-propagation loss: for each layer l in `layers`, the squared L2 norm
// of m^l[1:] (*) D^l averaged over the batch, then averaged over the layers.
// Masks come from the layer's adapter applied to the detached teacher
// attention rows. Requires one adapter per requested layer (matched by
// layer_index); anything else is rejected.
template <class T>
Tensor<T> loss_fp(const std::vector<Tensor<T>>& traces_teacher,
                  const std::vector<Tensor<T>>& traces_student, int batch,
                  const std::vector<Adapter<T>*>& adapters, const std::vector<int>& layers,
                  GumbelMode mode, Rng* rng, bool soft_forward = false);

// The same distillation objective with all-ones masks and no adapters (the
// masked version with every bit forced to one equals this exactly).
template <class T>
Tensor<T> loss_fp_unmasked(const std::vector<Tensor<T>>& traces_teacher,
                           const std::vector<Tensor<T>>& traces_student, int batch,
                           const std::vector<int>& layers);

// Deterministic (eval-mode) hard masks for a batch of teacher traces, one
// MaskRecord per sample. Used at buffer-insertion time.
template <class T>
std::vector<MaskRecord<T>> record_masks_from_traces(const std::vector<Tensor<T>>& traces_teacher,
                                                    int batch,
                                                    const std::vector<Adapter<T>*>& adapters,
                                                    const std::vector<int>& layers);

// Adapter-mask replay loss: recomputes teacher traces on the buffered
// (non-augmented) samples, runs the adapters deterministically, and takes the
// BCE between the current keep probabilities and the stored hard bits,
// averaged over layers and batch. Stored masks whose shape disagrees with the
// current layer set or sequence length are rejected.
template <class T>
Tensor<T> loss_fp_replay(const Vit<T>& teacher, const std::vector<Adapter<T>*>& adapters,
                         const std::vector<int>& layers, const Tensor<T>& images,
                         const std::vector<const MaskRecord<T>*>& stored);

}  // namespace mlcl
