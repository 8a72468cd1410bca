#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "mlcl/rng.hpp"
#include "mlcl/scad.hpp"
#include "mlcl/tensor.hpp"
#include "mlcl/vit.hpp"

namespace mlcl {

// One buffered training example. Everything is copied by value at insertion
// time and never mutated afterwards: the sample is the non-augmented image,
// the logits are the student's deterministic (eval-mode) outputs at insertion,
// and the mask record holds the adapter bits recorded at the same moment.
template <class T>
struct BufferEntry {
  std::vector<T> sample;        // flattened image, length channels*H*W
  std::vector<T> label;         // multi-hot over all classes, strictly 0/1
  std::vector<T> logits;        // length equals label length (fixed head)
  MaskRecord<T> masks;          // per-layer hard bits; empty when unused
  std::int64_t stream_index = 0;  // 0-based count of examples seen at insert
  int task_id = 0;
};

// Fixed-capacity replay memory filled by reservoir sampling (Vitter's
// Algorithm R): the first B insertions are appended; afterwards the n-th
// insertion (0-based count n of examples already seen) draws j uniform in
// [0, n] and replaces slot j when j < B. Every prefix item therefore sits in
// the buffer with probability exactly B/n.
//
// Single writer (the training loop); readers may hold entry pointers between
// writes — pointers are invalidated by the next insert or load.
template <class T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity);

  int capacity() const { return capacity_; }
  std::int64_t seen_count() const { return seen_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const BufferEntry<T>& entry(std::size_t i) const { return entries_.at(i); }

  // Reservoir insertion. The fill phase consumes no randomness; each later
  // insertion consumes exactly one draw. Rejects malformed entries (labels
  // not strictly 0/1, or logits/label width mismatch).
  void insert(BufferEntry<T> entry, Rng& rng);

  // Uniform batch: without replacement when k <= size(), with replacement
  // otherwise. An empty buffer (or k <= 0) yields an empty batch; replay
  // losses on an empty batch are zero by contract.
  std::vector<const BufferEntry<T>*> sample_batch(int k, Rng& rng) const;

  // Snapshot container (entries, capacity, seen count, and the reservoir rng
  // state) sufficient to resume a run bit-exactly.
  void save(std::ostream& os, const Rng& reservoir_rng) const;
  static ReplayBuffer<T> load(std::istream& is, Rng& reservoir_rng);

 private:
  int capacity_ = 0;
  std::int64_t seen_ = 0;
  std::vector<BufferEntry<T>> entries_;
};

enum class AceSource { kStream, kBuffer };

// Asymmetric class masking: stream batches restrict the classification loss
// to the union of classes positive in the batch itself; buffer batches use
// every class seen so far. Returns a 1 x num_classes row of 0/1 flags.
template <class T>
Tensor<T> ace_class_mask(const Tensor<T>& batch_labels, const std::vector<int>& seen_classes,
                         int num_classes, AceSource source);

// Stack buffered fields into batch tensors (constants, no gradient).
template <class T>
Tensor<T> batch_images(const std::vector<const BufferEntry<T>*>& entries);
template <class T>
Tensor<T> batch_label_rows(const std::vector<const BufferEntry<T>*>& entries);
template <class T>
Tensor<T> batch_logit_rows(const std::vector<const BufferEntry<T>*>& entries);

// Replay classification loss: BCE-with-logits between `logits` and the stored
// labels, class-masked to all seen classes. Empty batch -> detached zero.
template <class T>
Tensor<T> loss_er_from_logits(const Tensor<T>& logits,
                              const std::vector<const BufferEntry<T>*>& entries,
                              const std::vector<int>& seen_classes);

// Logit-matching replay loss: MSE between `logits` and the stored logits over
// every class position. Empty batch -> detached zero.
template <class T>
Tensor<T> loss_der_from_logits(const Tensor<T>& logits,
                               const std::vector<const BufferEntry<T>*>& entries);

// Convenience wrappers that run the model on the buffered samples themselves.
template <class T>
Tensor<T> loss_er(Vit<T>& model, const std::vector<const BufferEntry<T>*>& entries,
                  const std::vector<int>& seen_classes, bool train = true,
                  Rng* drop_rng = nullptr);
template <class T>
Tensor<T> loss_der(Vit<T>& model, const std::vector<const BufferEntry<T>*>& entries,
                   bool train = true, Rng* drop_rng = nullptr);

}  // namespace mlcl
