#include "mlcl/rehearsal.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "mlcl/losses.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

constexpr char kBufferMagic[8] = {'M', 'L', 'C', 'L', 'B', 'U', 'F', '1'};

template <class T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
  if (!v.empty()) io::write_bytes(os, v.data(), v.size() * sizeof(T));
}

template <class T>
std::vector<T> read_vec(std::istream& is) {
  const auto n = io::read_pod<std::uint32_t>(is);
  if (n > (1u << 26)) throw std::runtime_error("buffer snapshot: vector too large");
  std::vector<T> v(n);
  if (n) io::read_bytes(is, v.data(), v.size() * sizeof(T));
  return v;
}

template <class T>
void validate_entry(const BufferEntry<T>& e) {
  for (T v : e.label) {
    if (!(v == T(0) || v == T(1))) {
      throw std::invalid_argument("ReplayBuffer::insert: label must be strictly 0/1-valued");
    }
  }
  if (e.logits.size() != e.label.size()) {
    throw std::invalid_argument("ReplayBuffer::insert: logits width must equal label width");
  }
}

}  // namespace

template <class T>
ReplayBuffer<T>::ReplayBuffer(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
  entries_.reserve(static_cast<std::size_t>(capacity));
}

template <class T>
void ReplayBuffer<T>::insert(BufferEntry<T> entry, Rng& rng) {
  validate_entry(entry);
  if (seen_ < capacity_) {
    entries_.push_back(std::move(entry));
  } else {
    const std::uint64_t j = rng.below(static_cast<std::uint64_t>(seen_) + 1);
    if (j < static_cast<std::uint64_t>(capacity_)) {
      entries_[static_cast<std::size_t>(j)] = std::move(entry);
    }
  }
  ++seen_;
}

template <class T>
std::vector<const BufferEntry<T>*> ReplayBuffer<T>::sample_batch(int k, Rng& rng) const {
  std::vector<const BufferEntry<T>*> out;
  if (k <= 0 || entries_.empty()) return out;
  const std::size_t n = entries_.size();
  out.reserve(static_cast<std::size_t>(k));
  if (static_cast<std::size_t>(k) <= n) {
    // Partial Fisher-Yates: uniform without replacement.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (int i = 0; i < k; ++i) {
      const std::size_t j =
          static_cast<std::size_t>(i) + rng.below(n - static_cast<std::size_t>(i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
      out.push_back(&entries_[idx[static_cast<std::size_t>(i)]]);
    }
  } else {
    for (int i = 0; i < k; ++i) out.push_back(&entries_[rng.below(n)]);
  }
  return out;
}

template <class T>
void ReplayBuffer<T>::save(std::ostream& os, const Rng& reservoir_rng) const {
  io::write_bytes(os, kBufferMagic, sizeof(kBufferMagic));
  io::write_pod<std::uint8_t>(os, io::dtype_tag<T>());
  io::write_pod<std::int32_t>(os, capacity_);
  io::write_pod<std::int64_t>(os, seen_);
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    write_vec(os, e.sample);
    write_vec(os, e.label);
    write_vec(os, e.logits);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e.masks.bits.size()));
    for (const auto& row : e.masks.bits) write_vec(os, row);
    io::write_pod<std::int64_t>(os, e.stream_index);
    io::write_pod<std::int32_t>(os, e.task_id);
  }
  std::ostringstream state;
  reservoir_rng.save(state);
  io::write_string(os, state.str());
}

template <class T>
ReplayBuffer<T> ReplayBuffer<T>::load(std::istream& is, Rng& reservoir_rng) {
  char magic[8];
  io::read_bytes(is, magic, sizeof(magic));
  if (!std::equal(magic, magic + 8, kBufferMagic)) {
    throw std::runtime_error("buffer snapshot: bad magic");
  }
  if (io::read_pod<std::uint8_t>(is) != io::dtype_tag<T>()) {
    throw std::runtime_error("buffer snapshot: element type mismatch");
  }
  const auto capacity = io::read_pod<std::int32_t>(is);
  const auto seen = io::read_pod<std::int64_t>(is);
  const auto count = io::read_pod<std::uint32_t>(is);
  ReplayBuffer<T> buf(capacity);
  if (count > static_cast<std::uint32_t>(capacity)) {
    throw std::runtime_error("buffer snapshot: entry count exceeds capacity");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    BufferEntry<T> e;
    e.sample = read_vec<T>(is);
    e.label = read_vec<T>(is);
    e.logits = read_vec<T>(is);
    const auto layers = io::read_pod<std::uint32_t>(is);
    e.masks.bits.reserve(layers);
    for (std::uint32_t l = 0; l < layers; ++l) e.masks.bits.push_back(read_vec<T>(is));
    e.stream_index = io::read_pod<std::int64_t>(is);
    e.task_id = io::read_pod<std::int32_t>(is);
    buf.entries_.push_back(std::move(e));
  }
  buf.seen_ = seen;
  std::istringstream state(io::read_string(is));
  reservoir_rng.load(state);
  return buf;
}

template <class T>
Tensor<T> ace_class_mask(const Tensor<T>& batch_labels, const std::vector<int>& seen_classes,
                         int num_classes, AceSource source) {
  if (num_classes <= 0) throw std::invalid_argument("ace_class_mask: num_classes must be positive");
  Tensor<T> mask = Tensor<T>::zeros({1, num_classes});
  auto m = mask.values_mut();
  if (source == AceSource::kBuffer) {
    for (int c : seen_classes) {
      if (c < 0 || c >= num_classes) {
        throw std::invalid_argument("ace_class_mask: seen class out of range");
      }
      m[static_cast<std::size_t>(c)] = T(1);
    }
    return mask;
  }
  if (batch_labels.cols() != num_classes) {
    throw std::invalid_argument("ace_class_mask: label width mismatch");
  }
  const auto vals = batch_labels.values();
  for (int r = 0; r < batch_labels.rows(); ++r) {
    for (int c = 0; c < num_classes; ++c) {
      if (vals[static_cast<std::size_t>(r) * num_classes + c] != T(0)) {
        m[static_cast<std::size_t>(c)] = T(1);
      }
    }
  }
  return mask;
}

namespace {

template <class T>
Tensor<T> stack_field(const std::vector<const BufferEntry<T>*>& entries,
                      const std::vector<T> BufferEntry<T>::*field, const char* what) {
  if (entries.empty()) throw std::invalid_argument(std::string("batch: empty entry list for ") + what);
  const std::size_t width = (entries.front()->*field).size();
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(entries.size()), static_cast<int>(width)});
  auto v = out.values_mut();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = entries[i]->*field;
    if (src.size() != width) {
      throw std::invalid_argument(std::string("batch: ragged ") + what + " widths");
    }
    std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> batch_images(const std::vector<const BufferEntry<T>*>& entries) {
  return stack_field<T>(entries, &BufferEntry<T>::sample, "samples");
}

template <class T>
Tensor<T> batch_label_rows(const std::vector<const BufferEntry<T>*>& entries) {
  return stack_field<T>(entries, &BufferEntry<T>::label, "labels");
}

template <class T>
Tensor<T> batch_logit_rows(const std::vector<const BufferEntry<T>*>& entries) {
  return stack_field<T>(entries, &BufferEntry<T>::logits, "logits");
}

template <class T>
Tensor<T> loss_er_from_logits(const Tensor<T>& logits,
                              const std::vector<const BufferEntry<T>*>& entries,
                              const std::vector<int>& seen_classes) {
  if (entries.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> labels = batch_label_rows(entries);
  Tensor<T> mask = ace_class_mask(labels, seen_classes, logits.cols(), AceSource::kBuffer);
  return bce_with_logits(logits, labels, &mask).loss;
}

template <class T>
Tensor<T> loss_der_from_logits(const Tensor<T>& logits,
                               const std::vector<const BufferEntry<T>*>& entries) {
  if (entries.empty()) return Tensor<T>::scalar(T(0));
  return mse(logits, batch_logit_rows(entries));
}

template <class T>
Tensor<T> loss_er(Vit<T>& model, const std::vector<const BufferEntry<T>*>& entries,
                  const std::vector<int>& seen_classes, bool train, Rng* drop_rng) {
  if (entries.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> logits = model.forward(batch_images(entries), false, train, drop_rng).logits;
  return loss_er_from_logits(logits, entries, seen_classes);
}

template <class T>
Tensor<T> loss_der(Vit<T>& model, const std::vector<const BufferEntry<T>*>& entries, bool train,
                   Rng* drop_rng) {
  if (entries.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> logits = model.forward(batch_images(entries), false, train, drop_rng).logits;
  return loss_der_from_logits(logits, entries);
}

#define MLCL_INSTANTIATE_REHEARSAL(T)                                                       \
  template class ReplayBuffer<T>;                                                           \
  template Tensor<T> ace_class_mask<T>(const Tensor<T>&, const std::vector<int>&, int,     \
                                       AceSource);                                          \
  template Tensor<T> batch_images<T>(const std::vector<const BufferEntry<T>*>&);            \
  template Tensor<T> batch_label_rows<T>(const std::vector<const BufferEntry<T>*>&);        \
  template Tensor<T> batch_logit_rows<T>(const std::vector<const BufferEntry<T>*>&);        \
  template Tensor<T> loss_er_from_logits<T>(const Tensor<T>&,                               \
                                            const std::vector<const BufferEntry<T>*>&,      \
                                            const std::vector<int>&);                       \
  template Tensor<T> loss_der_from_logits<T>(const Tensor<T>&,                              \
                                             const std::vector<const BufferEntry<T>*>&);    \
  template Tensor<T> loss_er<T>(Vit<T>&, const std::vector<const BufferEntry<T>*>&,         \
                                const std::vector<int>&, bool, Rng*);                       \
  template Tensor<T> loss_der<T>(Vit<T>&, const std::vector<const BufferEntry<T>*>&, bool,  \
                                 Rng*);

MLCL_INSTANTIATE_REHEARSAL(float)
MLCL_INSTANTIATE_REHEARSAL(double)

}  // namespace mlcl
