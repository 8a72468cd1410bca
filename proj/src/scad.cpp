#include "mlcl/scad.hpp"

#include <algorithm>

#include "mlcl/losses.hpp"
#include "mlcl/ops.hpp"

namespace mlcl {

namespace {

template <class T>
const Adapter<T>* find_adapter(const std::vector<Adapter<T>*>& adapters, int layer) {
  for (const Adapter<T>* a : adapters) {
    if (a != nullptr && a->layer_index() == layer) return a;
  }
  throw std::invalid_argument("loss_fp: no adapter for layer " + std::to_string(layer));
}

template <class T>
void check_layer_bounds(const std::vector<Tensor<T>>& traces_teacher,
                        const std::vector<Tensor<T>>& traces_student,
                        const std::vector<int>& layers) {
  if (layers.empty()) throw std::invalid_argument("loss_fp: empty layer set");
  for (int l : layers) {
    if (l < 0 || l >= static_cast<int>(traces_teacher.size()) ||
        l >= static_cast<int>(traces_student.size())) {
      throw std::invalid_argument("loss_fp: layer " + std::to_string(l) +
                                  " outside the collected traces");
    }
  }
}

}  // namespace

template <class T>
Tensor<T> correlation_map(const Tensor<T>& trace, int batch) {
  return batched_gram(l2_normalize_rows(trace), batch);
}

template <class T>
Tensor<T> class_attention(const Tensor<T>& corr, int batch) {
  if (corr.ndim() != 2 || batch < 1 || corr.rows() % batch != 0 ||
      corr.rows() / batch != corr.cols()) {
    throw std::invalid_argument("class_attention: expected (B*T) x T correlation blocks, got " +
                                shape_str(corr.shape()) + " with batch " + std::to_string(batch));
  }
  return take_rows_strided(corr, corr.cols(), 0);
}

template <class T>
Tensor<T> attention_distance(const Tensor<T>& r_teacher, const Tensor<T>& r_student) {
  if (r_teacher.shape() != r_student.shape()) {
    shape_error("attention_distance", r_teacher.shape(), r_student.shape());
  }
  if (r_teacher.ndim() != 2 || r_teacher.cols() < 2) {
    throw std::invalid_argument("attention_distance: expected B x (S+1) rows, got " +
                                shape_str(r_teacher.shape()));
  }
  const int s = r_teacher.cols() - 1;
  Tensor<T> t_slice = slice_cols(detach(r_teacher), 1, s);
  Tensor<T> s_slice = slice_cols(r_student, 1, s);
  return sub(t_slice, s_slice);
}

template <class T>
Adapter<T>::Adapter(int layer_index, int seq_len, double temperature)
    : layer_(layer_index), seq_(seq_len), temperature_(temperature) {
  if (seq_len < 2) throw std::invalid_argument("Adapter: sequence length must be at least 2");
  if (!(temperature > 0.0)) throw std::invalid_argument("Adapter: temperature must be positive");
  const std::string p = "adapter." + std::to_string(layer_index) + ".";
  w_drop_ = Parameter<T>{Tensor<T>::zeros({seq_len, seq_len}, true), p + "w_drop", false};
  b_drop_ = Parameter<T>{Tensor<T>::zeros({seq_len}, true), p + "b_drop", false};
  w_keep_ = Parameter<T>{Tensor<T>::zeros({seq_len, seq_len}, true), p + "w_keep", false};
  b_keep_ = Parameter<T>{Tensor<T>::zeros({seq_len}, true), p + "b_keep", false};
}

template <class T>
std::vector<Parameter<T>*> Adapter<T>::parameters() {
  return {&w_drop_, &b_drop_, &w_keep_, &b_keep_};
}

template <class T>
std::vector<const Parameter<T>*> Adapter<T>::parameters() const {
  auto mut = const_cast<Adapter<T>*>(this)->parameters();
  return std::vector<const Parameter<T>*>(mut.begin(), mut.end());
}

template <class T>
typename Adapter<T>::Masks Adapter<T>::forward(const Tensor<T>& r_rows, GumbelMode mode, Rng* rng,
                                               bool soft_forward) const {
  if (r_rows.ndim() != 2 || r_rows.cols() != seq_) {
    throw std::invalid_argument("Adapter::forward: expected B x " + std::to_string(seq_) +
                                " attention rows, got " + shape_str(r_rows.shape()));
  }
  const int b = r_rows.rows();
  Tensor<T> r = detach(r_rows);  // the adapter trains; its input never does
  Tensor<T> logit_drop = add_bias_rows(matmul(r, w_drop_.value), b_drop_.value);
  Tensor<T> logit_keep = add_bias_rows(matmul(r, w_keep_.value), b_keep_.value);
  Tensor<T> pairs = stack_pair(reshape(logit_drop, {b * seq_}), reshape(logit_keep, {b * seq_}));
  GumbelResult<T> g = gumbel_binary(pairs, temperature_, mode, rng, soft_forward);
  Masks m;
  m.hard_bits = reshape(g.hard_bits, {b, seq_});
  m.keep_prob = reshape(g.keep_prob, {b, seq_});
  return m;
}

template <class T>
Tensor<T> loss_fp(const std::vector<Tensor<T>>& traces_teacher,
                  const std::vector<Tensor<T>>& traces_student, int batch,
                  const std::vector<Adapter<T>*>& adapters, const std::vector<int>& layers,
                  GumbelMode mode, Rng* rng, bool soft_forward) {
  check_layer_bounds(traces_teacher, traces_student, layers);
  Tensor<T> total;
  for (int l : layers) {
    const Adapter<T>* adapter = find_adapter(adapters, l);
    const Tensor<T>& ft = traces_teacher[static_cast<std::size_t>(l)];
    const Tensor<T>& fs = traces_student[static_cast<std::size_t>(l)];
    Tensor<T> r_t = class_attention(correlation_map(ft, batch), batch);
    Tensor<T> r_s = class_attention(correlation_map(fs, batch), batch);
    Tensor<T> dist = attention_distance(r_t, r_s);  // B x S

    typename Adapter<T>::Masks masks = adapter->forward(r_t, mode, rng, soft_forward);
    Tensor<T> mask_tail = slice_cols(masks.hard_bits, 1, dist.cols());  // indices 1..S+1
    Tensor<T> masked = mul(mask_tail, dist);
    Tensor<T> layer_loss = scale(sum_squares(masked), 1.0 / batch);
    total = total.defined() ? add(total, layer_loss) : layer_loss;
  }
  return scale(total, 1.0 / static_cast<double>(layers.size()));
}

template <class T>
Tensor<T> loss_fp_unmasked(const std::vector<Tensor<T>>& traces_teacher,
                           const std::vector<Tensor<T>>& traces_student, int batch,
                           const std::vector<int>& layers) {
  check_layer_bounds(traces_teacher, traces_student, layers);
  Tensor<T> total;
  for (int l : layers) {
    const Tensor<T>& ft = traces_teacher[static_cast<std::size_t>(l)];
    const Tensor<T>& fs = traces_student[static_cast<std::size_t>(l)];
    Tensor<T> r_t = class_attention(correlation_map(ft, batch), batch);
    Tensor<T> r_s = class_attention(correlation_map(fs, batch), batch);
    Tensor<T> dist = attention_distance(r_t, r_s);
    Tensor<T> layer_loss = scale(sum_squares(dist), 1.0 / batch);
    total = total.defined() ? add(total, layer_loss) : layer_loss;
  }
  return scale(total, 1.0 / static_cast<double>(layers.size()));
}

template <class T>
std::vector<MaskRecord<T>> record_masks_from_traces(const std::vector<Tensor<T>>& traces_teacher,
                                                    int batch,
                                                    const std::vector<Adapter<T>*>& adapters,
                                                    const std::vector<int>& layers) {
  if (layers.empty()) throw std::invalid_argument("record_masks: empty layer set");
  NoGradGuard no_grad;
  std::vector<MaskRecord<T>> records(static_cast<std::size_t>(batch));
  for (auto& r : records) r.bits.reserve(layers.size());
  for (int l : layers) {
    if (l < 0 || l >= static_cast<int>(traces_teacher.size())) {
      throw std::invalid_argument("record_masks: layer " + std::to_string(l) +
                                  " outside the collected traces");
    }
    const Adapter<T>* adapter = find_adapter(adapters, l);
    Tensor<T> r_t = class_attention(correlation_map(traces_teacher[static_cast<std::size_t>(l)], batch),
                                    batch);
    typename Adapter<T>::Masks masks = adapter->forward(r_t, GumbelMode::kEval, nullptr);
    const int seq = masks.hard_bits.cols();
    for (int b = 0; b < batch; ++b) {
      std::vector<T> row(static_cast<std::size_t>(seq));
      for (int j = 0; j < seq; ++j) {
        row[static_cast<std::size_t>(j)] =
            masks.hard_bits.values()[static_cast<std::size_t>(b) * seq + j];
      }
      records[static_cast<std::size_t>(b)].bits.push_back(std::move(row));
    }
  }
  return records;
}

template <class T>
Tensor<T> loss_fp_replay(const Vit<T>& teacher, const std::vector<Adapter<T>*>& adapters,
                         const std::vector<int>& layers, const Tensor<T>& images,
                         const std::vector<const MaskRecord<T>*>& stored) {
  if (layers.empty()) throw std::invalid_argument("loss_fp_replay: empty layer set");
  const int b = images.rows();
  if (static_cast<int>(stored.size()) != b) {
    throw std::invalid_argument("loss_fp_replay: " + std::to_string(stored.size()) +
                                " mask records for " + std::to_string(b) + " samples");
  }
  const int seq = teacher.config().tokens();
  for (const MaskRecord<T>* rec : stored) {
    if (rec == nullptr || rec->bits.size() != layers.size()) {
      throw std::invalid_argument("loss_fp_replay: mask record does not cover the layer set");
    }
    for (const auto& row : rec->bits) {
      if (static_cast<int>(row.size()) != seq) {
        throw std::invalid_argument("loss_fp_replay: stored mask length " +
                                    std::to_string(row.size()) +
                                    " does not match sequence length " + std::to_string(seq));
      }
    }
  }

  // Teacher traces on the buffered samples; constants by construction.
  std::vector<Tensor<T>> traces;
  {
    NoGradGuard no_grad;
    traces = teacher.forward(images, true, false).traces;
  }

  Tensor<T> total;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const int l = layers[li];
    if (l < 0 || l >= static_cast<int>(traces.size())) {
      throw std::invalid_argument("loss_fp_replay: layer " + std::to_string(l) +
                                  " outside the teacher traces");
    }
    const Adapter<T>* adapter = find_adapter(adapters, l);
    Tensor<T> r_t;
    {
      NoGradGuard no_grad;
      r_t = class_attention(correlation_map(traces[static_cast<std::size_t>(l)], b), b);
    }
    typename Adapter<T>::Masks masks = adapter->forward(r_t, GumbelMode::kEval, nullptr);

    Tensor<T> targets = Tensor<T>::zeros({b, seq}, false);
    for (int bi = 0; bi < b; ++bi) {
      const auto& row = stored[static_cast<std::size_t>(bi)]->bits[li];
      for (int j = 0; j < seq; ++j) {
        targets.values_mut()[static_cast<std::size_t>(bi) * seq + j] =
            row[static_cast<std::size_t>(j)];
      }
    }
    Tensor<T> layer_loss = bce_probs_mean(masks.keep_prob, targets);
    total = total.defined() ? add(total, layer_loss) : layer_loss;
  }
  return scale(total, 1.0 / static_cast<double>(layers.size()));
}

#define MLCL_INSTANTIATE_SCAD(T)                                                               \
  template Tensor<T> correlation_map<T>(const Tensor<T>&, int);                                \
  template Tensor<T> class_attention<T>(const Tensor<T>&, int);                                \
  template Tensor<T> attention_distance<T>(const Tensor<T>&, const Tensor<T>&);                \
  template class Adapter<T>;                                                                   \
  template struct MaskRecord<T>;                                                               \
  template Tensor<T> loss_fp<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,  \
                                int, const std::vector<Adapter<T>*>&, const std::vector<int>&, \
                                GumbelMode, Rng*, bool);                                       \
  template Tensor<T> loss_fp_unmasked<T>(const std::vector<Tensor<T>>&,                        \
                                         const std::vector<Tensor<T>>&, int,                   \
                                         const std::vector<int>&);                             \
  template std::vector<MaskRecord<T>> record_masks_from_traces<T>(                             \
      const std::vector<Tensor<T>>&, int, const std::vector<Adapter<T>*>&,                     \
      const std::vector<int>&);                                                                \
  template Tensor<T> loss_fp_replay<T>(const Vit<T>&, const std::vector<Adapter<T>*>&,         \
                                       const std::vector<int>&, const Tensor<T>&,              \
                                       const std::vector<const MaskRecord<T>*>&);

MLCL_INSTANTIATE_SCAD(float)
MLCL_INSTANTIATE_SCAD(double)

#undef MLCL_INSTANTIATE_SCAD

}  // namespace mlcl
