#include "mlcl/gumbel.hpp"

#include "mlcl/ops.hpp"

namespace mlcl {

namespace {

// Forward: 1 where p >= 0.5, else 0. Backward: identity (straight-through).
template <class T>
Tensor<T> threshold_straight_through(const Tensor<T>& p) {
  Tensor<T> out = Tensor<T>::zeros(p.shape(), detail::wants_grad(p));
  const T* pv = p.values().data();
  T* ov = out.values_mut().data();
  for (std::size_t i = 0; i < p.size(); ++i) ov[i] = pv[i] >= T(0.5) ? T(1) : T(0);
  if (out.requires_grad()) {
    detail::attach(out, {p}, [p](TensorData<T>& o) {
      p.raw()->ensure_grad();
      T* g = p.raw()->grad.data();
      const T* og = o.grad.data();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += og[i];
    });
  }
  return out;
}

}  // namespace

template <class T>
GumbelResult<T> gumbel_binary(const Tensor<T>& logit_pairs, double temperature, GumbelMode mode,
                              Rng* rng, bool soft_forward) {
  if (logit_pairs.ndim() != 2 || logit_pairs.cols() != 2) {
    throw std::invalid_argument("gumbel_binary: expected (n, 2) logit pairs, got shape " +
                                shape_str(logit_pairs.shape()));
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("gumbel_binary: temperature must be positive, got " +
                                std::to_string(temperature));
  }
  const int n = logit_pairs.rows();

  // keep_prob = sigmoid(((l_keep + g_keep) - (l_drop + g_drop)) / temperature);
  // the noise enters only through the per-row difference g_keep - g_drop.
  Tensor<T> drop = reshape(slice_cols(logit_pairs, 0, 1), {n});
  Tensor<T> keep = reshape(slice_cols(logit_pairs, 1, 1), {n});
  Tensor<T> diff = sub(keep, drop);
  if (mode == GumbelMode::kTrain) {
    if (rng == nullptr) throw std::invalid_argument("gumbel_binary: train mode needs an rng");
    Tensor<T> noise = Tensor<T>::zeros({n}, false);
    auto nv = noise.values_mut();
    for (int i = 0; i < n; ++i) {
      const double g_drop = rng->gumbel();
      const double g_keep = rng->gumbel();
      nv[static_cast<std::size_t>(i)] = static_cast<T>(g_keep - g_drop);
    }
    diff = add(diff, noise);
  }
  Tensor<T> keep_prob = sigmoid(scale(diff, 1.0 / temperature));

  GumbelResult<T> result;
  result.keep_prob = keep_prob;
  result.hard_bits = soft_forward ? keep_prob : threshold_straight_through(keep_prob);
  return result;
}

template GumbelResult<float> gumbel_binary<float>(const Tensor<float>&, double, GumbelMode, Rng*,
                                                  bool);
template GumbelResult<double> gumbel_binary<double>(const Tensor<double>&, double, GumbelMode,
                                                    Rng*, bool);

}  // namespace mlcl
