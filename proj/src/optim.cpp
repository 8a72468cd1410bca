#include "mlcl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mlcl {

template <class T>
double grad_global_norm(const std::vector<Parameter<T>*>& params) {
  double sq = 0.0;
  for (const Parameter<T>* p : params) {
    if (p->frozen) continue;
    for (T g : p->value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <class T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr,
              std::optional<double> clip_norm) {
  // Validate every gradient before touching any parameter.
  for (const Parameter<T>* p : params) {
    if (p->frozen) continue;
    for (T g : p->value.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("sgd_step: non-finite gradient in parameter '" + p->name + "'");
      }
    }
  }
  double scale = 1.0;
  if (clip_norm.has_value()) {
    if (!(*clip_norm > 0.0)) {
      throw std::invalid_argument("sgd_step: clip_norm must be positive");
    }
    const double norm = grad_global_norm(params);
    if (norm > *clip_norm) scale = *clip_norm / norm;
  }
  const double step = lr * scale;
  for (Parameter<T>* p : params) {
    if (p->frozen) continue;
    auto vals = p->value.values_mut();
    const auto grads = p->value.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vals[i] -= static_cast<T>(step * static_cast<double>(grads[i]));
    }
    p->value.zero_grad();
  }
}

template struct Parameter<float>;
template struct Parameter<double>;
template double grad_global_norm<float>(const std::vector<Parameter<float>*>&);
template double grad_global_norm<double>(const std::vector<Parameter<double>*>&);
template void sgd_step<float>(const std::vector<Parameter<float>*>&, double,
                              std::optional<double>);
template void sgd_step<double>(const std::vector<Parameter<double>*>&, double,
                               std::optional<double>);

}  // namespace mlcl
