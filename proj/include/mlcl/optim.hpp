#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mlcl/tensor.hpp"

namespace mlcl {

// A named trainable array. Frozen parameters are skipped by the optimizer and
// their gradient buffers are left untouched so freeze audits can inspect them.
template <class T>
struct Parameter {
  Tensor<T> value;
  std::string name;
  bool frozen = false;
};

// Plain SGD over the non-frozen parameters. When clip_norm is set, the global
// gradient vector (concatenation over the stepped parameters) is rescaled to
// at most clip_norm before the update. Gradients of stepped parameters are
// zeroed afterward. A NaN/Inf gradient anywhere rejects the whole step before
// any parameter is mutated.
template <class T>
void sgd_step(const std::vector<Parameter<T>*>& params, double lr,
              std::optional<double> clip_norm = std::nullopt);

// Global L2 norm of the gradients of the non-frozen parameters.
template <class T>
double grad_global_norm(const std::vector<Parameter<T>*>& params);

}  // namespace mlcl
