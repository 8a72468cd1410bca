#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlcl/optim.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/tensor.hpp"

namespace mlcl {

// Tiny pre-norm Vision Transformer configuration. The classification head
// always covers total_classes outputs; classes not yet introduced by the
// stream are masked in the losses, never removed from the head, so stored
// buffer logits keep a fixed width.
struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 96;
  int num_blocks = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  int total_classes = 25;
  double drop_path = 0.0;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }  // S
  int tokens() const { return num_patches() + 1; }     // S + 1, class token first
  int patch_dim() const { return patch_size * patch_size * channels; }
  int image_dim() const { return channels * image_size * image_size; }

  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

// Per-batch forward result. Trace matrices are the residual-stream outputs of
// each block (pre-norm of the next block), batch-flattened to (B*(S+1)) x D.
template <class T>
struct VitForward {
  Tensor<T> logits;               // B x total_classes
  std::vector<Tensor<T>> traces;  // num_blocks entries when collected
};

template <class T>
class Vit {
 public:
  Vit(const ViTConfig& config, std::uint64_t init_seed);

  const ViTConfig& config() const { return config_; }

  // Stable-order parameter access (the checkpoint and optimizer order).
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>* find_parameter(const std::string& name);

  // images: B x (channels*image_size*image_size), row-major channel planes.
  // train=true enables drop-path when configured (drop_rng required then).
  VitForward<T> forward(const Tensor<T>& images, bool collect_traces, bool train,
                        Rng* drop_rng = nullptr) const;

  // Deterministic no-graph forward (logits only).
  Tensor<T> logits_eval(const Tensor<T>& images) const;

  // Token embedding before any block: class token prepended, positional
  // embeddings added; (B*(S+1)) x D.
  Tensor<T> embed(const Tensor<T>& images) const;

  // Deep copy. clone_into_teacher additionally freezes every parameter and
  // drops requires_grad so the teacher never joins a graph.
  Vit clone() const;
  Vit clone_into_teacher() const;

  bool all_frozen() const;

  // Re-initializes the classification head for a new class count; all other
  // parameters are untouched.
  void replace_head(int total_classes, Rng& rng);

  // FNV-1a checksum over all parameter values, in parameter order.
  std::uint64_t params_checksum() const;

  // Sum of |g| over every parameter gradient buffer (freeze audits).
  double grad_abs_sum() const;

 private:
  Vit() = default;

  struct Block {
    Parameter<T> ln1_gamma, ln1_beta;
    Parameter<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter<T> ln2_gamma, ln2_beta;
    Parameter<T> w1, b1, w2, b2;
  };

  Tensor<T> extract_patches(const Tensor<T>& images) const;

  ViTConfig config_;
  Parameter<T> patch_weight_, patch_bias_;
  Parameter<T> cls_token_, pos_embed_;
  std::vector<Block> blocks_;
  Parameter<T> ln_f_gamma_, ln_f_beta_;
  Parameter<T> head_weight_, head_bias_;
};

// Binary checkpoint container: config plus named parameter arrays.
template <class T>
void save_checkpoint(const Vit<T>& model, const std::string& path);

// Rebuilds the model from the stored config. The expected-config overload
// rejects a checkpoint whose config differs.
template <class T>
Vit<T> load_checkpoint(const std::string& path);
template <class T>
Vit<T> load_checkpoint(const std::string& path, const ViTConfig& expected);

using VitF = Vit<float>;

}  // namespace mlcl
