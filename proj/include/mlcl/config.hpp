#pragma once

// Experiment configuration: the method registry, the plain-text config file
// format, and validation. A config file has four sections --
//
//   [stream]     what data the run sees (see StreamConfig)
//   [backbone]   the transformer dimensions
//   [method]     which continual-learning method and its hyperparameters
//   [optimizer]  learning rate, clipping, and pretraining schedule
//
// written as `key = value` lines with `#` comments. Unknown sections or
// keys, duplicated keys, unparsable values, and semantic violations are all
// collected and reported together, field by field, before any computation.

#include <cstdint>
#include <string>
#include <vector>

#include "mlcl/benchmark.hpp"
#include "mlcl/vit.hpp"

namespace mlcl {

enum class MethodKind {
  kJoint,
  kFinetune,
  kFinetuneAce,
  kEr,
  kErAce,
  kDerppAce,
  kScad,
  kScadNoMasks,
};

// Stable config-file names: joint, finetune, finetune_ace, er, er_ace,
// derpp_ace, scad, scad_no_masks.
const char* method_kind_name(MethodKind kind);
MethodKind method_kind_from_name(const std::string& name);

// Which machinery a method engages. Buffer methods replay from a reservoir
// buffer; ACE methods restrict the stream-batch classification loss to the
// classes positive in the batch; teacher methods distill class attention
// from a frozen pretrained teacher; only scad filters the distillation
// through learned adapter masks (scad_no_masks distills unfiltered).
bool method_uses_buffer(MethodKind kind);
bool method_uses_ace(MethodKind kind);
bool method_uses_teacher(MethodKind kind);
bool method_uses_adapters(MethodKind kind);
bool method_uses_er(MethodKind kind);   // replay classification term
bool method_uses_der(MethodKind kind);  // replay logit-distillation term

struct MethodSpec {
  MethodKind kind = MethodKind::kFinetune;

  // Loss-term weights. The defaults are starting points for tuning, not
  // tuned values; lambda_fp_rep is fixed to 0 for scad_no_masks.
  double alpha = 1.0;          // replay logit distillation
  double beta = 1.0;           // replay classification
  double lambda_fp = 0.5;      // masked attention distillation
  double lambda_fp_rep = 0.1;  // adapter-mask replay

  int buffer_capacity = 0;  // 0 for methods without a buffer
  int epochs = 5;           // per task
  int batch_size = 32;
  int replay_batch_size = 32;
  double gumbel_tau = 1.0;

  // Layers whose class attention is distilled; default every block.
  bool distill_all_layers = true;
  std::vector<int> distill_layers;

  double threshold = 0.5;  // prediction threshold on sigmoid outputs

  std::vector<int> resolved_layers(int num_blocks) const;
  void collect_errors(std::vector<std::string>& errors) const;
  void validate() const;  // throws listing every violation
};

// A MethodSpec with per-kind defaults applied (buffer capacity 200 for
// buffer methods, lambda_fp_rep 0 for scad_no_masks).
MethodSpec default_method_spec(MethodKind kind);

struct BackboneSettings {
  int patch_size = 8;
  int embed_dim = 96;
  int num_blocks = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  double drop_path = 0.0;
};

struct OptimizerConfig {
  double lr = 0.03;
  double clip_norm = 1.0;
  // One optimizer covers backbone and adapters; a separate adapter rate is
  // available but off by default (negative means "same as lr").
  double adapter_lr = -1.0;
  int pretrain_epochs = 10;
  double pretrain_lr = -1.0;  // negative means "same as lr"

  double effective_adapter_lr() const { return adapter_lr < 0 ? lr : adapter_lr; }
  double effective_pretrain_lr() const { return pretrain_lr < 0 ? lr : pretrain_lr; }
  void collect_errors(std::vector<std::string>& errors) const;
};

struct ExperimentConfig {
  StreamConfig stream;
  BackboneSettings backbone;
  MethodSpec method;
  OptimizerConfig optimizer;

  // Label-space size of the stream's hierarchy (supers + all subclasses).
  int total_classes() const;

  // The assembled transformer configuration; image size and channels come
  // from the stream section.
  ViTConfig vit_config(int total_classes) const;

  void collect_errors(std::vector<std::string>& errors) const;
  void validate() const;  // throws listing every violation
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical serialization with a fixed section and key order;
// parse_config_text(serialize_config(c)) reproduces c. Used to echo the
// config into run summaries and to bind snapshots to their run.
std::string serialize_config(const ExperimentConfig& config);

}  // namespace mlcl
