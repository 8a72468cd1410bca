#pragma once

// Experiment orchestration: teacher pretraining, total-loss assembly with a
// per-term breakdown, the per-task training loop, snapshot/resume, and the
// run artifacts (results_matrix.csv, summary.json, checkpoints).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mlcl/benchmark.hpp"
#include "mlcl/config.hpp"
#include "mlcl/metrics.hpp"
#include "mlcl/rehearsal.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/scad.hpp"
#include "mlcl/tensor.hpp"
#include "mlcl/vit.hpp"

namespace mlcl {

// One training batch from the current task's stream.
template <class T>
struct StreamBatch {
  Tensor<T> images;  // B x image_dim, constant
  Tensor<T> labels;  // B x C multi-hot over the stream-visible labels
};

// The assembled objective and its logged decomposition. Each field is the
// weighted summand as it enters the total (weight times raw term); inactive
// terms are exactly 0. The summands recombine to the total within 1e-6.
template <class T>
struct LossBreakdown {
  Tensor<T> total;
  double clf = 0.0;
  double er = 0.0;      // beta * replay classification
  double der = 0.0;     // alpha * replay logit distillation
  double fp = 0.0;      // lambda_fp * attention distillation
  double fp_rep = 0.0;  // lambda_fp_rep * adapter-mask replay
  double sum() const { return clf + er + der + fp + fp_rep; }
};

// Assembles the method's objective on one stream batch plus one replay
// batch. Which terms are active follows the method kind: finetune-style
// methods use the classification term only; er adds the replay
// classification term; derpp_ace adds replay logit distillation; scad adds
// masked attention distillation and adapter-mask replay; scad_no_masks
// distills with all-ones masks and no mask replay. The stream-batch
// classification loss is restricted to the batch's positive classes when
// the method's ACE flag is set, and to all seen classes otherwise.
//
// teacher/adapters are required (and used) only by the distillation
// methods; gumbel_rng drives mask sampling during training; drop_rng is
// needed only when the backbone uses stochastic depth. Requesting a
// buffer-dependent term with buffer capacity 0 is rejected; an *empty*
// buffer batch (buffer still filling) makes the replay terms zero.
template <class T>
LossBreakdown<T> total_loss(const MethodSpec& method, const StreamBatch<T>& stream_batch,
                            const std::vector<const BufferEntry<T>*>& buffer_batch,
                            Vit<T>& student, const Vit<T>* teacher,
                            const std::vector<Adapter<T>*>& adapters,
                            const std::vector<int>& distill_layers,
                            const std::vector<int>& seen_classes, Rng* gumbel_rng,
                            Rng* drop_rng);

struct PretrainReport {
  double untrained_pwjs = 0.0;  // pretext validation score before training
  double trained_pwjs = 0.0;    // and after
};

template <class T>
struct PretrainResult {
  Vit<T> student;  // pretext-pretrained backbone with a fresh stream head
  Vit<T> teacher;  // frozen clone of the student at hand-off
  PretrainReport report;

  // Deep copy, so one pretraining can seed several experiments. The teacher
  // copy is re-frozen, preserving the no-grad invariant.
  PretrainResult clone() const {
    return {student.clone(), teacher.clone_into_teacher(), report};
  }
};

// Pretrains a backbone on the pretext task (classes disjoint from the
// stream by construction; overlap is rejected), re-initializes the head for
// the stream's label space, and freezes a teacher clone. Every method
// starts the stream from this same initialization; only the distillation
// methods keep the teacher.
template <class T>
PretrainResult<T> pretrain_teacher(const ExperimentConfig& config, std::uint64_t seed);

// Guard used by pretrain_teacher: two render identities collide when they
// agree on shape family, hue, and texture.
bool render_specs_overlap(const std::vector<RenderSpec>& stream_specs,
                          const std::vector<RenderSpec>& pretext_specs);

// Per-step log row: the weighted loss terms of one optimization step.
struct StepLog {
  int task = 0;
  double clf = 0.0, er = 0.0, der = 0.0, fp = 0.0, fp_rep = 0.0, total = 0.0;
};

// One experiment: a stream, a pretrained student (plus frozen teacher and
// adapters when the method distills), an optional replay buffer, and the
// growing result matrix. Tasks run strictly in order; after each task the
// model is evaluated on every task seen so far (one result-matrix row).
template <class T>
class Experiment {
 public:
  Experiment(const ExperimentConfig& config, std::uint64_t seed);

  // Starts from a caller-supplied pretrained initialization instead of
  // pretraining in the constructor. Equivalent to the two-argument form when
  // init came from pretrain_teacher(config, seed); lets a sweep that varies
  // only [method] fields share one pretraining per seed, since pretraining
  // reads nothing from [method] except batch_size. The caller is responsible
  // for that match — pass init.clone() to reuse a result across experiments.
  Experiment(const ExperimentConfig& config, std::uint64_t seed, PretrainResult<T>&& init);

  // Rebuilds an experiment from a task-boundary snapshot written by
  // save_snapshot. The config and seed must match the snapshot's.
  static Experiment resume_from(const ExperimentConfig& config, std::uint64_t seed,
                                const std::string& snapshot_path);

  const ExperimentConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const TaskStream<T>& stream() const { return stream_; }
  int total_tasks() const { return static_cast<int>(stream_.tasks.size()); }
  int completed_tasks() const { return completed_; }
  bool finished() const { return completed_ == total_tasks(); }

  // Trains on the given task (must be the next one in order: out-of-order
  // task ids are rejected) and evaluates row task_id of the result matrix.
  void run_task(const TaskSpec<T>& task);
  void run_next_task();
  void run_all();

  const ResultMatrix& results() const { return results_; }
  double final_average() const;             // AR_f; requires a finished run
  std::optional<double> forgetting() const;  // FG_f; empty for 1-task streams

  const PretrainReport& pretrain_report() const { return pretrain_report_; }
  const std::vector<StepLog>& loss_log() const { return loss_log_; }
  const std::vector<double>& task_seconds() const { return task_seconds_; }

  Vit<T>& student() { return student_; }
  const Vit<T>& student() const { return student_; }
  bool has_teacher() const { return teacher_.has_value(); }
  const Vit<T>& teacher() const { return *teacher_; }
  double teacher_grad_abs_sum() const;
  std::uint64_t teacher_checksum() const;
  std::vector<Adapter<T>>& adapters() { return adapters_; }
  bool has_buffer() const { return buffer_.has_value(); }
  const ReplayBuffer<T>& buffer() const { return *buffer_; }

  // Task-boundary snapshot: everything needed to continue the run
  // bit-exactly (models, adapters, buffer with its reservoir rng, result
  // matrix, logs). Bound to (config, seed) by checksum.
  void save_snapshot(const std::string& path) const;

 private:
  // Untrained models for the resume path; load_snapshot overwrites them.
  static PretrainResult<T> raw_init(const ExperimentConfig& config, std::uint64_t seed);
  void load_snapshot(const std::string& path);

  StreamBatch<T> gather_batch(const std::vector<Sample<T>>& pool,
                              const std::vector<int>& order, std::size_t begin,
                              std::size_t end) const;
  void insert_batch_into_buffer(const TaskSpec<T>& task, const std::vector<Sample<T>>& pool,
                                const std::vector<int>& order, std::size_t begin,
                                std::size_t end);
  void evaluate_row(int tasks_done);
  std::vector<Parameter<T>*> trainable_parameters();
  std::vector<Adapter<T>*> adapter_pointers();

  ExperimentConfig config_;
  std::uint64_t seed_ = 0;
  TaskStream<T> stream_;
  std::vector<int> distill_layers_;
  Vit<T> student_;
  std::optional<Vit<T>> teacher_;
  std::vector<Adapter<T>> adapters_;
  std::optional<ReplayBuffer<T>> buffer_;
  Rng reservoir_rng_;
  std::int64_t visit_counter_ = 0;
  int completed_ = 0;
  ResultMatrix results_;
  PretrainReport pretrain_report_;
  std::vector<StepLog> loss_log_;
  std::vector<double> task_seconds_;
};

// Everything a finished run reports. The deterministic fields (matrix CSV,
// AR_f, FG_f, loss curves) are bit-reproducible from (config, seed);
// wall-clock times are informational.
struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_text;  // canonical serialization
  double ar_f = 0.0;
  std::optional<double> fg_f;
  std::string results_csv;
  PretrainReport pretrain;
  std::vector<StepLog> loss_log;
  std::vector<double> task_seconds;
  std::string out_dir;  // empty when nothing was written
};

// Runs one seed end to end and writes results_matrix.csv, summary.json,
// per-task snapshots under checkpoints/, and the final student checkpoint
// into out_dir. With resume=true, continues from the latest snapshot in
// out_dir if one exists. A directory that already holds results_matrix.csv
// is rejected (result files are write-once). An empty out_dir runs without
// writing any artifacts.
template <class T>
RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                         const std::string& out_dir, bool resume = false);

// Mean and sample standard deviation (n-1 denominator; 0 for n=1).
struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};
MeanStd mean_and_std(const std::vector<double>& values);

// Convenience for repeated seeds: runs each seed (artifacts under
// out_base/seed_<s> when out_base is nonempty) and reports AR_f as
// mean +/- sample standard deviation.
template <class T>
struct MultiSeedResult {
  std::vector<RunRecord> runs;
  MeanStd ar_f;
  MeanStd fg_f;  // over runs that define it
};
template <class T>
MultiSeedResult<T> run_seeds(const ExperimentConfig& config,
                             const std::vector<std::uint64_t>& seeds,
                             const std::string& out_base);

// Saturates every adapter so each mask bit is 1 regardless of sampled
// noise; with this in place the masked distillation equals the unmasked
// one bit for bit (the mask-ablation identity).
template <class T>
void force_adapters_to_ones(std::vector<Adapter<T>>& adapters);

// PWJS of a model on every task's test split, with predictions and ground
// truth both restricted to the labels introduced through the full stream
// (the final-row protocol). One score per task, in task order.
template <class T>
std::vector<double> evaluate_tasks(const Vit<T>& model, const TaskStream<T>& stream,
                                   double threshold, int eval_batch);

}  // namespace mlcl
