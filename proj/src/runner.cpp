#include "mlcl/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <span>
#include <utility>

#include "json.hpp"

#include "mlcl/losses.hpp"
#include "mlcl/ops.hpp"
#include "mlcl/optim.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {

std::vector<int> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::vector<int> sorted_intersection(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

template <class T>
Tensor<T> gather_images(const std::vector<Sample<T>>& pool, const std::vector<int>& order,
                        std::size_t begin, std::size_t end, int image_dim) {
  const int b = static_cast<int>(end - begin);
  Tensor<T> images = Tensor<T>::zeros({b, image_dim});
  const std::span<T> v = images.values_mut();
  for (int i = 0; i < b; ++i) {
    const Sample<T>& s = pool[static_cast<std::size_t>(order[begin + static_cast<std::size_t>(i)])];
    if (static_cast<int>(s.image.size()) != image_dim) {
      throw std::invalid_argument("gather_images: sample image length " +
                                  std::to_string(s.image.size()) + " does not match image_dim " +
                                  std::to_string(image_dim));
    }
    std::copy(s.image.begin(), s.image.end(), v.begin() + static_cast<std::size_t>(i) * image_dim);
  }
  return images;
}

// Eval-mode logits for a sample list, batched; one row of doubles per sample.
template <class T>
std::vector<std::vector<double>> eval_logit_rows(const Vit<T>& model,
                                                 const std::vector<Sample<T>>& samples,
                                                 int eval_batch) {
  const int dim = model.config().image_dim();
  const int num_classes = model.config().total_classes;
  std::vector<std::vector<double>> rows;
  rows.reserve(samples.size());
  std::vector<int> ident(samples.size());
  std::iota(ident.begin(), ident.end(), 0);
  for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(eval_batch)) {
    const std::size_t end = std::min(begin + static_cast<std::size_t>(eval_batch), samples.size());
    Tensor<T> images = gather_images(samples, ident, begin, end, dim);
    Tensor<T> logits = model.logits_eval(images);
    const auto& lv = logits.values();
    for (std::size_t i = 0; i < end - begin; ++i) {
      rows.emplace_back(lv.begin() + static_cast<std::ptrdiff_t>(i) * num_classes,
                        lv.begin() + static_cast<std::ptrdiff_t>(i + 1) * num_classes);
    }
  }
  return rows;
}

// PWJS of a model on the pretext validation set (labels in pretext space).
template <class T>
double pretext_pwjs(const Vit<T>& model, const std::vector<Sample<T>>& test, int pretext_classes,
                    int eval_batch) {
  std::vector<int> introduced(static_cast<std::size_t>(pretext_classes));
  std::iota(introduced.begin(), introduced.end(), 0);
  const auto rows = eval_logit_rows(model, test, eval_batch);
  std::vector<PredictionSet> sets;
  sets.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    PredictionSet ps;
    ps.predicted = predict_labels(rows[i], introduced, 0.5);
    ps.truth = test[i].stream_labels;
    sets.push_back(std::move(ps));
  }
  return pwjs(sets);
}

template <class T>
TaskStream<T> make_stream_for(const ExperimentConfig& config) {
  TaskStream<T> stream = build_stream<T>(config.stream);
  if (config.method.kind == MethodKind::kJoint) return flatten_stream(stream);
  return stream;
}

constexpr char kSnapshotMagic[8] = {'M', 'L', 'C', 'L', 'R', 'U', 'N', '1'};

// Binds a snapshot to its (config, seed) pair via the canonical serialization.
std::uint64_t config_binding(const ExperimentConfig& config, std::uint64_t seed) {
  const std::string text = serialize_config(config);
  const std::uint64_t h = io::fnv1a(text.data(), text.size());
  return io::fnv1a(&seed, sizeof(seed), h);
}

template <class T>
void write_param_set(std::ostream& os, const std::vector<const Parameter<T>*>& params) {
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    io::write_string(os, p->name);
    io::write_tensor(os, p->value);
  }
}

template <class T>
void read_param_set(std::istream& is, const std::vector<Parameter<T>*>& params, const char* what) {
  const auto n = io::read_pod<std::uint32_t>(is);
  if (n != params.size()) {
    throw std::runtime_error(std::string("snapshot: ") + what + " stores " + std::to_string(n) +
                             " parameters, the model has " + std::to_string(params.size()));
  }
  for (Parameter<T>* p : params) {
    const std::string name = io::read_string(is);
    if (name != p->name) {
      throw std::runtime_error(std::string("snapshot: ") + what + " parameter '" + name +
                               "' does not match expected '" + p->name + "'");
    }
    Tensor<T> stored = io::read_tensor<T>(is);
    if (stored.shape() != p->value.shape()) {
      throw std::runtime_error(std::string("snapshot: ") + what + " parameter '" + name +
                               "' has a mismatched shape");
    }
    const std::span<const T> src = stored.values();
    std::copy(src.begin(), src.end(), p->value.values_mut().begin());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// total_loss

template <class T>
LossBreakdown<T> total_loss(const MethodSpec& method, const StreamBatch<T>& stream_batch,
                            const std::vector<const BufferEntry<T>*>& buffer_batch,
                            Vit<T>& student, const Vit<T>* teacher,
                            const std::vector<Adapter<T>*>& adapters,
                            const std::vector<int>& distill_layers,
                            const std::vector<int>& seen_classes, Rng* gumbel_rng,
                            Rng* drop_rng) {
  const MethodKind kind = method.kind;
  const std::string kind_name = method_kind_name(kind);
  if (stream_batch.images.ndim() != 2 || stream_batch.images.rows() < 1) {
    throw std::invalid_argument("total_loss: stream batch must be a non-empty B x image_dim matrix");
  }
  const int batch = stream_batch.images.rows();
  const int num_classes = student.config().total_classes;
  if (stream_batch.labels.ndim() != 2 || stream_batch.labels.rows() != batch ||
      stream_batch.labels.cols() != num_classes) {
    throw std::invalid_argument("total_loss: stream labels must be batch x num_classes");
  }
  if (seen_classes.empty()) {
    throw std::invalid_argument("total_loss: the seen-class set cannot be empty");
  }

  const bool buffered = method_uses_buffer(kind);
  if (!buffered && !buffer_batch.empty()) {
    throw std::invalid_argument("total_loss: " + kind_name + " takes no replay batch");
  }
  if (buffered && method.buffer_capacity <= 0) {
    throw std::invalid_argument("total_loss: " + kind_name +
                                " has buffer-dependent terms; buffer_capacity must be positive");
  }

  const bool wants_fp = method_uses_teacher(kind);
  if (wants_fp) {
    if (teacher == nullptr) {
      throw std::invalid_argument("total_loss: " + kind_name + " requires a teacher");
    }
    if (!teacher->all_frozen()) {
      throw std::invalid_argument("total_loss: the teacher must be fully frozen");
    }
    if (distill_layers.empty()) {
      throw std::invalid_argument("total_loss: distillation needs a non-empty layer set");
    }
  }
  if (method_uses_adapters(kind)) {
    if (adapters.size() != distill_layers.size()) {
      throw std::invalid_argument("total_loss: need one adapter per distilled layer");
    }
    if (method.lambda_fp != 0.0 && gumbel_rng == nullptr) {
      throw std::invalid_argument("total_loss: mask sampling requires a gumbel rng");
    }
  }

  // Zero-weight and inactive terms are skipped outright rather than added as
  // zeros, so a run with every auxiliary weight at zero optimizes exactly the
  // classification loss.
  const bool do_er = method_uses_er(kind) && method.beta != 0.0;
  const bool do_der = method_uses_der(kind) && method.alpha != 0.0;
  const bool do_fp = wants_fp && method.lambda_fp != 0.0;
  const bool do_fp_rep = kind == MethodKind::kScad && method.lambda_fp_rep != 0.0;

  LossBreakdown<T> out;

  // Stream forward; attention traces only when the method distills them.
  VitForward<T> fwd = student.forward(stream_batch.images, do_fp, /*train=*/true, drop_rng);

  // ACE methods restrict the stream classification loss to the batch's own
  // positive classes; everything else trains against all seen classes (the
  // same rule the buffer side always uses).
  const AceSource source = method_uses_ace(kind) ? AceSource::kStream : AceSource::kBuffer;
  Tensor<T> clf_mask = ace_class_mask(stream_batch.labels, seen_classes, num_classes, source);
  BceResult<T> clf = bce_with_logits(fwd.logits, stream_batch.labels, &clf_mask);
  Tensor<T> total = clf.loss;
  out.clf = static_cast<double>(clf.loss.item());

  // One shared forward pass over the buffered images serves both replay terms.
  std::optional<Tensor<T>> buffer_images;
  const auto buffered_images = [&]() -> const Tensor<T>& {
    if (!buffer_images) buffer_images = batch_images(buffer_batch);
    return *buffer_images;
  };

  if ((do_er || do_der) && !buffer_batch.empty()) {
    Tensor<T> replay_logits = student.forward(buffered_images(), false, true, drop_rng).logits;
    if (do_er) {
      Tensor<T> term = scale(loss_er_from_logits(replay_logits, buffer_batch, seen_classes),
                             method.beta);
      out.er = static_cast<double>(term.item());
      total = add(total, term);
    }
    if (do_der) {
      Tensor<T> term = scale(loss_der_from_logits(replay_logits, buffer_batch), method.alpha);
      out.der = static_cast<double>(term.item());
      total = add(total, term);
    }
  }

  if (do_fp) {
    std::vector<Tensor<T>> traces_teacher;
    {
      NoGradGuard ng;
      traces_teacher = teacher->forward(stream_batch.images, true, false, nullptr).traces;
    }
    Tensor<T> raw =
        kind == MethodKind::kScad
            ? loss_fp(traces_teacher, fwd.traces, batch, adapters, distill_layers,
                      GumbelMode::kTrain, gumbel_rng)
            : loss_fp_unmasked(traces_teacher, fwd.traces, batch, distill_layers);
    Tensor<T> term = scale(raw, method.lambda_fp);
    out.fp = static_cast<double>(term.item());
    total = add(total, term);
  }

  if (do_fp_rep && !buffer_batch.empty()) {
    std::vector<const MaskRecord<T>*> stored;
    stored.reserve(buffer_batch.size());
    for (const BufferEntry<T>* e : buffer_batch) stored.push_back(&e->masks);
    Tensor<T> term = scale(
        loss_fp_replay(*teacher, adapters, distill_layers, buffered_images(), stored),
        method.lambda_fp_rep);
    out.fp_rep = static_cast<double>(term.item());
    total = add(total, term);
  }

  out.total = total;
  return out;
}

// ---------------------------------------------------------------------------
// Teacher pretraining

bool render_specs_overlap(const std::vector<RenderSpec>& stream_specs,
                          const std::vector<RenderSpec>& pretext_specs) {
  for (const RenderSpec& a : stream_specs) {
    for (const RenderSpec& b : pretext_specs) {
      if (a.shape_family == b.shape_family && a.hue_index == b.hue_index &&
          a.texture_index == b.texture_index) {
        return true;
      }
    }
  }
  return false;
}

template <class T>
PretrainResult<T> pretrain_teacher(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  const StreamConfig& sc = config.stream;
  const LabelHierarchy h = generate_hierarchy(sc.superclasses, sc.subclasses_per_super);

  std::vector<RenderSpec> stream_specs;
  stream_specs.reserve(static_cast<std::size_t>(h.num_subclasses()));
  for (int s = 0; s < h.num_subclasses(); ++s) {
    stream_specs.push_back(render_spec_for_subclass(h, s, sc.pretext_classes));
  }
  std::vector<RenderSpec> pretext_specs;
  pretext_specs.reserve(static_cast<std::size_t>(sc.pretext_classes));
  for (int q = 0; q < sc.pretext_classes; ++q) {
    pretext_specs.push_back(render_spec_for_pretext(h, q, sc.pretext_classes));
  }
  if (render_specs_overlap(stream_specs, pretext_specs)) {
    throw std::invalid_argument(
        "pretrain_teacher: pretext rendering identities overlap the stream's label identities");
  }

  auto [train, test] = build_pretext_set<T>(h, sc);
  Vit<T> model(config.vit_config(sc.pretext_classes), Rng::derive(seed, "model-init"));

  const int eval_batch = config.method.batch_size;
  PretrainReport report;
  report.untrained_pwjs = pretext_pwjs(model, test, sc.pretext_classes, eval_batch);

  const auto params = model.parameters();
  const double lr = config.optimizer.effective_pretrain_lr();
  const std::optional<double> clip = config.optimizer.clip_norm;
  const int pretext = sc.pretext_classes;
  const int dim = sc.image_dim();
  Rng drop_rng(Rng::derive(seed, "pretrain-drop"));
  for (int epoch = 0; epoch < config.optimizer.pretrain_epochs; ++epoch) {
    Rng shuffle_rng(Rng::derive(seed, "pretrain-shuffle", static_cast<std::uint64_t>(epoch)));
    const std::vector<int> order = shuffled_indices(train.size(), shuffle_rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.method.batch_size)) {
      const std::size_t end =
          std::min(begin + static_cast<std::size_t>(config.method.batch_size), order.size());
      Tensor<T> images = gather_images(train, order, begin, end, dim);
      Tensor<T> targets = Tensor<T>::zeros({static_cast<int>(end - begin), pretext});
      const std::span<T> tv = targets.values_mut();
      for (std::size_t i = 0; i < end - begin; ++i) {
        const Sample<T>& s = train[static_cast<std::size_t>(order[begin + i])];
        for (int c : s.stream_labels) tv[i * static_cast<std::size_t>(pretext) + c] = T(1);
      }
      BceResult<T> res =
          bce_with_logits(model.forward(images, false, true, &drop_rng).logits, targets);
      res.loss.backward();
      sgd_step(params, lr, clip);
    }
  }
  report.trained_pwjs = pretext_pwjs(model, test, sc.pretext_classes, eval_batch);

  Rng head_rng(Rng::derive(seed, "head-init"));
  model.replace_head(config.total_classes(), head_rng);
  Vit<T> teacher = model.clone_into_teacher();
  return {std::move(model), std::move(teacher), report};
}

// ---------------------------------------------------------------------------
// Experiment

template <class T>
Experiment<T>::Experiment(const ExperimentConfig& config, std::uint64_t seed)
    : Experiment(config, seed, pretrain_teacher<T>(config, seed)) {}

template <class T>
Experiment<T>::Experiment(const ExperimentConfig& config, std::uint64_t seed,
                          PretrainResult<T>&& init)
    : config_(config),
      seed_(seed),
      stream_(make_stream_for<T>(config)),
      distill_layers_(config.method.resolved_layers(config.backbone.num_blocks)),
      student_(std::move(init.student)),
      reservoir_rng_(Rng::derive(seed, "reservoir")),
      results_(static_cast<int>(stream_.tasks.size())),
      pretrain_report_(init.report) {
  const MethodKind kind = config_.method.kind;
  if (method_uses_teacher(kind)) teacher_.emplace(std::move(init.teacher));
  if (method_uses_adapters(kind)) {
    adapters_.reserve(distill_layers_.size());
    const int seq = student_.config().tokens();
    for (int layer : distill_layers_) {
      adapters_.emplace_back(layer, seq, config_.method.gumbel_tau);
    }
  }
  if (method_uses_buffer(kind)) buffer_.emplace(config_.method.buffer_capacity);
}

template <class T>
PretrainResult<T> Experiment<T>::raw_init(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  Vit<T> student(config.vit_config(config.total_classes()), Rng::derive(seed, "model-init"));
  Vit<T> teacher = student.clone_into_teacher();
  return {std::move(student), std::move(teacher), PretrainReport{}};
}

template <class T>
Experiment<T> Experiment<T>::resume_from(const ExperimentConfig& config, std::uint64_t seed,
                                         const std::string& snapshot_path) {
  Experiment<T> exp(config, seed, raw_init(config, seed));
  exp.load_snapshot(snapshot_path);
  return exp;
}

template <class T>
void Experiment<T>::run_next_task() {
  if (finished()) throw std::logic_error("run_next_task: every task has already been run");
  run_task(stream_.tasks[static_cast<std::size_t>(completed_)]);
}

template <class T>
void Experiment<T>::run_all() {
  while (!finished()) run_next_task();
}

template <class T>
void Experiment<T>::run_task(const TaskSpec<T>& task) {
  if (finished()) throw std::logic_error("run_task: every task has already been run");
  const int expected = completed_ + 1;
  if (task.task_id != expected) {
    throw std::invalid_argument("run_task: tasks must run in order; got task " +
                                std::to_string(task.task_id) + ", expected task " +
                                std::to_string(expected));
  }
  if (task.train.empty()) {
    throw std::invalid_argument("run_task: task " + std::to_string(task.task_id) +
                                " has no training samples");
  }
  const auto t0 = std::chrono::steady_clock::now();

  const MethodSpec& method = config_.method;
  const std::vector<int> seen = stream_.introduced_through(task.task_id);

  const double lr = config_.optimizer.lr;
  const double adapter_lr = config_.optimizer.effective_adapter_lr();
  const std::optional<double> clip = config_.optimizer.clip_norm;
  const bool split_groups = !adapters_.empty() && adapter_lr != lr;
  std::vector<Parameter<T>*> main_params =
      split_groups ? student_.parameters() : trainable_parameters();
  std::vector<Parameter<T>*> adapter_params;
  if (split_groups) {
    for (Adapter<T>& a : adapters_) {
      for (Parameter<T>* p : a.parameters()) adapter_params.push_back(p);
    }
  }

  const std::vector<Adapter<T>*> adapter_ptrs = adapter_pointers();
  const Vit<T>* teacher = teacher_ ? &*teacher_ : nullptr;
  const auto task_tag = static_cast<std::uint64_t>(task.task_id);
  Rng gumbel_rng(Rng::derive(seed_, "task-gumbel", task_tag));
  Rng replay_rng(Rng::derive(seed_, "task-replay", task_tag));
  Rng drop_rng(Rng::derive(seed_, "task-drop", task_tag));

  for (int epoch = 0; epoch < method.epochs; ++epoch) {
    Rng shuffle_rng(Rng::derive(seed_, "task-shuffle",
                                (task_tag << 20) ^ static_cast<std::uint64_t>(epoch)));
    const std::vector<int> order = shuffled_indices(task.train.size(), shuffle_rng);
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(method.batch_size)) {
      const std::size_t end =
          std::min(begin + static_cast<std::size_t>(method.batch_size), order.size());

      StreamBatch<T> sb = gather_batch(task.train, order, begin, end);
      std::vector<const BufferEntry<T>*> replay;
      if (buffer_ && !buffer_->empty()) {
        replay = buffer_->sample_batch(method.replay_batch_size, replay_rng);
      }

      LossBreakdown<T> lb = total_loss(method, sb, replay, student_, teacher, adapter_ptrs,
                                       distill_layers_, seen, &gumbel_rng, &drop_rng);
      lb.total.backward();
      sgd_step(main_params, lr, clip);
      if (split_groups) sgd_step(adapter_params, adapter_lr, clip);

      loss_log_.push_back({task.task_id, lb.clf, lb.er, lb.der, lb.fp, lb.fp_rep,
                           static_cast<double>(lb.total.item())});

      if (buffer_) insert_batch_into_buffer(task, task.train, order, begin, end);
    }
  }

  evaluate_row(task.task_id);
  ++completed_;

  const auto t1 = std::chrono::steady_clock::now();
  task_seconds_.push_back(std::chrono::duration<double>(t1 - t0).count());
}

template <class T>
StreamBatch<T> Experiment<T>::gather_batch(const std::vector<Sample<T>>& pool,
                                           const std::vector<int>& order, std::size_t begin,
                                           std::size_t end) const {
  const int b = static_cast<int>(end - begin);
  const int num_classes = student_.config().total_classes;
  StreamBatch<T> batch{gather_images(pool, order, begin, end, student_.config().image_dim()),
                       Tensor<T>::zeros({b, num_classes})};
  const std::span<T> lv = batch.labels.values_mut();
  for (int i = 0; i < b; ++i) {
    const Sample<T>& s = pool[static_cast<std::size_t>(order[begin + static_cast<std::size_t>(i)])];
    for (int c : s.stream_labels) {
      lv[static_cast<std::size_t>(i) * num_classes + static_cast<std::size_t>(c)] = T(1);
    }
  }
  return batch;
}

template <class T>
void Experiment<T>::insert_batch_into_buffer(const TaskSpec<T>& task,
                                             const std::vector<Sample<T>>& pool,
                                             const std::vector<int>& order, std::size_t begin,
                                             std::size_t end) {
  const int b = static_cast<int>(end - begin);
  const int num_classes = student_.config().total_classes;
  Tensor<T> images = gather_images(pool, order, begin, end, student_.config().image_dim());

  // Buffered logits are the student's post-step eval-mode outputs on the
  // stored (non-augmented) samples.
  Tensor<T> logits = student_.logits_eval(images);
  const auto& logit_values = logits.values();

  std::vector<MaskRecord<T>> recorded;
  if (method_uses_adapters(config_.method.kind)) {
    NoGradGuard ng;
    const auto traces = teacher_->forward(images, true, false, nullptr).traces;
    recorded = record_masks_from_traces(traces, b, adapter_pointers(), distill_layers_);
  }

  for (int i = 0; i < b; ++i) {
    const Sample<T>& s = pool[static_cast<std::size_t>(order[begin + static_cast<std::size_t>(i)])];
    BufferEntry<T> entry;
    entry.sample = s.image;
    entry.label.assign(static_cast<std::size_t>(num_classes), T(0));
    for (int c : s.stream_labels) entry.label[static_cast<std::size_t>(c)] = T(1);
    entry.logits.assign(logit_values.begin() + static_cast<std::ptrdiff_t>(i) * num_classes,
                        logit_values.begin() + static_cast<std::ptrdiff_t>(i + 1) * num_classes);
    if (!recorded.empty()) entry.masks = std::move(recorded[static_cast<std::size_t>(i)]);
    entry.stream_index = visit_counter_++;
    entry.task_id = task.task_id;
    buffer_->insert(std::move(entry), reservoir_rng_);
  }
}

template <class T>
void Experiment<T>::evaluate_row(int tasks_done) {
  const std::vector<int> introduced = stream_.introduced_through(tasks_done);
  const double threshold = config_.method.threshold;
  const int eval_batch = config_.method.batch_size;
  for (int k = 1; k <= tasks_done; ++k) {
    const auto& test = stream_.tasks[static_cast<std::size_t>(k - 1)].test;
    const auto rows = eval_logit_rows(student_, test, eval_batch);
    std::vector<PredictionSet> sets;
    sets.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      PredictionSet ps;
      ps.predicted = predict_labels(rows[i], introduced, threshold);
      ps.truth = sorted_intersection(test[i].full_labels, introduced);
      sets.push_back(std::move(ps));
    }
    results_.set(tasks_done, k, pwjs(sets));
  }
}

template <class T>
double Experiment<T>::final_average() const {
  if (!finished()) throw std::logic_error("final_average: the run has not finished");
  return final_average_pwjs(results_);
}

template <class T>
std::optional<double> Experiment<T>::forgetting() const {
  if (!finished()) throw std::logic_error("forgetting: the run has not finished");
  if (total_tasks() < 2) return std::nullopt;
  return adjusted_forgetting(results_);
}

template <class T>
double Experiment<T>::teacher_grad_abs_sum() const {
  if (!teacher_) throw std::logic_error("teacher_grad_abs_sum: this method keeps no teacher");
  return teacher_->grad_abs_sum();
}

template <class T>
std::uint64_t Experiment<T>::teacher_checksum() const {
  if (!teacher_) throw std::logic_error("teacher_checksum: this method keeps no teacher");
  return teacher_->params_checksum();
}

template <class T>
std::vector<Parameter<T>*> Experiment<T>::trainable_parameters() {
  std::vector<Parameter<T>*> out = student_.parameters();
  for (Adapter<T>& a : adapters_) {
    for (Parameter<T>* p : a.parameters()) out.push_back(p);
  }
  return out;
}

template <class T>
std::vector<Adapter<T>*> Experiment<T>::adapter_pointers() {
  std::vector<Adapter<T>*> out;
  out.reserve(adapters_.size());
  for (Adapter<T>& a : adapters_) out.push_back(&a);
  return out;
}

template <class T>
void Experiment<T>::save_snapshot(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_snapshot: cannot open " + path);
  io::write_bytes(os, kSnapshotMagic, sizeof(kSnapshotMagic));
  io::write_pod<std::uint8_t>(os, io::dtype_tag<T>());
  io::write_pod<std::uint64_t>(os, config_binding(config_, seed_));
  io::write_pod<std::uint64_t>(os, seed_);
  io::write_pod<std::int32_t>(os, completed_);
  io::write_pod<std::int64_t>(os, visit_counter_);
  io::write_pod<double>(os, pretrain_report_.untrained_pwjs);
  io::write_pod<double>(os, pretrain_report_.trained_pwjs);

  io::write_pod<std::int32_t>(os, total_tasks());
  for (int j = 1; j <= completed_; ++j) {
    for (int k = 1; k <= j; ++k) io::write_pod<double>(os, results_.at(j, k));
  }

  io::write_pod<std::uint64_t>(os, loss_log_.size());
  for (const StepLog& row : loss_log_) {
    io::write_pod<std::int32_t>(os, row.task);
    io::write_pod<double>(os, row.clf);
    io::write_pod<double>(os, row.er);
    io::write_pod<double>(os, row.der);
    io::write_pod<double>(os, row.fp);
    io::write_pod<double>(os, row.fp_rep);
    io::write_pod<double>(os, row.total);
  }

  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(task_seconds_.size()));
  for (double s : task_seconds_) io::write_pod<double>(os, s);

  write_param_set<T>(os, student_.parameters());
  io::write_pod<std::uint8_t>(os, teacher_ ? 1 : 0);
  if (teacher_) write_param_set<T>(os, teacher_->parameters());

  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(adapters_.size()));
  for (const Adapter<T>& a : adapters_) {
    io::write_pod<std::int32_t>(os, a.layer_index());
    io::write_pod<std::int32_t>(os, a.seq_len());
    io::write_pod<double>(os, a.temperature());
    write_param_set<T>(os, a.parameters());
  }

  io::write_pod<std::uint8_t>(os, buffer_ ? 1 : 0);
  if (buffer_) buffer_->save(os, reservoir_rng_);
  if (!os) throw std::runtime_error("save_snapshot: write failed for " + path);
}

template <class T>
void Experiment<T>::load_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_snapshot: cannot open " + path);
  char magic[sizeof(kSnapshotMagic)];
  io::read_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kSnapshotMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_snapshot: " + path + " is not a run snapshot");
  }
  if (io::read_pod<std::uint8_t>(is) != io::dtype_tag<T>()) {
    throw std::runtime_error("load_snapshot: element type does not match this experiment");
  }
  if (io::read_pod<std::uint64_t>(is) != config_binding(config_, seed_)) {
    throw std::runtime_error("load_snapshot: snapshot was written by a different config/seed");
  }
  if (io::read_pod<std::uint64_t>(is) != seed_) {
    throw std::runtime_error("load_snapshot: seed mismatch");
  }

  const auto completed = io::read_pod<std::int32_t>(is);
  if (completed < 0 || completed > total_tasks()) {
    throw std::runtime_error("load_snapshot: corrupt completed-task count");
  }
  visit_counter_ = io::read_pod<std::int64_t>(is);
  pretrain_report_.untrained_pwjs = io::read_pod<double>(is);
  pretrain_report_.trained_pwjs = io::read_pod<double>(is);

  if (io::read_pod<std::int32_t>(is) != total_tasks()) {
    throw std::runtime_error("load_snapshot: task count mismatch");
  }
  results_ = ResultMatrix(total_tasks());
  for (int j = 1; j <= completed; ++j) {
    for (int k = 1; k <= j; ++k) results_.set(j, k, io::read_pod<double>(is));
  }

  const auto steps = io::read_pod<std::uint64_t>(is);
  if (steps > (1ull << 32)) throw std::runtime_error("load_snapshot: implausible loss-log length");
  loss_log_.clear();
  loss_log_.reserve(static_cast<std::size_t>(steps));
  for (std::uint64_t i = 0; i < steps; ++i) {
    StepLog row;
    row.task = io::read_pod<std::int32_t>(is);
    row.clf = io::read_pod<double>(is);
    row.er = io::read_pod<double>(is);
    row.der = io::read_pod<double>(is);
    row.fp = io::read_pod<double>(is);
    row.fp_rep = io::read_pod<double>(is);
    row.total = io::read_pod<double>(is);
    loss_log_.push_back(row);
  }

  const auto seconds = io::read_pod<std::uint32_t>(is);
  task_seconds_.clear();
  task_seconds_.reserve(seconds);
  for (std::uint32_t i = 0; i < seconds; ++i) task_seconds_.push_back(io::read_pod<double>(is));

  read_param_set<T>(is, student_.parameters(), "student");
  const bool has_teacher = io::read_pod<std::uint8_t>(is) != 0;
  if (has_teacher != teacher_.has_value()) {
    throw std::runtime_error("load_snapshot: teacher presence mismatch");
  }
  if (teacher_) read_param_set<T>(is, teacher_->parameters(), "teacher");

  const auto adapter_count = io::read_pod<std::uint32_t>(is);
  if (adapter_count != adapters_.size()) {
    throw std::runtime_error("load_snapshot: adapter count mismatch");
  }
  for (Adapter<T>& a : adapters_) {
    if (io::read_pod<std::int32_t>(is) != a.layer_index() ||
        io::read_pod<std::int32_t>(is) != a.seq_len()) {
      throw std::runtime_error("load_snapshot: adapter geometry mismatch");
    }
    if (io::read_pod<double>(is) != a.temperature()) {
      throw std::runtime_error("load_snapshot: adapter temperature mismatch");
    }
    read_param_set<T>(is, a.parameters(), "adapter");
  }

  const bool has_buffer = io::read_pod<std::uint8_t>(is) != 0;
  if (has_buffer != buffer_.has_value()) {
    throw std::runtime_error("load_snapshot: buffer presence mismatch");
  }
  if (buffer_) {
    *buffer_ = ReplayBuffer<T>::load(is, reservoir_rng_);
    if (buffer_->capacity() != config_.method.buffer_capacity) {
      throw std::runtime_error("load_snapshot: buffer capacity mismatch");
    }
  }
  completed_ = completed;
}

// ---------------------------------------------------------------------------
// run_experiment and friends

namespace {

// Highest-numbered task_<n>.snap under dir, or empty when none exists.
std::filesystem::path latest_snapshot(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  int best = 0;
  fs::path best_path;
  if (!fs::exists(dir)) return best_path;
  for (const auto& de : fs::directory_iterator(dir)) {
    const std::string name = de.path().filename().string();
    if (name.size() <= 10 || name.rfind("task_", 0) != 0 ||
        name.substr(name.size() - 5) != ".snap") {
      continue;
    }
    const std::string digits = name.substr(5, name.size() - 10);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos) {
      continue;
    }
    const int n = std::stoi(digits);
    if (n > best) {
      best = n;
      best_path = de.path();
    }
  }
  return best_path;
}

}  // namespace

template <class T>
RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                         const std::string& out_dir, bool resume) {
  namespace fs = std::filesystem;
  config.validate();
  const bool writing = !out_dir.empty();
  if (resume && !writing) {
    throw std::invalid_argument("run_experiment: resume needs an output directory to resume from");
  }

  const fs::path out(out_dir);
  const fs::path ckpt_dir = out / "checkpoints";
  if (writing) {
    if (fs::exists(out / "results_matrix.csv")) {
      throw std::runtime_error("run_experiment: " + (out / "results_matrix.csv").string() +
                               " already exists; results are write-once");
    }
    fs::create_directories(ckpt_dir);
  }

  std::optional<Experiment<T>> exp;
  if (resume) {
    const fs::path snap = latest_snapshot(ckpt_dir);
    if (!snap.empty()) {
      exp.emplace(Experiment<T>::resume_from(config, seed, snap.string()));
    }
  }
  if (!exp) exp.emplace(config, seed);

  while (!exp->finished()) {
    exp->run_next_task();
    if (writing) {
      const fs::path snap = ckpt_dir / ("task_" + std::to_string(exp->completed_tasks()) + ".snap");
      exp->save_snapshot(snap.string());
    }
  }

  RunRecord rec;
  rec.method = method_kind_name(config.method.kind);
  rec.seed = seed;
  rec.config_text = serialize_config(config);
  rec.ar_f = exp->final_average();
  rec.fg_f = exp->forgetting();
  rec.results_csv = exp->results().to_csv();
  rec.pretrain = exp->pretrain_report();
  rec.loss_log = exp->loss_log();
  rec.task_seconds = exp->task_seconds();
  rec.out_dir = writing ? out.string() : std::string();

  if (writing) {
    {
      std::ofstream os(out / "results_matrix.csv");
      if (!os) throw std::runtime_error("run_experiment: cannot write results_matrix.csv");
      os << rec.results_csv;
    }
    nlohmann::json j;
    j["method"] = rec.method;
    j["seed"] = rec.seed;
    j["ar_f"] = rec.ar_f;
    if (rec.fg_f) {
      j["fg_f"] = *rec.fg_f;
    } else {
      j["fg_f"] = nullptr;
    }
    j["pretrain"] = {{"untrained_pwjs", rec.pretrain.untrained_pwjs},
                     {"trained_pwjs", rec.pretrain.trained_pwjs}};
    j["task_seconds"] = rec.task_seconds;
    nlohmann::json curves;
    std::vector<int> tasks;
    std::vector<double> clf, er, der, fp, fp_rep, tot;
    tasks.reserve(rec.loss_log.size());
    for (const StepLog& row : rec.loss_log) {
      tasks.push_back(row.task);
      clf.push_back(row.clf);
      er.push_back(row.er);
      der.push_back(row.der);
      fp.push_back(row.fp);
      fp_rep.push_back(row.fp_rep);
      tot.push_back(row.total);
    }
    curves["task"] = tasks;
    curves["clf"] = clf;
    curves["er"] = er;
    curves["der"] = der;
    curves["fp"] = fp;
    curves["fp_rep"] = fp_rep;
    curves["total"] = tot;
    j["loss_curves"] = curves;
    j["config"] = rec.config_text;
    {
      std::ofstream os(out / "summary.json");
      if (!os) throw std::runtime_error("run_experiment: cannot write summary.json");
      os << j.dump(2) << '\n';
    }
    save_checkpoint(exp->student(), (out / "final_student.ckpt").string());
  }
  return rec;
}

MeanStd mean_and_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_and_std: need at least one value");
  MeanStd out;
  out.n = static_cast<int>(values.size());
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / out.n;
  if (out.n > 1) {
    double acc = 0.0;
    for (double v : values) acc += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(acc / (out.n - 1));
  }
  return out;
}

template <class T>
MultiSeedResult<T> run_seeds(const ExperimentConfig& config,
                             const std::vector<std::uint64_t>& seeds,
                             const std::string& out_base) {
  if (seeds.empty()) throw std::invalid_argument("run_seeds: need at least one seed");
  namespace fs = std::filesystem;
  MultiSeedResult<T> out;
  std::vector<double> ars;
  std::vector<double> fgs;
  for (std::uint64_t s : seeds) {
    const std::string dir =
        out_base.empty() ? std::string()
                         : (fs::path(out_base) / ("seed_" + std::to_string(s))).string();
    RunRecord rec = run_experiment<T>(config, s, dir, false);
    ars.push_back(rec.ar_f);
    if (rec.fg_f) fgs.push_back(*rec.fg_f);
    out.runs.push_back(std::move(rec));
  }
  out.ar_f = mean_and_std(ars);
  if (!fgs.empty()) out.fg_f = mean_and_std(fgs);
  return out;
}

template <class T>
void force_adapters_to_ones(std::vector<Adapter<T>>& adapters) {
  for (Adapter<T>& a : adapters) {
    for (Parameter<T>* p : a.parameters()) {
      T fill = T(0);
      if (p->name.ends_with("b_drop")) fill = T(-1e9);
      if (p->name.ends_with("b_keep")) fill = T(1e9);
      const std::span<T> v = p->value.values_mut();
      std::fill(v.begin(), v.end(), fill);
    }
  }
}

template <class T>
std::vector<double> evaluate_tasks(const Vit<T>& model, const TaskStream<T>& stream,
                                   double threshold, int eval_batch) {
  if (stream.tasks.empty()) throw std::invalid_argument("evaluate_tasks: the stream has no tasks");
  if (eval_batch < 1) throw std::invalid_argument("evaluate_tasks: eval_batch must be >= 1");
  if (model.config().total_classes != stream.num_labels) {
    throw std::invalid_argument("evaluate_tasks: the checkpoint has " +
                                std::to_string(model.config().total_classes) +
                                " classes but the stream defines " +
                                std::to_string(stream.num_labels));
  }
  const std::vector<int> introduced =
      stream.introduced_through(static_cast<int>(stream.tasks.size()));
  std::vector<double> scores;
  scores.reserve(stream.tasks.size());
  for (const TaskSpec<T>& task : stream.tasks) {
    const auto rows = eval_logit_rows(model, task.test, eval_batch);
    std::vector<PredictionSet> sets;
    sets.reserve(task.test.size());
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      PredictionSet ps;
      ps.predicted = predict_labels(rows[i], introduced, threshold);
      ps.truth = sorted_intersection(task.test[i].full_labels, introduced);
      sets.push_back(std::move(ps));
    }
    scores.push_back(pwjs(sets));
  }
  return scores;
}

// ---------------------------------------------------------------------------

template std::vector<double> evaluate_tasks(const Vit<float>&, const TaskStream<float>&, double,
                                            int);
template std::vector<double> evaluate_tasks(const Vit<double>&, const TaskStream<double>&, double,
                                            int);
template LossBreakdown<float> total_loss(const MethodSpec&, const StreamBatch<float>&,
                                         const std::vector<const BufferEntry<float>*>&,
                                         Vit<float>&, const Vit<float>*,
                                         const std::vector<Adapter<float>*>&,
                                         const std::vector<int>&, const std::vector<int>&, Rng*,
                                         Rng*);
template LossBreakdown<double> total_loss(const MethodSpec&, const StreamBatch<double>&,
                                          const std::vector<const BufferEntry<double>*>&,
                                          Vit<double>&, const Vit<double>*,
                                          const std::vector<Adapter<double>*>&,
                                          const std::vector<int>&, const std::vector<int>&, Rng*,
                                          Rng*);
template PretrainResult<float> pretrain_teacher(const ExperimentConfig&, std::uint64_t);
template PretrainResult<double> pretrain_teacher(const ExperimentConfig&, std::uint64_t);
template class Experiment<float>;
template class Experiment<double>;
template RunRecord run_experiment<float>(const ExperimentConfig&, std::uint64_t,
                                         const std::string&, bool);
template RunRecord run_experiment<double>(const ExperimentConfig&, std::uint64_t,
                                          const std::string&, bool);
template MultiSeedResult<float> run_seeds<float>(const ExperimentConfig&,
                                                 const std::vector<std::uint64_t>&,
                                                 const std::string&);
template MultiSeedResult<double> run_seeds<double>(const ExperimentConfig&,
                                                   const std::vector<std::uint64_t>&,
                                                   const std::string&);
template void force_adapters_to_ones(std::vector<Adapter<float>>&);
template void force_adapters_to_ones(std::vector<Adapter<double>>&);

}  // namespace mlcl
