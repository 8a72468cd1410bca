#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlcl/rng.hpp"

namespace mlcl {

// Two-level label space. Superclasses occupy indices [0, supers); subclass
// ordinal s (0-based over all subclasses) maps to label index supers + s and
// has exactly one parent superclass. Construction is a pure function of the
// two counts, so identical configs always yield identical hierarchies.
struct LabelHierarchy {
  int supers = 0;
  int subs_per_super = 0;

  int num_subclasses() const { return supers * subs_per_super; }
  int total_labels() const { return supers + num_subclasses(); }
  int parent_of_ordinal(int sub_ordinal) const;  // superclass label index
  int sub_label(int sub_ordinal) const;          // global label index
  int ordinal_of_label(int label) const;         // inverse of sub_label
  bool is_subclass_label(int label) const;
  std::vector<int> superclass_labels() const;
  std::vector<int> subclass_labels() const;
};

LabelHierarchy generate_hierarchy(int supers, int subs_per_super);

enum class StreamMode { kIircIncomplete, kComplete };

// Stable names used by config files and stream manifests:
// "iirc_incomplete" and "complete".
const char* stream_mode_name(StreamMode mode);
StreamMode stream_mode_from_name(const std::string& name);

struct StreamConfig {
  StreamMode mode = StreamMode::kIircIncomplete;
  int num_tasks = 6;
  int superclasses = 5;
  int subclasses_per_super = 4;
  int train_per_subclass = 200;
  int test_per_subclass = 50;
  int image_size = 32;
  int channels = 3;
  std::uint64_t seed = 0;
  // Extra procedural classes, disjoint from the hierarchy by construction,
  // used only for teacher pretraining.
  int pretext_classes = 5;
  int pretext_train_per_class = 200;
  int pretext_test_per_class = 50;

  int image_dim() const { return channels * image_size * image_size; }
  void validate() const;  // throws std::invalid_argument naming the field
};

// Visual identity of one renderable class: the shape family is shared by all
// subclasses of a superclass; hue and texture tell siblings apart; the
// instance seed jitters pose, scale, and noise.
struct RenderSpec {
  int shape_family = 0;   // 0 circle, 1 triangle, 2 bar, 3 cross, 4 ring
  int hue_index = 0;
  int texture_index = 0;
  int hue_count = 1;      // total distinct hues in this universe
};

RenderSpec render_spec_for_subclass(const LabelHierarchy& h, int sub_ordinal,
                                    int pretext_classes = 0);
RenderSpec render_spec_for_pretext(const LabelHierarchy& h, int pretext_ordinal,
                                   int pretext_classes);

template <class T>
std::vector<T> render_glyph(const RenderSpec& spec, std::uint64_t instance_seed, int image_size,
                            int channels);

// Spec-level entry point: renders subclass `sub_ordinal` of the hierarchy.
// Unknown ordinals are rejected.
template <class T>
std::vector<T> render_sample(const LabelHierarchy& h, int sub_ordinal, std::uint64_t instance_seed,
                             int image_size, int channels = 3);

template <class T>
struct Sample {
  std::vector<T> image;            // channels * size * size, values in [0,1]
  std::vector<int> stream_labels;  // labels visible for training, sorted
  std::vector<int> full_labels;    // every true label, sorted
};

template <class T>
struct TaskSpec {
  int task_id = 0;              // 1-based position in the stream
  std::vector<int> introduced;  // label indices first seen in this task
  std::vector<Sample<T>> train;
  std::vector<Sample<T>> test;
};

template <class T>
struct TaskStream {
  StreamMode mode = StreamMode::kIircIncomplete;
  int num_labels = 0;
  int image_size = 0;
  int channels = 0;
  std::vector<TaskSpec<T>> tasks;

  // Union of labels introduced in tasks 1..task_id, sorted.
  std::vector<int> introduced_through(int task_id) const;
};

// Incomplete-information stream: task 1 introduces every superclass and
// trains on half of each subclass's pool labeled with the parent only;
// tasks 2..N partition the subclasses (seeded shuffle, last task takes any
// remainder) and train on the other half labeled with the subclass only.
template <class T>
TaskStream<T> build_iirc_stream(const LabelHierarchy& h, const StreamConfig& config);

// Complete-information stream: identical sample pools and task layout, but a
// task-t sample carries all of its true labels among the classes introduced
// in tasks 1..t.
template <class T>
TaskStream<T> build_complete_stream(const LabelHierarchy& h, const StreamConfig& config);

// Dispatches on config.mode.
template <class T>
TaskStream<T> build_stream(const StreamConfig& config);

// Single-task view for joint training: every training sample with its full
// labels, every test sample, all labels introduced at once.
template <class T>
TaskStream<T> flatten_stream(const TaskStream<T>& stream);

// Pretext dataset for teacher pretraining: one-hot labels over a label space
// of exactly config.pretext_classes, rendered from classes disjoint from the
// hierarchy. first = train, second = test.
template <class T>
std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> build_pretext_set(
    const LabelHierarchy& h, const StreamConfig& config);

// ---- Manifest interchange -------------------------------------------------
// A stream on disk is a directory holding `manifest.jsonl` plus one little-
// endian image file per sample. Manifest line 1 is a header object:
//   {"format":"mlcl-stream","version":1,"mode":"iirc_incomplete",
//    "num_labels":25,"image_size":32,"channels":3,
//    "tasks":[{"task":1,"introduced":[0,1]}, ...]}
// Every further line is one sample:
//   {"image":"images/t1_train_00000.bin","task":1,"split":"train",
//    "stream_labels":[2],"full_labels":[2,9]}
// Image files: magic "MLIM", u8 dtype (1=float32, 2=float64), u8 channels,
// u16 height, u16 width, then channels*height*width values row-major per
// channel.

template <class T>
void write_image_file(const std::string& path, const std::vector<T>& image, int channels,
                      int height, int width);
template <class T>
std::vector<T> read_image_file(const std::string& path, int expected_channels, int expected_height,
                               int expected_width);

template <class T>
void export_stream(const TaskStream<T>& stream, const std::string& dir);

template <class T>
TaskStream<T> load_manifest(const std::string& manifest_path);

}  // namespace mlcl
