#include "mlcl/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {
using nlohmann::json;
namespace fs = std::filesystem;
}  // namespace

// ---- LabelHierarchy ---------------------------------------------------------

int LabelHierarchy::parent_of_ordinal(int sub_ordinal) const {
  if (sub_ordinal < 0 || sub_ordinal >= num_subclasses()) {
    throw std::invalid_argument("LabelHierarchy: unknown subclass ordinal " +
                                std::to_string(sub_ordinal));
  }
  return sub_ordinal / subs_per_super;
}

int LabelHierarchy::sub_label(int sub_ordinal) const {
  if (sub_ordinal < 0 || sub_ordinal >= num_subclasses()) {
    throw std::invalid_argument("LabelHierarchy: unknown subclass ordinal " +
                                std::to_string(sub_ordinal));
  }
  return supers + sub_ordinal;
}

int LabelHierarchy::ordinal_of_label(int label) const {
  if (!is_subclass_label(label)) {
    throw std::invalid_argument("LabelHierarchy: label " + std::to_string(label) +
                                " is not a subclass label");
  }
  return label - supers;
}

bool LabelHierarchy::is_subclass_label(int label) const {
  return label >= supers && label < total_labels();
}

std::vector<int> LabelHierarchy::superclass_labels() const {
  std::vector<int> out(static_cast<std::size_t>(supers));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

std::vector<int> LabelHierarchy::subclass_labels() const {
  std::vector<int> out(static_cast<std::size_t>(num_subclasses()));
  std::iota(out.begin(), out.end(), supers);
  return out;
}

LabelHierarchy generate_hierarchy(int supers, int subs_per_super) {
  if (supers < 1) throw std::invalid_argument("generate_hierarchy: supers must be >= 1");
  if (subs_per_super < 1) {
    throw std::invalid_argument("generate_hierarchy: subs_per_super must be >= 1");
  }
  return LabelHierarchy{supers, subs_per_super};
}

// ---- StreamConfig -----------------------------------------------------------

void StreamConfig::validate() const {
  std::vector<std::string> errors;
  auto require = [&errors](bool ok, const char* message) {
    if (!ok) errors.emplace_back(message);
  };
  require(num_tasks >= 1, "num_tasks: must be >= 1");
  require(superclasses >= 1, "superclasses: must be >= 1");
  require(subclasses_per_super >= 1, "subclasses_per_super: must be >= 1");
  require(train_per_subclass >= 1, "train_per_subclass: must be >= 1");
  require(!(num_tasks >= 2 && train_per_subclass < 2),
          "train_per_subclass: must be >= 2 for multi-task streams (half the pool feeds task 1)");
  require(test_per_subclass >= 1, "test_per_subclass: must be >= 1");
  require(image_size >= 8, "image_size: must be >= 8");
  require(channels == 1 || channels == 3, "channels: must be 1 or 3");
  require(pretext_classes >= 0, "pretext_classes: must be >= 0");
  require(pretext_train_per_class >= 1, "pretext_train_per_class: must be >= 1");
  require(pretext_test_per_class >= 1, "pretext_test_per_class: must be >= 1");
  if (num_tasks >= 2) {
    const int subs = superclasses * subclasses_per_super;
    require(num_tasks - 1 <= subs,
            "num_tasks: needs at least one subclass per task after the first");
  }
  if (!errors.empty()) {
    std::string joined = "invalid stream config:";
    for (const auto& e : errors) joined += "\n  - " + e;
    throw std::invalid_argument(joined);
  }
}

// ---- renderer ---------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c, g = x;
  } else if (hp < 2) {
    r = x, g = c;
  } else if (hp < 3) {
    g = c, b = x;
  } else if (hp < 4) {
    g = x, b = c;
  } else if (hp < 5) {
    r = x, b = c;
  } else {
    r = c, b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

double sdf_circle(double px, double py, double radius) {
  return std::hypot(px, py) - radius;
}

double sdf_triangle(double px, double py, double radius) {
  // Equilateral triangle with circumradius `radius`, apex up: intersection of
  // three half-planes whose inradius is radius/2.
  constexpr double kApex[3] = {0.5235987755982988, 2.6179938779914944, -1.5707963267948966};
  double d = -1e9;
  for (double a : kApex) {
    d = std::max(d, px * std::cos(a) + py * std::sin(a) - radius * 0.5);
  }
  return d;
}

double sdf_bar(double px, double py, double half_len, double half_thick) {
  return std::max(std::abs(px) - half_len, std::abs(py) - half_thick);
}

double sdf_cross(double px, double py, double radius) {
  return std::min(sdf_bar(px, py, radius, radius * 0.22), sdf_bar(py, px, radius, radius * 0.22));
}

double sdf_ring(double px, double py, double radius) {
  return std::abs(std::hypot(px, py) - radius * 0.82) - radius * 0.22;
}

double shape_distance(int family, double px, double py, double radius) {
  switch (family % 5) {
    case 0: return sdf_circle(px, py, radius);
    case 1: return sdf_triangle(px, py, radius * 1.20);
    case 2: return sdf_bar(px, py, radius * 1.10, radius * 0.45);
    case 3: return sdf_cross(px, py, radius * 1.10);
    default: return sdf_ring(px, py, radius);
  }
}

double texture_factor(int texture, double ux, double uy) {
  // ux/uy are glyph-local coordinates in units of the glyph radius.
  constexpr double kFreq = 2.4;
  switch (texture % 4) {
    case 0: return 1.0;
    case 1: {  // horizontal stripes
      const long band = static_cast<long>(std::floor(uy * kFreq));
      return (band & 1) ? 0.45 : 1.0;
    }
    case 2: {  // vertical stripes
      const long band = static_cast<long>(std::floor(ux * kFreq));
      return (band & 1) ? 0.45 : 1.0;
    }
    default: {  // checker
      const long bx = static_cast<long>(std::floor(ux * kFreq));
      const long by = static_cast<long>(std::floor(uy * kFreq));
      return ((bx + by) & 1) ? 0.45 : 1.0;
    }
  }
}

}  // namespace

RenderSpec render_spec_for_subclass(const LabelHierarchy& h, int sub_ordinal,
                                    int pretext_classes) {
  RenderSpec spec;
  spec.shape_family = h.parent_of_ordinal(sub_ordinal) % 5;
  spec.hue_index = sub_ordinal;
  spec.texture_index = sub_ordinal % h.subs_per_super;
  spec.hue_count = h.num_subclasses() + pretext_classes;
  return spec;
}

RenderSpec render_spec_for_pretext(const LabelHierarchy& h, int pretext_ordinal,
                                   int pretext_classes) {
  if (pretext_ordinal < 0 || pretext_ordinal >= pretext_classes) {
    throw std::invalid_argument("render_spec_for_pretext: ordinal out of range");
  }
  RenderSpec spec;
  spec.shape_family = pretext_ordinal % 5;
  spec.hue_index = h.num_subclasses() + pretext_ordinal;
  // Offset the texture cycle so pretext classes do not mirror stream classes.
  spec.texture_index = (pretext_ordinal + 2) % 4;
  spec.hue_count = h.num_subclasses() + pretext_classes;
  return spec;
}

template <class T>
std::vector<T> render_glyph(const RenderSpec& spec, std::uint64_t instance_seed, int image_size,
                            int channels) {
  if (image_size < 4) throw std::invalid_argument("render_glyph: image_size too small");
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("render_glyph: channels must be 1 or 3");
  }
  Rng rng(instance_seed);
  // Fixed draw order keeps images a pure function of (spec, seed, size).
  const double cx = 0.5 + 0.07 * (2.0 * rng.uniform() - 1.0);
  const double cy = 0.5 + 0.07 * (2.0 * rng.uniform() - 1.0);
  const double radius = 0.27 + 0.07 * rng.uniform();
  const double rot = (2.0 * rng.uniform() - 1.0) * 0.22;
  const double brightness = 0.80 + 0.20 * rng.uniform();
  const double tex_shift = rng.uniform() * 2.0;
  const double noise_amp = 0.02 + 0.04 * rng.uniform();
  const double bg_level = 0.10 + 0.10 * rng.uniform();

  const double golden = 0.6180339887498949;
  const double hue = spec.hue_index * golden + 0.13;
  const Rgb color = hsv_to_rgb(hue, 0.85, 0.92 * brightness);
  const double gray = 0.2126 * color.r + 0.7152 * color.g + 0.0722 * color.b;

  const double cos_r = std::cos(rot);
  const double sin_r = std::sin(rot);
  const double edge = 1.4 / image_size;

  const std::size_t hw = static_cast<std::size_t>(image_size) * image_size;
  std::vector<T> img(static_cast<std::size_t>(channels) * hw);
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double nx = (x + 0.5) / image_size - cx;
      const double ny = (y + 0.5) / image_size - cy;
      // Rotate into glyph-local coordinates.
      const double px = cos_r * nx + sin_r * ny;
      const double py = -sin_r * nx + cos_r * ny;
      const double d = shape_distance(spec.shape_family, px, py, radius);
      double alpha = 0.5 - d / (2.0 * edge);
      alpha = std::clamp(alpha, 0.0, 1.0);
      const double tex = texture_factor(spec.texture_index, px / radius + tex_shift,
                                        py / radius + tex_shift);
      const double noise = noise_amp * (2.0 * rng.uniform() - 1.0);
      const double bg = std::clamp(bg_level + noise, 0.0, 1.0);
      const double shade = 0.35 + 0.65 * tex;
      const std::size_t at = static_cast<std::size_t>(y) * image_size + x;
      if (channels == 1) {
        const double fg = gray * shade;
        img[at] = static_cast<T>(std::clamp(bg + alpha * (fg - bg), 0.0, 1.0));
      } else {
        const double fr = color.r * shade;
        const double fg = color.g * shade;
        const double fb = color.b * shade;
        img[at] = static_cast<T>(std::clamp(bg + alpha * (fr - bg), 0.0, 1.0));
        img[hw + at] = static_cast<T>(std::clamp(bg + alpha * (fg - bg), 0.0, 1.0));
        img[2 * hw + at] = static_cast<T>(std::clamp(bg + alpha * (fb - bg), 0.0, 1.0));
      }
    }
  }
  return img;
}

template <class T>
std::vector<T> render_sample(const LabelHierarchy& h, int sub_ordinal, std::uint64_t instance_seed,
                             int image_size, int channels) {
  return render_glyph<T>(render_spec_for_subclass(h, sub_ordinal), instance_seed, image_size,
                         channels);
}

// ---- stream construction ----------------------------------------------------

namespace {

// Subclass ordinals for tasks 2..N: seeded shuffle, then near-equal chunks
// with the remainder folded into the last task.
std::vector<std::vector<int>> partition_subclasses(const LabelHierarchy& h, int num_tasks,
                                                   std::uint64_t seed) {
  std::vector<int> ordinals(static_cast<std::size_t>(h.num_subclasses()));
  std::iota(ordinals.begin(), ordinals.end(), 0);
  Rng rng(Rng::derive(seed, "task-partition"));
  for (std::size_t i = ordinals.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(ordinals[i - 1], ordinals[j]);
  }
  const int chunks = num_tasks - 1;
  const int q = h.num_subclasses() / chunks;
  std::vector<std::vector<int>> out(static_cast<std::size_t>(chunks));
  std::size_t at = 0;
  for (int c = 0; c < chunks; ++c) {
    const std::size_t take = (c == chunks - 1) ? ordinals.size() - at : static_cast<std::size_t>(q);
    out[static_cast<std::size_t>(c)].assign(ordinals.begin() + static_cast<std::ptrdiff_t>(at),
                                            ordinals.begin() + static_cast<std::ptrdiff_t>(at + take));
    at += take;
  }
  return out;
}

std::uint64_t train_image_seed(const StreamConfig& c, int sub_ordinal, int index) {
  return Rng::derive(c.seed, "train-image",
                     (static_cast<std::uint64_t>(sub_ordinal) << 32) |
                         static_cast<std::uint64_t>(index));
}

std::uint64_t test_image_seed(const StreamConfig& c, int task_id, int sub_ordinal, int index) {
  return Rng::derive(c.seed, "test-image",
                     (static_cast<std::uint64_t>(task_id) << 48) |
                         (static_cast<std::uint64_t>(sub_ordinal) << 24) |
                         static_cast<std::uint64_t>(index));
}

template <class T>
Sample<T> make_sample(const LabelHierarchy& h, const StreamConfig& c, int sub_ordinal,
                      std::uint64_t seed, std::vector<int> stream_labels) {
  Sample<T> s;
  s.image = render_sample<T>(h, sub_ordinal, seed, c.image_size, c.channels);
  s.full_labels = {h.parent_of_ordinal(sub_ordinal), h.sub_label(sub_ordinal)};
  std::sort(s.full_labels.begin(), s.full_labels.end());
  s.stream_labels = std::move(stream_labels);
  std::sort(s.stream_labels.begin(), s.stream_labels.end());
  return s;
}

template <class T>
void fill_test_set(TaskSpec<T>& task, const LabelHierarchy& h, const StreamConfig& c,
                   const std::vector<int>& sub_ordinals) {
  for (int sub : sub_ordinals) {
    for (int i = 0; i < c.test_per_subclass; ++i) {
      Sample<T> s = make_sample<T>(h, c, sub, test_image_seed(c, task.task_id, sub, i), {});
      s.stream_labels = s.full_labels;
      task.test.push_back(std::move(s));
    }
  }
}

// Shared layout for both modes; `complete` toggles the labeling rule.
template <class T>
TaskStream<T> build_stream_impl(const LabelHierarchy& h, const StreamConfig& config,
                                bool complete) {
  config.validate();
  TaskStream<T> stream;
  stream.mode = complete ? StreamMode::kComplete : StreamMode::kIircIncomplete;
  stream.num_labels = h.total_labels();
  stream.image_size = config.image_size;
  stream.channels = config.channels;

  std::vector<int> all_subs(static_cast<std::size_t>(h.num_subclasses()));
  std::iota(all_subs.begin(), all_subs.end(), 0);

  if (config.num_tasks == 1) {
    TaskSpec<T> t;
    t.task_id = 1;
    if (complete) {
      // Degenerate single-task stream: plain multi-label training.
      t.introduced.resize(static_cast<std::size_t>(h.total_labels()));
      std::iota(t.introduced.begin(), t.introduced.end(), 0);
      for (int sub : all_subs) {
        for (int i = 0; i < config.train_per_subclass; ++i) {
          Sample<T> s = make_sample<T>(h, config, sub, train_image_seed(config, sub, i), {});
          s.stream_labels = s.full_labels;
          t.train.push_back(std::move(s));
        }
      }
    } else {
      // Incomplete single-task stream: only the superclasses ever appear.
      t.introduced = h.superclass_labels();
      for (int sub : all_subs) {
        for (int i = 0; i < config.train_per_subclass; ++i) {
          t.train.push_back(make_sample<T>(h, config, sub, train_image_seed(config, sub, i),
                                           {h.parent_of_ordinal(sub)}));
        }
      }
    }
    fill_test_set(t, h, config, all_subs);
    stream.tasks.push_back(std::move(t));
    return stream;
  }

  const int half = config.train_per_subclass / 2;
  const auto chunks = partition_subclasses(h, config.num_tasks, config.seed);

  // Task 1: all superclasses, trained on the first half of every subclass's
  // pool with the parent as the only visible label (identical in both modes:
  // no subclass label exists yet).
  {
    TaskSpec<T> t;
    t.task_id = 1;
    t.introduced = h.superclass_labels();
    for (int sub : all_subs) {
      for (int i = 0; i < half; ++i) {
        t.train.push_back(make_sample<T>(h, config, sub, train_image_seed(config, sub, i),
                                         {h.parent_of_ordinal(sub)}));
      }
    }
    fill_test_set(t, h, config, all_subs);
    stream.tasks.push_back(std::move(t));
  }

  // Tasks 2..N: each introduces its subclass chunk and trains on the second
  // half of those pools. Incomplete mode shows only the subclass label;
  // complete mode shows every true label introduced so far (parent + sub).
  for (int task_id = 2; task_id <= config.num_tasks; ++task_id) {
    TaskSpec<T> t;
    t.task_id = task_id;
    const auto& subs = chunks[static_cast<std::size_t>(task_id - 2)];
    for (int sub : subs) t.introduced.push_back(h.sub_label(sub));
    std::sort(t.introduced.begin(), t.introduced.end());
    for (int sub : subs) {
      for (int i = half; i < config.train_per_subclass; ++i) {
        std::vector<int> visible;
        if (complete) {
          visible = {h.parent_of_ordinal(sub), h.sub_label(sub)};
        } else {
          visible = {h.sub_label(sub)};
        }
        t.train.push_back(
            make_sample<T>(h, config, sub, train_image_seed(config, sub, i), std::move(visible)));
      }
    }
    fill_test_set(t, h, config, subs);
    stream.tasks.push_back(std::move(t));
  }
  return stream;
}

}  // namespace

template <class T>
std::vector<int> TaskStream<T>::introduced_through(int task_id) const {
  std::vector<int> out;
  for (const auto& t : tasks) {
    if (t.task_id > task_id) continue;
    out.insert(out.end(), t.introduced.begin(), t.introduced.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

template <class T>
TaskStream<T> build_iirc_stream(const LabelHierarchy& h, const StreamConfig& config) {
  if (config.mode != StreamMode::kIircIncomplete) {
    throw std::invalid_argument("build_iirc_stream: config mode is not iirc_incomplete");
  }
  return build_stream_impl<T>(h, config, false);
}

template <class T>
TaskStream<T> build_complete_stream(const LabelHierarchy& h, const StreamConfig& config) {
  if (config.mode != StreamMode::kComplete) {
    throw std::invalid_argument("build_complete_stream: config mode is not complete");
  }
  return build_stream_impl<T>(h, config, true);
}

template <class T>
TaskStream<T> build_stream(const StreamConfig& config) {
  const LabelHierarchy h = generate_hierarchy(config.superclasses, config.subclasses_per_super);
  return config.mode == StreamMode::kComplete ? build_complete_stream<T>(h, config)
                                              : build_iirc_stream<T>(h, config);
}

template <class T>
TaskStream<T> flatten_stream(const TaskStream<T>& stream) {
  TaskStream<T> flat;
  flat.mode = StreamMode::kComplete;
  flat.num_labels = stream.num_labels;
  flat.image_size = stream.image_size;
  flat.channels = stream.channels;
  TaskSpec<T> t;
  t.task_id = 1;
  t.introduced = stream.introduced_through(static_cast<int>(stream.tasks.size()));
  for (const auto& task : stream.tasks) {
    for (const auto& s : task.train) {
      Sample<T> joint = s;
      joint.stream_labels = joint.full_labels;
      t.train.push_back(std::move(joint));
    }
    for (const auto& s : task.test) t.test.push_back(s);
  }
  flat.tasks.push_back(std::move(t));
  return flat;
}

template <class T>
std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> build_pretext_set(
    const LabelHierarchy& h, const StreamConfig& config) {
  config.validate();
  if (config.pretext_classes < 1) {
    throw std::invalid_argument("build_pretext_set: pretext_classes must be >= 1");
  }
  std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> out;
  for (int q = 0; q < config.pretext_classes; ++q) {
    const RenderSpec spec = render_spec_for_pretext(h, q, config.pretext_classes);
    for (int i = 0; i < config.pretext_train_per_class; ++i) {
      Sample<T> s;
      const std::uint64_t seed = Rng::derive(config.seed, "pretext-train-image",
                                             (static_cast<std::uint64_t>(q) << 32) |
                                                 static_cast<std::uint64_t>(i));
      s.image = render_glyph<T>(spec, seed, config.image_size, config.channels);
      s.stream_labels = {q};
      s.full_labels = {q};
      out.first.push_back(std::move(s));
    }
    for (int i = 0; i < config.pretext_test_per_class; ++i) {
      Sample<T> s;
      const std::uint64_t seed = Rng::derive(config.seed, "pretext-test-image",
                                             (static_cast<std::uint64_t>(q) << 32) |
                                                 static_cast<std::uint64_t>(i));
      s.image = render_glyph<T>(spec, seed, config.image_size, config.channels);
      s.stream_labels = {q};
      s.full_labels = {q};
      out.second.push_back(std::move(s));
    }
  }
  return out;
}

// ---- image files ------------------------------------------------------------

namespace {
constexpr char kImageMagic[4] = {'M', 'L', 'I', 'M'};
}

template <class T>
void write_image_file(const std::string& path, const std::vector<T>& image, int channels,
                      int height, int width) {
  const std::size_t expected =
      static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * width;
  if (image.size() != expected) {
    throw std::invalid_argument("write_image_file: image size does not match dimensions");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_image_file: cannot open " + path);
  io::write_bytes(os, kImageMagic, sizeof(kImageMagic));
  io::write_pod<std::uint8_t>(os, io::dtype_tag<T>());
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(channels));
  io::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(height));
  io::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(width));
  io::write_bytes(os, image.data(), image.size() * sizeof(T));
  if (!os) throw std::runtime_error("write_image_file: write failed for " + path);
}

template <class T>
std::vector<T> read_image_file(const std::string& path, int expected_channels, int expected_height,
                               int expected_width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_image_file: cannot open " + path);
  char magic[4];
  io::read_bytes(is, magic, sizeof(magic));
  if (!std::equal(magic, magic + 4, kImageMagic)) {
    throw std::runtime_error("read_image_file: bad magic in " + path);
  }
  if (io::read_pod<std::uint8_t>(is) != io::dtype_tag<T>()) {
    throw std::runtime_error("read_image_file: element type mismatch in " + path);
  }
  const int channels = io::read_pod<std::uint8_t>(is);
  const int height = io::read_pod<std::uint16_t>(is);
  const int width = io::read_pod<std::uint16_t>(is);
  if (channels != expected_channels || height != expected_height || width != expected_width) {
    throw std::runtime_error("read_image_file: dimensions mismatch in " + path);
  }
  std::vector<T> image(static_cast<std::size_t>(channels) * height * width);
  io::read_bytes(is, image.data(), image.size() * sizeof(T));
  return image;
}

// ---- manifest export/import ---------------------------------------------------

const char* stream_mode_name(StreamMode m) {
  return m == StreamMode::kComplete ? "complete" : "iirc_incomplete";
}

StreamMode stream_mode_from_name(const std::string& s) {
  if (s == "complete") return StreamMode::kComplete;
  if (s == "iirc_incomplete") return StreamMode::kIircIncomplete;
  throw std::runtime_error("unknown stream mode '" + s + "'");
}

namespace {

std::string image_name(int task_id, const char* split, int index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "images/t%d_%s_%05d.bin", task_id, split, index);
  return buf;
}

}  // namespace

template <class T>
void export_stream(const TaskStream<T>& stream, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  std::ofstream manifest(root / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("export_stream: cannot open manifest in " + dir);

  json header;
  header["format"] = "mlcl-stream";
  header["version"] = 1;
  header["mode"] = stream_mode_name(stream.mode);
  header["num_labels"] = stream.num_labels;
  header["image_size"] = stream.image_size;
  header["channels"] = stream.channels;
  json tasks = json::array();
  for (const auto& t : stream.tasks) {
    tasks.push_back({{"task", t.task_id}, {"introduced", t.introduced}});
  }
  header["tasks"] = std::move(tasks);
  manifest << header.dump() << "\n";

  for (const auto& t : stream.tasks) {
    for (std::size_t i = 0; i < t.train.size(); ++i) {
      const std::string rel = image_name(t.task_id, "train", static_cast<int>(i));
      write_image_file<T>((root / rel).string(), t.train[i].image, stream.channels,
                          stream.image_size, stream.image_size);
      json line = {{"image", rel},
                   {"task", t.task_id},
                   {"split", "train"},
                   {"stream_labels", t.train[i].stream_labels},
                   {"full_labels", t.train[i].full_labels}};
      manifest << line.dump() << "\n";
    }
    for (std::size_t i = 0; i < t.test.size(); ++i) {
      const std::string rel = image_name(t.task_id, "test", static_cast<int>(i));
      write_image_file<T>((root / rel).string(), t.test[i].image, stream.channels,
                          stream.image_size, stream.image_size);
      json line = {{"image", rel},
                   {"task", t.task_id},
                   {"split", "test"},
                   {"stream_labels", t.test[i].stream_labels},
                   {"full_labels", t.test[i].full_labels}};
      manifest << line.dump() << "\n";
    }
  }
  if (!manifest) throw std::runtime_error("export_stream: manifest write failed in " + dir);
}

namespace {

std::vector<int> parse_label_list(const json& j, const char* field, int num_labels) {
  if (!j.contains(field) || !j[field].is_array()) {
    throw std::runtime_error(std::string("missing or non-array field '") + field + "'");
  }
  std::vector<int> out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer()) {
      throw std::runtime_error(std::string("field '") + field + "' holds a non-integer label");
    }
    const int label = v.get<int>();
    if (label < 0 || label >= num_labels) {
      throw std::runtime_error(std::string("field '") + field + "' holds label " +
                               std::to_string(label) + " outside [0, " +
                               std::to_string(num_labels) + ")");
    }
    out.push_back(label);
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw std::runtime_error(std::string("field '") + field + "' repeats a label");
  }
  return out;
}

}  // namespace

template <class T>
TaskStream<T> load_manifest(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("load_manifest: cannot open " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  std::string line;
  int line_no = 0;
  auto fail = [&line_no, &manifest_path](const std::string& why) -> std::runtime_error {
    return std::runtime_error("load_manifest: " + manifest_path + " line " +
                              std::to_string(line_no) + ": " + why);
  };

  // Header.
  TaskStream<T> stream;
  std::vector<std::size_t> task_slot;  // task_id -> index into stream.tasks
  {
    do {
      if (!std::getline(is, line)) throw std::runtime_error("load_manifest: empty manifest");
      ++line_no;
    } while (line.find_first_not_of(" \t\r") == std::string::npos);
    json header;
    try {
      header = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(std::string("malformed header: ") + e.what());
    }
    try {
      if (header.value("format", "") != "mlcl-stream") throw std::runtime_error("format must be 'mlcl-stream'");
      if (header.value("version", 0) != 1) throw std::runtime_error("unsupported version");
      stream.mode = stream_mode_from_name(header.at("mode").get<std::string>());
      stream.num_labels = header.at("num_labels").get<int>();
      stream.image_size = header.at("image_size").get<int>();
      stream.channels = header.at("channels").get<int>();
      if (stream.num_labels < 1) throw std::runtime_error("num_labels must be >= 1");
      if (stream.image_size < 1) throw std::runtime_error("image_size must be >= 1");
      if (stream.channels != 1 && stream.channels != 3) {
        throw std::runtime_error("channels must be 1 or 3");
      }
      if (!header.contains("tasks") || !header["tasks"].is_array() || header["tasks"].empty()) {
        throw std::runtime_error("tasks must be a non-empty array");
      }
      std::set<int> all_introduced;
      int expected_task = 1;
      for (const auto& t : header["tasks"]) {
        TaskSpec<T> task;
        task.task_id = t.at("task").get<int>();
        if (task.task_id != expected_task) {
          throw std::runtime_error("task ids must be 1..N in order");
        }
        ++expected_task;
        task.introduced = parse_label_list(t, "introduced", stream.num_labels);
        for (int label : task.introduced) {
          if (!all_introduced.insert(label).second) {
            throw std::runtime_error(
                "invariant violated: introduced label sets must be pairwise disjoint (label " +
                std::to_string(label) + " repeats)");
          }
        }
        task_slot.push_back(stream.tasks.size());
        stream.tasks.push_back(std::move(task));
      }
    } catch (const json::exception& e) {
      throw fail(std::string("malformed header: ") + e.what());
    } catch (const std::runtime_error& e) {
      throw fail(e.what());
    }
  }

  std::size_t samples = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    }
    try {
      const int task_id = rec.at("task").get<int>();
      if (task_id < 1 || static_cast<std::size_t>(task_id) > stream.tasks.size()) {
        throw std::runtime_error("task id " + std::to_string(task_id) + " not declared in header");
      }
      TaskSpec<T>& task = stream.tasks[task_slot[static_cast<std::size_t>(task_id - 1)]];
      const std::string split = rec.at("split").get<std::string>();
      if (split != "train" && split != "test") {
        throw std::runtime_error("split must be 'train' or 'test'");
      }
      Sample<T> s;
      s.stream_labels = parse_label_list(rec, "stream_labels", stream.num_labels);
      s.full_labels = parse_label_list(rec, "full_labels", stream.num_labels);
      if (!std::includes(s.full_labels.begin(), s.full_labels.end(), s.stream_labels.begin(),
                         s.stream_labels.end())) {
        throw std::runtime_error("invariant violated: stream_labels must be within full_labels");
      }
      if (split == "train") {
        if (stream.mode == StreamMode::kIircIncomplete) {
          if (s.stream_labels.size() != 1) {
            throw std::runtime_error(
                "invariant violated: incomplete-mode training samples carry exactly one label");
          }
          const auto& intro = task.introduced;
          if (!std::binary_search(intro.begin(), intro.end(), s.stream_labels.front())) {
            throw std::runtime_error(
                "invariant violated: training label must be introduced by its own task");
          }
        } else if (s.stream_labels.empty()) {
          throw std::runtime_error(
              "invariant violated: complete-mode training samples carry at least one label");
        }
      }
      const std::string rel = rec.at("image").get<std::string>();
      s.image = read_image_file<T>((root / rel).string(), stream.channels, stream.image_size,
                                   stream.image_size);
      if (split == "train") {
        task.train.push_back(std::move(s));
      } else {
        task.test.push_back(std::move(s));
      }
      ++samples;
    } catch (const json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    } catch (const std::runtime_error& e) {
      throw fail(e.what());
    }
  }
  if (samples == 0) throw std::runtime_error("load_manifest: manifest declares no samples");
  return stream;
}

// ---- explicit instantiations --------------------------------------------------

#define MLCL_INSTANTIATE_BENCHMARK(T)                                                          \
  template std::vector<T> render_glyph<T>(const RenderSpec&, std::uint64_t, int, int);         \
  template std::vector<T> render_sample<T>(const LabelHierarchy&, int, std::uint64_t, int,     \
                                           int);                                              \
  template struct TaskStream<T>;                                                               \
  template TaskStream<T> build_iirc_stream<T>(const LabelHierarchy&, const StreamConfig&);     \
  template TaskStream<T> build_complete_stream<T>(const LabelHierarchy&, const StreamConfig&); \
  template TaskStream<T> build_stream<T>(const StreamConfig&);                                 \
  template TaskStream<T> flatten_stream<T>(const TaskStream<T>&);                              \
  template std::pair<std::vector<Sample<T>>, std::vector<Sample<T>>> build_pretext_set<T>(     \
      const LabelHierarchy&, const StreamConfig&);                                             \
  template void write_image_file<T>(const std::string&, const std::vector<T>&, int, int, int); \
  template std::vector<T> read_image_file<T>(const std::string&, int, int, int);               \
  template void export_stream<T>(const TaskStream<T>&, const std::string&);                    \
  template TaskStream<T> load_manifest<T>(const std::string&);

MLCL_INSTANTIATE_BENCHMARK(float)
MLCL_INSTANTIATE_BENCHMARK(double)

}  // namespace mlcl
