#include "mlcl/config.hpp"

#include <algorithm>
#include <cerrno>
#include <climits>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mlcl {

namespace {

struct KindInfo {
  MethodKind kind;
  const char* name;
  bool buffer, ace, teacher, adapters, er, der;
};

constexpr KindInfo kKinds[] = {
    {MethodKind::kJoint, "joint", false, false, false, false, false, false},
    {MethodKind::kFinetune, "finetune", false, false, false, false, false, false},
    {MethodKind::kFinetuneAce, "finetune_ace", false, true, false, false, false, false},
    {MethodKind::kEr, "er", true, false, false, false, true, false},
    {MethodKind::kErAce, "er_ace", true, true, false, false, true, false},
    {MethodKind::kDerppAce, "derpp_ace", true, true, false, false, true, true},
    {MethodKind::kScad, "scad", true, true, true, true, true, true},
    {MethodKind::kScadNoMasks, "scad_no_masks", true, true, true, false, true, true},
};

const KindInfo& info_of(MethodKind kind) {
  for (const KindInfo& k : kKinds) {
    if (k.kind == kind) return k;
  }
  throw std::logic_error("unknown MethodKind value");
}

}  // namespace

const char* method_kind_name(MethodKind kind) { return info_of(kind).name; }

MethodKind method_kind_from_name(const std::string& name) {
  for (const KindInfo& k : kKinds) {
    if (name == k.name) return k.kind;
  }
  std::string valid;
  for (const KindInfo& k : kKinds) {
    if (!valid.empty()) valid += ", ";
    valid += k.name;
  }
  throw std::invalid_argument("unknown method kind '" + name + "' (valid: " + valid + ")");
}

bool method_uses_buffer(MethodKind kind) { return info_of(kind).buffer; }
bool method_uses_ace(MethodKind kind) { return info_of(kind).ace; }
bool method_uses_teacher(MethodKind kind) { return info_of(kind).teacher; }
bool method_uses_adapters(MethodKind kind) { return info_of(kind).adapters; }
bool method_uses_er(MethodKind kind) { return info_of(kind).er; }
bool method_uses_der(MethodKind kind) { return info_of(kind).der; }

std::vector<int> MethodSpec::resolved_layers(int num_blocks) const {
  if (distill_all_layers) {
    std::vector<int> all(static_cast<std::size_t>(num_blocks));
    for (int i = 0; i < num_blocks; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }
  return distill_layers;
}

void MethodSpec::collect_errors(std::vector<std::string>& errors) const {
  const std::string where = std::string("[method] (") + method_kind_name(kind) + ") ";
  auto bad = [&errors, &where](const std::string& what) { errors.push_back(where + what); };

  if (method_uses_buffer(kind)) {
    if (buffer_capacity <= 0) bad("requires buffer_capacity > 0");
    if (replay_batch_size < 1) bad("replay_batch_size: must be at least 1");
  } else if (buffer_capacity != 0) {
    bad("does not use a replay buffer; buffer_capacity must be 0");
  }
  if (kind == MethodKind::kScadNoMasks && lambda_fp_rep != 0.0) {
    bad("distills without masks; lambda_fp_rep must be 0");
  }
  if (!(std::isfinite(alpha) && alpha >= 0.0)) bad("alpha: must be finite and >= 0");
  if (!(std::isfinite(beta) && beta >= 0.0)) bad("beta: must be finite and >= 0");
  if (!(std::isfinite(lambda_fp) && lambda_fp >= 0.0)) bad("lambda_fp: must be finite and >= 0");
  if (!(std::isfinite(lambda_fp_rep) && lambda_fp_rep >= 0.0)) {
    bad("lambda_fp_rep: must be finite and >= 0");
  }
  if (epochs < 1) bad("epochs: must be at least 1");
  if (batch_size < 1) bad("batch_size: must be at least 1");
  if (!(std::isfinite(gumbel_tau) && gumbel_tau > 0.0)) bad("gumbel_tau: must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) bad("threshold: must lie strictly inside (0,1)");
  if (!distill_all_layers) {
    if (distill_layers.empty()) bad("distill_layers: empty layer list");
    for (std::size_t i = 0; i < distill_layers.size(); ++i) {
      if (distill_layers[i] < 0) bad("distill_layers: negative layer index");
      if (i > 0 && distill_layers[i] <= distill_layers[i - 1]) {
        bad("distill_layers: indices must be strictly increasing");
        break;
      }
    }
  }
}

void MethodSpec::validate() const {
  std::vector<std::string> errors;
  collect_errors(errors);
  if (!errors.empty()) {
    std::string msg = "invalid method spec:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

MethodSpec default_method_spec(MethodKind kind) {
  MethodSpec spec;
  spec.kind = kind;
  if (method_uses_buffer(kind)) spec.buffer_capacity = 200;
  if (kind == MethodKind::kScadNoMasks) spec.lambda_fp_rep = 0.0;
  return spec;
}

void OptimizerConfig::collect_errors(std::vector<std::string>& errors) const {
  auto bad = [&errors](const std::string& what) { errors.push_back("[optimizer] " + what); };
  if (!(std::isfinite(lr) && lr > 0.0)) bad("lr: must be positive");
  if (!(std::isfinite(clip_norm) && clip_norm > 0.0)) bad("clip_norm: must be positive");
  if (adapter_lr >= 0.0 && !(std::isfinite(adapter_lr) && adapter_lr > 0.0)) {
    bad("adapter_lr: must be positive when set");
  }
  if (pretrain_epochs < 0) bad("pretrain_epochs: must be >= 0");
  if (pretrain_lr >= 0.0 && !(std::isfinite(pretrain_lr) && pretrain_lr > 0.0)) {
    bad("pretrain_lr: must be positive when set");
  }
}

int ExperimentConfig::total_classes() const {
  return stream.superclasses + stream.superclasses * stream.subclasses_per_super;
}

ViTConfig ExperimentConfig::vit_config(int total_classes) const {
  ViTConfig cfg;
  cfg.image_size = stream.image_size;
  cfg.patch_size = backbone.patch_size;
  cfg.channels = stream.channels;
  cfg.embed_dim = backbone.embed_dim;
  cfg.num_blocks = backbone.num_blocks;
  cfg.num_heads = backbone.num_heads;
  cfg.mlp_ratio = backbone.mlp_ratio;
  cfg.total_classes = total_classes;
  cfg.drop_path = backbone.drop_path;
  return cfg;
}

void ExperimentConfig::collect_errors(std::vector<std::string>& errors) const {
  bool stream_ok = true;
  try {
    stream.validate();
  } catch (const std::invalid_argument& e) {
    stream_ok = false;
    errors.push_back(std::string("[stream] ") + e.what());
  }
  // The backbone is validated through the assembled transformer config; a
  // broken stream section still gets its own errors above, so use safe
  // placeholder dimensions in that case to surface backbone errors too.
  ViTConfig vit = vit_config(stream_ok ? total_classes() : 1);
  if (!stream_ok) {
    vit.image_size = backbone.patch_size > 0 ? backbone.patch_size : 1;
    vit.channels = 1;
  }
  try {
    vit.validate();
  } catch (const std::invalid_argument& e) {
    errors.push_back(std::string("[backbone] ") + e.what());
  }
  method.collect_errors(errors);
  if (!method.distill_all_layers) {
    for (int layer : method.distill_layers) {
      if (layer >= backbone.num_blocks) {
        errors.push_back("[method] distill_layers: layer " + std::to_string(layer) +
                         " out of range for a " + std::to_string(backbone.num_blocks) +
                         "-block backbone");
        break;
      }
    }
  }
  optimizer.collect_errors(errors);
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  collect_errors(errors);
  if (!errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

// ---- parsing --------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Parser {
  std::vector<std::string> errors;
  std::set<std::string> seen;  // "section.key" for duplicate detection
  bool lambda_fp_rep_set = false;
  bool adapter_lr_set = false;
  bool pretrain_lr_set = false;

  void fail(const std::string& section, const std::string& key, const std::string& why) {
    errors.push_back("[" + section + "] " + key + ": " + why);
  }

  bool parse_i(const std::string& v, int& out) {
    errno = 0;
    char* end = nullptr;
    long x = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE) return false;
    if (x < INT_MIN || x > INT_MAX) return false;
    out = static_cast<int>(x);
    return true;
  }

  bool parse_u(const std::string& v, std::uint64_t& out) {
    if (v.empty() || v[0] == '-') return false;
    errno = 0;
    char* end = nullptr;
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE) return false;
    out = static_cast<std::uint64_t>(x);
    return true;
  }

  bool parse_d(const std::string& v, double& out) {
    errno = 0;
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0' || errno == ERANGE) return false;
    out = x;
    return true;
  }

  void set_int(const std::string& sec, const std::string& key, const std::string& v, int& out) {
    if (!parse_i(v, out)) fail(sec, key, "not an integer ('" + v + "')");
  }
  void set_u64(const std::string& sec, const std::string& key, const std::string& v,
               std::uint64_t& out) {
    if (!parse_u(v, out)) fail(sec, key, "not a non-negative integer ('" + v + "')");
  }
  void set_double(const std::string& sec, const std::string& key, const std::string& v,
                  double& out) {
    if (!parse_d(v, out)) fail(sec, key, "not a number ('" + v + "')");
  }
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  Parser p;

  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        p.errors.push_back("line " + std::to_string(line_no) + ": malformed section header '" +
                           line + "'");
        continue;
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section != "stream" && section != "backbone" && section != "method" &&
          section != "optimizer") {
        p.errors.push_back("line " + std::to_string(line_no) + ": unknown section [" + section +
                           "]");
        section.clear();
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      p.errors.push_back("line " + std::to_string(line_no) + ": expected 'key = value', got '" +
                         line + "'");
      continue;
    }
    if (section.empty()) {
      p.errors.push_back("line " + std::to_string(line_no) + ": key outside any section");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      p.errors.push_back("line " + std::to_string(line_no) + ": empty key");
      continue;
    }
    if (!p.seen.insert(section + "." + key).second) {
      p.fail(section, key, "duplicate key");
      continue;
    }

    if (section == "stream") {
      if (key == "mode") {
        try {
          cfg.stream.mode = stream_mode_from_name(value);
        } catch (const std::exception&) {
          p.fail(section, key, "expected iirc_incomplete or complete ('" + value + "')");
        }
      } else if (key == "num_tasks") {
        p.set_int(section, key, value, cfg.stream.num_tasks);
      } else if (key == "superclasses") {
        p.set_int(section, key, value, cfg.stream.superclasses);
      } else if (key == "subclasses_per_super") {
        p.set_int(section, key, value, cfg.stream.subclasses_per_super);
      } else if (key == "train_per_subclass") {
        p.set_int(section, key, value, cfg.stream.train_per_subclass);
      } else if (key == "test_per_subclass") {
        p.set_int(section, key, value, cfg.stream.test_per_subclass);
      } else if (key == "image_size") {
        p.set_int(section, key, value, cfg.stream.image_size);
      } else if (key == "channels") {
        p.set_int(section, key, value, cfg.stream.channels);
      } else if (key == "seed") {
        p.set_u64(section, key, value, cfg.stream.seed);
      } else if (key == "pretext_classes") {
        p.set_int(section, key, value, cfg.stream.pretext_classes);
      } else if (key == "pretext_train_per_class") {
        p.set_int(section, key, value, cfg.stream.pretext_train_per_class);
      } else if (key == "pretext_test_per_class") {
        p.set_int(section, key, value, cfg.stream.pretext_test_per_class);
      } else {
        p.fail(section, key, "unknown key");
      }
    } else if (section == "backbone") {
      if (key == "patch_size") {
        p.set_int(section, key, value, cfg.backbone.patch_size);
      } else if (key == "embed_dim") {
        p.set_int(section, key, value, cfg.backbone.embed_dim);
      } else if (key == "num_blocks") {
        p.set_int(section, key, value, cfg.backbone.num_blocks);
      } else if (key == "num_heads") {
        p.set_int(section, key, value, cfg.backbone.num_heads);
      } else if (key == "mlp_ratio") {
        p.set_int(section, key, value, cfg.backbone.mlp_ratio);
      } else if (key == "drop_path") {
        p.set_double(section, key, value, cfg.backbone.drop_path);
      } else {
        p.fail(section, key, "unknown key");
      }
    } else if (section == "method") {
      if (key == "kind") {
        try {
          cfg.method.kind = method_kind_from_name(value);
        } catch (const std::invalid_argument& e) {
          p.fail(section, key, e.what());
        }
      } else if (key == "alpha") {
        p.set_double(section, key, value, cfg.method.alpha);
      } else if (key == "beta") {
        p.set_double(section, key, value, cfg.method.beta);
      } else if (key == "lambda_fp") {
        p.set_double(section, key, value, cfg.method.lambda_fp);
      } else if (key == "lambda_fp_rep") {
        p.set_double(section, key, value, cfg.method.lambda_fp_rep);
        p.lambda_fp_rep_set = true;
      } else if (key == "buffer_capacity") {
        p.set_int(section, key, value, cfg.method.buffer_capacity);
      } else if (key == "epochs") {
        p.set_int(section, key, value, cfg.method.epochs);
      } else if (key == "batch_size") {
        p.set_int(section, key, value, cfg.method.batch_size);
      } else if (key == "replay_batch_size") {
        p.set_int(section, key, value, cfg.method.replay_batch_size);
      } else if (key == "gumbel_tau") {
        p.set_double(section, key, value, cfg.method.gumbel_tau);
      } else if (key == "distill_layers") {
        if (value == "all") {
          cfg.method.distill_all_layers = true;
          cfg.method.distill_layers.clear();
        } else {
          cfg.method.distill_all_layers = false;
          cfg.method.distill_layers.clear();
          std::istringstream items(value);
          std::string item;
          bool ok = true;
          while (std::getline(items, item, ',')) {
            int layer = 0;
            if (!p.parse_i(trim(item), layer)) {
              ok = false;
              break;
            }
            cfg.method.distill_layers.push_back(layer);
          }
          if (!ok || cfg.method.distill_layers.empty()) {
            p.fail(section, key, "expected 'all' or a comma-separated layer list ('" + value +
                                     "')");
            cfg.method.distill_all_layers = true;
            cfg.method.distill_layers.clear();
          }
        }
      } else if (key == "threshold") {
        p.set_double(section, key, value, cfg.method.threshold);
      } else {
        p.fail(section, key, "unknown key");
      }
    } else if (section == "optimizer") {
      if (key == "lr") {
        p.set_double(section, key, value, cfg.optimizer.lr);
      } else if (key == "clip_norm") {
        p.set_double(section, key, value, cfg.optimizer.clip_norm);
      } else if (key == "adapter_lr") {
        p.set_double(section, key, value, cfg.optimizer.adapter_lr);
        p.adapter_lr_set = true;
      } else if (key == "pretrain_epochs") {
        p.set_int(section, key, value, cfg.optimizer.pretrain_epochs);
      } else if (key == "pretrain_lr") {
        p.set_double(section, key, value, cfg.optimizer.pretrain_lr);
        p.pretrain_lr_set = true;
      } else {
        p.fail(section, key, "unknown key");
      }
    }
  }

  // Per-kind default: scad_no_masks has no mask replay, so an unset
  // lambda_fp_rep defaults to 0 instead of the scad default.
  if (cfg.method.kind == MethodKind::kScadNoMasks && !p.lambda_fp_rep_set) {
    cfg.method.lambda_fp_rep = 0.0;
  }

  if (p.errors.empty()) cfg.collect_errors(p.errors);
  if (!p.errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const std::string& e : p.errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  os << "[stream]\n";
  os << "mode = " << stream_mode_name(cfg.stream.mode) << "\n";
  os << "num_tasks = " << cfg.stream.num_tasks << "\n";
  os << "superclasses = " << cfg.stream.superclasses << "\n";
  os << "subclasses_per_super = " << cfg.stream.subclasses_per_super << "\n";
  os << "train_per_subclass = " << cfg.stream.train_per_subclass << "\n";
  os << "test_per_subclass = " << cfg.stream.test_per_subclass << "\n";
  os << "image_size = " << cfg.stream.image_size << "\n";
  os << "channels = " << cfg.stream.channels << "\n";
  os << "seed = " << cfg.stream.seed << "\n";
  os << "pretext_classes = " << cfg.stream.pretext_classes << "\n";
  os << "pretext_train_per_class = " << cfg.stream.pretext_train_per_class << "\n";
  os << "pretext_test_per_class = " << cfg.stream.pretext_test_per_class << "\n";
  os << "\n[backbone]\n";
  os << "patch_size = " << cfg.backbone.patch_size << "\n";
  os << "embed_dim = " << cfg.backbone.embed_dim << "\n";
  os << "num_blocks = " << cfg.backbone.num_blocks << "\n";
  os << "num_heads = " << cfg.backbone.num_heads << "\n";
  os << "mlp_ratio = " << cfg.backbone.mlp_ratio << "\n";
  os << "drop_path = " << num(cfg.backbone.drop_path) << "\n";
  os << "\n[method]\n";
  os << "kind = " << method_kind_name(cfg.method.kind) << "\n";
  os << "alpha = " << num(cfg.method.alpha) << "\n";
  os << "beta = " << num(cfg.method.beta) << "\n";
  os << "lambda_fp = " << num(cfg.method.lambda_fp) << "\n";
  os << "lambda_fp_rep = " << num(cfg.method.lambda_fp_rep) << "\n";
  os << "buffer_capacity = " << cfg.method.buffer_capacity << "\n";
  os << "epochs = " << cfg.method.epochs << "\n";
  os << "batch_size = " << cfg.method.batch_size << "\n";
  os << "replay_batch_size = " << cfg.method.replay_batch_size << "\n";
  os << "gumbel_tau = " << num(cfg.method.gumbel_tau) << "\n";
  os << "distill_layers = ";
  if (cfg.method.distill_all_layers) {
    os << "all";
  } else {
    for (std::size_t i = 0; i < cfg.method.distill_layers.size(); ++i) {
      if (i) os << ",";
      os << cfg.method.distill_layers[i];
    }
  }
  os << "\n";
  os << "threshold = " << num(cfg.method.threshold) << "\n";
  os << "\n[optimizer]\n";
  os << "lr = " << num(cfg.optimizer.lr) << "\n";
  os << "clip_norm = " << num(cfg.optimizer.clip_norm) << "\n";
  if (cfg.optimizer.adapter_lr >= 0.0) {
    os << "adapter_lr = " << num(cfg.optimizer.adapter_lr) << "\n";
  }
  os << "pretrain_epochs = " << cfg.optimizer.pretrain_epochs << "\n";
  if (cfg.optimizer.pretrain_lr >= 0.0) {
    os << "pretrain_lr = " << num(cfg.optimizer.pretrain_lr) << "\n";
  }
  return os.str();
}

}  // namespace mlcl
