#include "mlcl/vit.hpp"

#include <cmath>
#include <fstream>

#include "mlcl/ops.hpp"
#include "mlcl/serialize.hpp"

namespace mlcl {

namespace {
constexpr char kCheckpointMagic[8] = {'M', 'L', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kInitStd = 0.02;
}  // namespace

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("ViTConfig: patch_size " + std::to_string(patch_size) +
                                " must divide image_size " + std::to_string(image_size));
  }
  if (channels <= 0) throw std::invalid_argument("ViTConfig: channels must be positive");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("ViTConfig: num_heads " + std::to_string(num_heads) +
                                " must divide embed_dim " + std::to_string(embed_dim));
  }
  if (num_blocks <= 0) throw std::invalid_argument("ViTConfig: num_blocks must be positive");
  if (mlp_ratio <= 0) throw std::invalid_argument("ViTConfig: mlp_ratio must be positive");
  if (total_classes <= 0) throw std::invalid_argument("ViTConfig: total_classes must be positive");
  if (drop_path < 0.0 || drop_path >= 1.0) {
    throw std::invalid_argument("ViTConfig: drop_path must lie in [0, 1)");
  }
}

template <class T>
Vit<T>::Vit(const ViTConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(Rng::derive(init_seed, "vit-init"));
  const int d = config_.embed_dim;
  const int hidden = d * config_.mlp_ratio;

  auto weight = [&](Shape shape, std::string name) {
    return Parameter<T>{Tensor<T>::trunc_normal(std::move(shape), rng, kInitStd, true),
                        std::move(name), false};
  };
  auto zeros = [&](Shape shape, std::string name) {
    return Parameter<T>{Tensor<T>::zeros(std::move(shape), true), std::move(name), false};
  };
  auto ones = [&](Shape shape, std::string name) {
    return Parameter<T>{Tensor<T>::full(std::move(shape), T(1), true), std::move(name), false};
  };

  patch_weight_ = weight({config_.patch_dim(), d}, "patch_embed.weight");
  patch_bias_ = zeros({d}, "patch_embed.bias");
  cls_token_ = weight({d}, "cls_token");
  pos_embed_ = weight({config_.tokens(), d}, "pos_embed");

  blocks_.reserve(static_cast<std::size_t>(config_.num_blocks));
  for (int l = 0; l < config_.num_blocks; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b{
        ones({d}, p + "ln1.gamma"),    zeros({d}, p + "ln1.beta"),
        weight({d, d}, p + "attn.wq"), zeros({d}, p + "attn.bq"),
        weight({d, d}, p + "attn.wk"), zeros({d}, p + "attn.bk"),
        weight({d, d}, p + "attn.wv"), zeros({d}, p + "attn.bv"),
        weight({d, d}, p + "attn.wo"), zeros({d}, p + "attn.bo"),
        ones({d}, p + "ln2.gamma"),    zeros({d}, p + "ln2.beta"),
        weight({d, hidden}, p + "mlp.w1"), zeros({hidden}, p + "mlp.b1"),
        weight({hidden, d}, p + "mlp.w2"), zeros({d}, p + "mlp.b2"),
    };
    blocks_.push_back(std::move(b));
  }

  ln_f_gamma_ = ones({d}, "ln_f.gamma");
  ln_f_beta_ = zeros({d}, "ln_f.beta");
  head_weight_ = weight({d, config_.total_classes}, "head.weight");
  head_bias_ = zeros({config_.total_classes}, "head.bias");
}

template <class T>
std::vector<Parameter<T>*> Vit<T>::parameters() {
  std::vector<Parameter<T>*> out;
  out.push_back(&patch_weight_);
  out.push_back(&patch_bias_);
  out.push_back(&cls_token_);
  out.push_back(&pos_embed_);
  for (auto& b : blocks_) {
    for (Parameter<T>* p : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
                            &b.wo, &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.w1, &b.b1, &b.w2, &b.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&ln_f_gamma_);
  out.push_back(&ln_f_beta_);
  out.push_back(&head_weight_);
  out.push_back(&head_bias_);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> Vit<T>::parameters() const {
  auto mut = const_cast<Vit<T>*>(this)->parameters();
  return std::vector<const Parameter<T>*>(mut.begin(), mut.end());
}

template <class T>
Parameter<T>* Vit<T>::find_parameter(const std::string& name) {
  for (Parameter<T>* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <class T>
Tensor<T> Vit<T>::extract_patches(const Tensor<T>& images) const {
  if (images.ndim() != 2 || images.cols() != config_.image_dim()) {
    throw std::invalid_argument("Vit::forward: expected images of shape [B," +
                                std::to_string(config_.image_dim()) + "], got " +
                                shape_str(images.shape()));
  }
  const int b = images.rows();
  const int g = config_.grid();
  const int ps = config_.patch_size;
  const int hw = config_.image_size;
  const int pd = config_.patch_dim();
  const int s = config_.num_patches();

  // Pure data movement on constant pixel data; gradients enter downstream
  // through the projection weights.
  Tensor<T> patches = Tensor<T>::zeros({b * s, pd}, false);
  const T* iv = images.values().data();
  T* pv = patches.values_mut().data();
  for (int bi = 0; bi < b; ++bi) {
    const T* img = iv + static_cast<std::size_t>(bi) * config_.image_dim();
    for (int py = 0; py < g; ++py) {
      for (int px = 0; px < g; ++px) {
        T* row = pv + (static_cast<std::size_t>(bi) * s + static_cast<std::size_t>(py) * g + px) * pd;
        for (int c = 0; c < config_.channels; ++c) {
          for (int dy = 0; dy < ps; ++dy) {
            for (int dx = 0; dx < ps; ++dx) {
              row[(static_cast<std::size_t>(c) * ps + dy) * ps + dx] =
                  img[(static_cast<std::size_t>(c) * hw + py * ps + dy) * hw + px * ps + dx];
            }
          }
        }
      }
    }
  }
  return patches;
}

template <class T>
Tensor<T> Vit<T>::embed(const Tensor<T>& images) const {
  const int b = images.rows();
  Tensor<T> patches = extract_patches(images);
  Tensor<T> tok = add_bias_rows(matmul(patches, patch_weight_.value), patch_bias_.value);
  Tensor<T> x = prepend_class_token(cls_token_.value, tok, b);
  return add(x, tile_rows(pos_embed_.value, b));
}

template <class T>
VitForward<T> Vit<T>::forward(const Tensor<T>& images, bool collect_traces, bool train,
                              Rng* drop_rng) const {
  const int b = images.rows();
  const int t = config_.tokens();
  const bool dropping = train && config_.drop_path > 0.0;
  if (dropping && drop_rng == nullptr) {
    throw std::invalid_argument("Vit::forward: drop_path is enabled but no rng was supplied");
  }

  Tensor<T> x = embed(images);
  VitForward<T> out;
  if (collect_traces) out.traces.reserve(static_cast<std::size_t>(config_.num_blocks));

  auto branch_factors = [&]() {
    std::vector<T> f(static_cast<std::size_t>(b));
    const double keep = 1.0 - config_.drop_path;
    for (auto& v : f) v = drop_rng->coin(config_.drop_path) ? T(0) : static_cast<T>(1.0 / keep);
    return f;
  };

  for (const Block& blk : blocks_) {
    Tensor<T> h = layer_norm_rows(x, blk.ln1_gamma.value, blk.ln1_beta.value);
    Tensor<T> q = add_bias_rows(matmul(h, blk.wq.value), blk.bq.value);
    Tensor<T> k = add_bias_rows(matmul(h, blk.wk.value), blk.bk.value);
    Tensor<T> v = add_bias_rows(matmul(h, blk.wv.value), blk.bv.value);
    Tensor<T> att = multi_head_attention(q, k, v, config_.num_heads, b);
    att = add_bias_rows(matmul(att, blk.wo.value), blk.bo.value);
    if (dropping) att = scale_row_blocks(att, branch_factors(), t);
    x = add(x, att);

    Tensor<T> h2 = layer_norm_rows(x, blk.ln2_gamma.value, blk.ln2_beta.value);
    Tensor<T> m = add_bias_rows(matmul(h2, blk.w1.value), blk.b1.value);
    m = gelu(m);
    m = add_bias_rows(matmul(m, blk.w2.value), blk.b2.value);
    if (dropping) m = scale_row_blocks(m, branch_factors(), t);
    x = add(x, m);

    if (collect_traces) out.traces.push_back(x);
  }

  Tensor<T> cls_rows = take_rows_strided(x, t, 0);
  cls_rows = layer_norm_rows(cls_rows, ln_f_gamma_.value, ln_f_beta_.value);
  out.logits = add_bias_rows(matmul(cls_rows, head_weight_.value), head_bias_.value);
  return out;
}

template <class T>
Tensor<T> Vit<T>::logits_eval(const Tensor<T>& images) const {
  NoGradGuard no_grad;
  return forward(images, false, false).logits;
}

template <class T>
Vit<T> Vit<T>::clone() const {
  Vit copy;
  copy.config_ = config_;
  copy.blocks_.resize(blocks_.size());
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.clone_values(src[i]->value.requires_grad());
    dst[i]->name = src[i]->name;
    dst[i]->frozen = src[i]->frozen;
  }
  return copy;
}

template <class T>
Vit<T> Vit<T>::clone_into_teacher() const {
  Vit teacher = clone();
  for (Parameter<T>* p : teacher.parameters()) {
    p->frozen = true;
    // A frozen teacher never joins a graph: its outputs are constants.
    p->value.set_requires_grad(false);
  }
  return teacher;
}

template <class T>
bool Vit<T>::all_frozen() const {
  for (const Parameter<T>* p : parameters()) {
    if (!p->frozen) return false;
  }
  return true;
}

template <class T>
void Vit<T>::replace_head(int total_classes, Rng& rng) {
  if (total_classes <= 0) throw std::invalid_argument("replace_head: total_classes must be positive");
  config_.total_classes = total_classes;
  head_weight_.value =
      Tensor<T>::trunc_normal({config_.embed_dim, total_classes}, rng, kInitStd, true);
  head_bias_.value = Tensor<T>::zeros({total_classes}, true);
}

template <class T>
std::uint64_t Vit<T>::params_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Parameter<T>* p : parameters()) {
    h = io::fnv1a(p->value.values().data(), p->value.size() * sizeof(T), h);
  }
  return h;
}

template <class T>
double Vit<T>::grad_abs_sum() const {
  double acc = 0.0;
  for (const Parameter<T>* p : parameters()) {
    // Reads the buffer without forcing allocation when it never existed.
    const auto& grad = p->value.raw()->grad;
    for (T g : grad) acc += std::abs(static_cast<double>(g));
  }
  return acc;
}

template <class T>
void save_checkpoint(const Vit<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  io::write_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
  io::write_pod<std::uint32_t>(os, kCheckpointVersion);
  const ViTConfig& c = model.config();
  for (int v : {c.image_size, c.patch_size, c.channels, c.embed_dim, c.num_blocks, c.num_heads,
                c.mlp_ratio, c.total_classes}) {
    io::write_pod<std::int32_t>(os, v);
  }
  io::write_pod<double>(os, c.drop_path);
  const auto params = model.parameters();
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    io::write_string(os, p->name);
    io::write_tensor(os, p->value);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <class T>
Vit<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  io::read_bytes(is, magic, sizeof(magic));
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a model checkpoint");
  }
  const auto version = io::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  ViTConfig c;
  c.image_size = io::read_pod<std::int32_t>(is);
  c.patch_size = io::read_pod<std::int32_t>(is);
  c.channels = io::read_pod<std::int32_t>(is);
  c.embed_dim = io::read_pod<std::int32_t>(is);
  c.num_blocks = io::read_pod<std::int32_t>(is);
  c.num_heads = io::read_pod<std::int32_t>(is);
  c.mlp_ratio = io::read_pod<std::int32_t>(is);
  c.total_classes = io::read_pod<std::int32_t>(is);
  c.drop_path = io::read_pod<double>(is);

  Vit<T> model(c, 0);
  auto params = model.parameters();
  const auto count = io::read_pod<std::uint32_t>(is);
  if (count != params.size()) {
    throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path);
  }
  for (Parameter<T>* p : params) {
    const std::string name = io::read_string(is);
    if (name != p->name) {
      throw std::runtime_error("load_checkpoint: expected parameter '" + p->name + "', found '" +
                               name + "'");
    }
    Tensor<T> t = io::read_tensor<T>(is);
    if (t.shape() != p->value.shape()) {
      shape_error("load_checkpoint(" + name + ")", p->value.shape(), t.shape());
    }
    t.set_requires_grad(p->value.requires_grad());
    p->value = t;
  }
  return model;
}

template <class T>
Vit<T> load_checkpoint(const std::string& path, const ViTConfig& expected) {
  Vit<T> model = load_checkpoint<T>(path);
  if (!(model.config() == expected)) {
    throw std::runtime_error("load_checkpoint: config stored in " + path +
                             " does not match the expected config");
  }
  return model;
}

template class Vit<float>;
template class Vit<double>;
template void save_checkpoint<float>(const Vit<float>&, const std::string&);
template void save_checkpoint<double>(const Vit<double>&, const std::string&);
template Vit<float> load_checkpoint<float>(const std::string&);
template Vit<double> load_checkpoint<double>(const std::string&);
template Vit<float> load_checkpoint<float>(const std::string&, const ViTConfig&);
template Vit<double> load_checkpoint<double>(const std::string&, const ViTConfig&);

}  // namespace mlcl
