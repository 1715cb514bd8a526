// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "ttaforge/container.hpp"
#include "ttaforge/error.hpp"
#include "ttaforge/optim.hpp"
#include "ttaforge/rng.hpp"

namespace ttaforge {

void ModelConfig::validate() const {
  if (image_size == 0 || channels == 0 || patch_size == 0 || d_model == 0 || heads == 0 || mlp_ratio == 0 ||
      num_classes == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (image_size % patch_size != 0) throw ConfigError("image size must be divisible by patch size");
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by the head count");
  if (!(ln_eps > 0.0)) throw ConfigError("layer norm eps must be positive");
}

ModulationMode parse_modulation(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "ln") return ModulationMode::LN;
  if (s == "cls") return ModulationMode::CLS;
  if (s == "feature") return ModulationMode::Feature;
  if (s == "all") return ModulationMode::All;
  throw ConfigError("unknown modulation mode '" + std::string(name) + "' (expected ln, cls, feature or all)");
}

std::string_view to_string(ModulationMode mode) {
  switch (mode) {
    case ModulationMode::LN: return "ln";
    case ModulationMode::CLS: return "cls";
    case ModulationMode::Feature: return "feature";
    case ModulationMode::All: return "all";
  }
  return "?";
}

static bool in_group(unsigned roles, ModulationMode mode) {
  switch (mode) {
    case ModulationMode::LN: return (roles & kRoleLayerNorm) != 0;
    case ModulationMode::CLS: return (roles & kRoleClsToken) != 0;
    case ModulationMode::Feature: return (roles & kRoleClassifier) == 0;
    case ModulationMode::All: return true;
  }
  return false;
}

// --- construction ------------------------------------------------------------

std::size_t Model::add_param(std::string name, Tensor value, unsigned roles) {
  params_.push_back(Parameter{std::move(name), ad::Var::parameter(std::move(value)), roles});
  return params_.size() - 1;
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m(config);
  Rng rng(seed);
  const std::size_t D = config.d_model;
  const std::size_t hidden = D * config.mlp_ratio;
  auto normal = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
  };
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  m.patch_w_ = m.add_param("patch_embed.weight", normal({config.patch_dim(), D}, fan_in(config.patch_dim())), kRoleNone);
  m.patch_b_ = m.add_param("patch_embed.bias", Tensor({D}), kRoleNone);
  m.cls_ = m.add_param("cls_token", normal({D}, 0.02), kRoleClsToken);
  m.pos_ = m.add_param("pos_embed", normal({config.tokens(), D}, 0.02), kRoleNone);
  for (std::size_t b = 0; b < config.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    BlockIndex bi{};
    bi.ln1_g = m.add_param(pre + "ln1.weight", Tensor({D}, 1.0), kRoleLayerNorm);
    bi.ln1_b = m.add_param(pre + "ln1.bias", Tensor({D}), kRoleLayerNorm);
    bi.q_w = m.add_param(pre + "attn.q.weight", normal({D, D}, fan_in(D)), kRoleNone);
    bi.q_b = m.add_param(pre + "attn.q.bias", Tensor({D}), kRoleNone);
    bi.k_w = m.add_param(pre + "attn.k.weight", normal({D, D}, fan_in(D)), kRoleNone);
    bi.k_b = m.add_param(pre + "attn.k.bias", Tensor({D}), kRoleNone);
    bi.v_w = m.add_param(pre + "attn.v.weight", normal({D, D}, fan_in(D)), kRoleNone);
    bi.v_b = m.add_param(pre + "attn.v.bias", Tensor({D}), kRoleNone);
    bi.o_w = m.add_param(pre + "attn.out.weight", normal({D, D}, fan_in(D)), kRoleNone);
    bi.o_b = m.add_param(pre + "attn.out.bias", Tensor({D}), kRoleNone);
    bi.ln2_g = m.add_param(pre + "ln2.weight", Tensor({D}, 1.0), kRoleLayerNorm);
    bi.ln2_b = m.add_param(pre + "ln2.bias", Tensor({D}), kRoleLayerNorm);
    bi.fc1_w = m.add_param(pre + "mlp.fc1.weight", normal({D, hidden}, fan_in(D)), kRoleNone);
    bi.fc1_b = m.add_param(pre + "mlp.fc1.bias", Tensor({hidden}), kRoleNone);
    bi.fc2_w = m.add_param(pre + "mlp.fc2.weight", normal({hidden, D}, fan_in(hidden)), kRoleNone);
    bi.fc2_b = m.add_param(pre + "mlp.fc2.bias", Tensor({D}), kRoleNone);
    m.blocks_.push_back(bi);
  }
  m.final_g_ = m.add_param("final_ln.weight", Tensor({D}, 1.0), kRoleLayerNorm);
  m.final_b_ = m.add_param("final_ln.bias", Tensor({D}), kRoleLayerNorm);
  m.head_w_ = m.add_param("head.weight", normal({D, config.num_classes}, fan_in(D)), kRoleClassifier);
  m.head_b_ = m.add_param("head.bias", Tensor({config.num_classes}), kRoleClassifier);
  m.freeze_all();
  return m;
}

Model::Model(const Model& other)
    : config_(other.config_),
      patch_w_(other.patch_w_), patch_b_(other.patch_b_), cls_(other.cls_), pos_(other.pos_),
      final_g_(other.final_g_), final_b_(other.final_b_), head_w_(other.head_w_), head_b_(other.head_b_),
      blocks_(other.blocks_) {
  params_.reserve(other.params_.size());
  for (const auto& prm : other.params_) {
    ad::Var v = ad::Var::parameter(prm.var.value());
    v.set_requires_grad(prm.var.requires_grad());
    params_.push_back(Parameter{prm.name, std::move(v), prm.roles});
  }
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

Parameter& Model::parameter(std::string_view name) {
  for (auto& prm : params_) {
    if (prm.name == name) return prm;
  }
  throw Error("model has no parameter '" + std::string(name) + "'");
}

const Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

void Model::set_trainable(ModulationMode mode) {
  for (auto& prm : params_) prm.var.set_requires_grad(in_group(prm.roles, mode));
}

void Model::freeze_all() {
  for (auto& prm : params_) prm.var.set_requires_grad(false);
}

// --- forward -----------------------------------------------------------------

ForwardResult Model::forward(const Tensor& images) const {
  const ModelConfig& c = config_;
  if (images.ndim() != 4 || images.shape()[1] != c.image_size || images.shape()[2] != c.image_size ||
      images.shape()[3] != c.channels) {
    throw ShapeError("forward: expected images of shape [batch, " + std::to_string(c.image_size) + ", " +
                     std::to_string(c.image_size) + ", " + std::to_string(c.channels) + "], got " +
                     shape_str(images.shape()));
  }
  const std::size_t batch = images.shape()[0];
  const std::size_t T = c.tokens();

  ad::Var x = ad::Var::constant(patchify(images, c.patch_size));
  x = ad::linear(x, p(patch_w_), p(patch_b_));
  x = ad::prepend_token(p(cls_), x, c.num_patches());
  x = ad::add_tiled(x, p(pos_));

  for (const BlockIndex& b : blocks_) {
    ad::Var y = ad::layer_norm(x, p(b.ln1_g), p(b.ln1_b), c.ln_eps);
    ad::Var q = ad::linear(y, p(b.q_w), p(b.q_b));
    ad::Var k = ad::linear(y, p(b.k_w), p(b.k_b));
    ad::Var v = ad::linear(y, p(b.v_w), p(b.v_b));
    ad::Var a = ad::attention(q, k, v, T, c.heads);
    x = x + ad::linear(a, p(b.o_w), p(b.o_b));
    y = ad::layer_norm(x, p(b.ln2_g), p(b.ln2_b), c.ln_eps);
    ad::Var h = ad::gelu(ad::linear(y, p(b.fc1_w), p(b.fc1_b)));
    x = x + ad::linear(h, p(b.fc2_w), p(b.fc2_b));
  }

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * T;
  ad::Var feats = ad::layer_norm(ad::select_rows(x, cls_rows), p(final_g_), p(final_b_), c.ln_eps);
  ad::Var logits = ad::linear(feats, p(head_w_), p(head_b_));
  return {feats, logits};
}

std::pair<Tensor, Tensor> Model::evaluate(const Tensor& images, std::size_t chunk) const {
  ad::NoGradGuard no_grad;
  const std::size_t n = images.shape()[0];
  Tensor feats({n, config_.d_model});
  Tensor logits({n, config_.num_classes});
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t count = std::min(chunk, n - first);
    ForwardResult r = forward(slice_images(images, first, count));
    std::copy(r.features.value().values().begin(), r.features.value().values().end(), feats.row(first).begin());
    std::copy(r.logits.value().values().begin(), r.logits.value().values().end(), logits.row(first).begin());
  }
  return {std::move(feats), std::move(logits)};
}

std::vector<ad::Var> select_modulation_params(const Model& model, ModulationMode mode) {
  std::vector<ad::Var> out;
  for (const auto& prm : model.parameters()) {
    if (in_group(prm.roles, mode)) out.push_back(prm.var);
  }
  return out;
}

std::vector<std::string> modulation_param_names(const Model& model, ModulationMode mode) {
  std::vector<std::string> out;
  for (const auto& prm : model.parameters()) {
    if (in_group(prm.roles, mode)) out.push_back(prm.name);
  }
  return out;
}

// --- helpers -----------------------------------------------------------------

Tensor patchify(const Tensor& images, std::size_t patch_size) {
  if (images.ndim() != 4) throw ShapeError("patchify: expected [batch, H, W, C]");
  const std::size_t n = images.shape()[0], H = images.shape()[1], W = images.shape()[2], C = images.shape()[3];
  if (H % patch_size != 0 || W % patch_size != 0) throw ShapeError("patchify: image side not divisible by patch size");
  const std::size_t gh = H / patch_size, gw = W / patch_size;
  const std::size_t pd = patch_size * patch_size * C;
  Tensor out({n * gh * gw, pd});
  double* dst = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t dy = 0; dy < patch_size; ++dy)
          for (std::size_t dx = 0; dx < patch_size; ++dx)
            for (std::size_t ch = 0; ch < C; ++ch) {
              const std::size_t y = py * patch_size + dy, x = px * patch_size + dx;
              *dst++ = images[((i * H + y) * W + x) * C + ch];
            }
  return out;
}

Tensor slice_images(const Tensor& images, std::size_t first, std::size_t count) {
  const Shape& s = images.shape();
  if (s.empty() || first + count > s[0] || count == 0) throw ShapeError("slice_images: range out of bounds");
  const std::size_t per = images.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = count;
  std::vector<double> data(images.values().begin() + static_cast<std::ptrdiff_t>(first * per),
                           images.values().begin() + static_cast<std::ptrdiff_t>((first + count) * per));
  return Tensor(std::move(out_shape), std::move(data));
}

Tensor gather_images(const Tensor& images, std::span<const std::size_t> indices) {
  const Shape& s = images.shape();
  if (s.empty() || indices.empty()) throw ShapeError("gather_images: empty selection");
  const std::size_t per = images.size() / s[0];
  Shape out_shape = s;
  out_shape[0] = indices.size();
  std::vector<double> data;
  data.reserve(indices.size() * per);
  for (std::size_t idx : indices) {
    if (idx >= s[0]) throw ShapeError("gather_images: index out of range");
    auto first = images.values().begin() + static_cast<std::ptrdiff_t>(idx * per);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(per));
  }
  return Tensor(std::move(out_shape), std::move(data));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j) {
      if (r[j] > r[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

std::vector<double> ln_no_affine(std::span<const double> x, double eps) {
  const auto n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double r = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mu) * r;
  return out;
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps) {
  if (gamma.size() != x.size() || beta.size() != x.size()) throw ShapeError("layer_norm: affine size mismatch");
  std::vector<double> out = ln_no_affine(x, eps);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = out[j] * gamma[j] + beta[j];
  return out;
}

ad::Var cross_entropy(const ad::Var& logits, std::span<const int> labels) {
  std::vector<std::size_t> cols(labels.begin(), labels.end());
  return ad::scale(ad::mean(ad::pick(ad::log_softmax_rows(logits), cols)), -1.0);
}

std::vector<double> train_source_model(Model& model, const Tensor& images, std::span<const int> labels,
                                       const TrainConfig& config) {
  const std::size_t n = images.shape()[0];
  if (labels.size() != n) throw ShapeError("train_source_model: label count mismatch");
  model.set_trainable(ModulationMode::All);
  std::vector<ad::Var> params = select_modulation_params(model, ModulationMode::All);
  OptimizerState opt(params, config.lr, config.momentum, config.clip_norm);
  Rng rng(config.seed);
  std::vector<std::size_t> order = rng.permutation(n);
  std::size_t cursor = 0;
  std::vector<double> losses;
  losses.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> idx;
    std::vector<int> y;
    for (std::size_t j = 0; j < std::min(config.batch_size, n); ++j) {
      if (cursor == n) {
        order = rng.permutation(n);
        cursor = 0;
      }
      idx.push_back(order[cursor]);
      y.push_back(labels[order[cursor]]);
      ++cursor;
    }
    ad::Var loss = cross_entropy(model.forward(gather_images(images, idx)).logits, y);
    losses.push_back(loss.value().item());
    clip_and_step(params, ad::backward(loss), opt);
  }
  model.freeze_all();
  return losses;
}

// --- checkpoints -------------------------------------------------------------

void save_model(const Model& model, const std::filesystem::path& path) {
  const ModelConfig& c = model.config();
  Container out;
  out.kind = "model";
  out.ints = {{"image_size", static_cast<std::int64_t>(c.image_size)},
              {"channels", static_cast<std::int64_t>(c.channels)},
              {"patch_size", static_cast<std::int64_t>(c.patch_size)},
              {"d_model", static_cast<std::int64_t>(c.d_model)},
              {"depth", static_cast<std::int64_t>(c.depth)},
              {"heads", static_cast<std::int64_t>(c.heads)},
              {"mlp_ratio", static_cast<std::int64_t>(c.mlp_ratio)},
              {"num_classes", static_cast<std::int64_t>(c.num_classes)}};
  out.add("config.ln_eps", Tensor::scalar(c.ln_eps));
  for (const auto& prm : model.parameters()) out.add(prm.name, prm.var.value());
  write_container(out, path);
}

Model load_model(const std::filesystem::path& path) {
  Container in = read_container(path, "model");
  auto dim = [&](const char* key) {
    const std::int64_t v = in.integer(key);
    if (v <= 0) throw FormatError(std::string("checkpoint field '") + key + "' must be positive");
    return static_cast<std::size_t>(v);
  };
  ModelConfig c;
  c.image_size = dim("image_size");
  c.channels = dim("channels");
  c.patch_size = dim("patch_size");
  c.d_model = dim("d_model");
  c.depth = dim("depth");
  c.heads = dim("heads");
  c.mlp_ratio = dim("mlp_ratio");
  c.num_classes = dim("num_classes");
  c.ln_eps = in.array("config.ln_eps").item();
  Model m = Model::init(c, 0);
  for (auto& prm : m.parameters()) {
    const Tensor& t = in.array(prm.name);
    if (t.shape() != prm.var.shape()) throw FormatError("checkpoint array '" + prm.name + "' has the wrong shape");
    prm.var.mutable_value() = t;
  }
  m.freeze_all();
  return m;
}

}  // namespace ttaforge
