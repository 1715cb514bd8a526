// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tiny ViT-style classifier: patch embedding, a learnable CLS token,
// learnable position embeddings, pre-norm encoder blocks, a final layer norm
// and a linear head. The feature extractor is everything but the head; its
// output (the final layer norm at the CLS position) is the feature tap used
// by the adaptation methods.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttaforge/autodiff.hpp"
#include "ttaforge/tensor.hpp"

namespace ttaforge {

struct ModelConfig {
  std::size_t image_size = 8;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t d_model = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 3;
  double ln_eps = 1e-6;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

/// Which parameters are updated during adaptation.
enum class ModulationMode { LN, CLS, Feature, All };

ModulationMode parse_modulation(std::string_view name);
std::string_view to_string(ModulationMode mode);

enum ParamRole : unsigned {
  kRoleNone = 0,
  kRoleLayerNorm = 1u << 0,
  kRoleClsToken = 1u << 1,
  kRoleClassifier = 1u << 2,
};

struct Parameter {
  std::string name;
  ad::Var var;
  unsigned roles = kRoleNone;
};

struct ForwardResult {
  ad::Var features;  // [batch, d_model], pre-classifier CLS representation
  ad::Var logits;    // [batch, num_classes]
};

class Model {
 public:
  /// Random initialization, fully determined by `seed`.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;

  /// images: [batch, H, W, C]. Records a graph when any parameter is
  /// trainable and gradients are enabled on this thread.
  ForwardResult forward(const Tensor& images) const;

  /// Graph-free forward in chunks; returns (features, logits) values.
  std::pair<Tensor, Tensor> evaluate(const Tensor& images, std::size_t chunk = 256) const;

  /// Marks exactly the parameters of `mode` trainable and freezes the rest.
  void set_trainable(ModulationMode mode);
  void freeze_all();

 private:
  explicit Model(ModelConfig config) : config_(std::move(config)) {}
  std::size_t add_param(std::string name, Tensor value, unsigned roles);
  void index_params();

  struct BlockIndex {
    std::size_t ln1_g, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  const ad::Var& p(std::size_t i) const { return params_[i].var; }

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::size_t patch_w_ = 0, patch_b_ = 0, cls_ = 0, pos_ = 0, final_g_ = 0, final_b_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<BlockIndex> blocks_;

};

/// The parameter group psi for a modulation mode, in model order.
std::vector<ad::Var> select_modulation_params(const Model& model, ModulationMode mode);
/// Names of the same group.
std::vector<std::string> modulation_param_names(const Model& model, ModulationMode mode);

/// Flattens [batch, H, W, C] images into [batch * patches, patch*patch*C] rows.
/// Patches are taken row-major over the grid; values inside a patch are
/// ordered (row, column, channel).
Tensor patchify(const Tensor& images, std::size_t patch_size);

/// Rows [first, first+count) of an image batch.
Tensor slice_images(const Tensor& images, std::size_t first, std::size_t count);
Tensor gather_images(const Tensor& images, std::span<const std::size_t> indices);

/// Argmax per row; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

/// (x - mean) / sqrt(var + eps), biased variance.
std::vector<double> ln_no_affine(std::span<const double> x, double eps);
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> gamma,
                               std::span<const double> beta, double eps);

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
};

/// Supervised cross-entropy training of every parameter; returns the loss per step.
std::vector<double> train_source_model(Model& model, const Tensor& images, std::span<const int> labels,
                                       const TrainConfig& config);

/// Mean cross-entropy -log softmax(logits)[label].
ad::Var cross_entropy(const ad::Var& logits, std::span<const int> labels);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace ttaforge
