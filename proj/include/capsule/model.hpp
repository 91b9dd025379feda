#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace capsule {

enum class Architecture { resnet50, vit_cnn_hybrid, tiny_hybrid };
enum class HeadKind { linear, mlp };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view text);
std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct ModelSpec {
  Architecture architecture = Architecture::tiny_hybrid;
  std::int64_t num_classes = 2;
  std::int64_t cnn_dim = 64;
  std::int64_t vit_dim = 64;  // 0 for resnet50
  bool pretrained = false;
  std::int64_t input_size = 32;
  HeadKind head = HeadKind::linear;
  std::int64_t head_hidden = 128;
  /// Checkpoint whose backbone tensors seed a pretrained model. Empty means
  /// random initialization even when `pretrained` is set.
  std::string weights_path;

  /// Throws ConfigError for inconsistent fields. resnet50 fixes cnn_dim=2048;
  /// vit_cnn_hybrid fixes cnn_dim=512 (ResNet34) and vit_dim=768 (ViT-Base).
  void validate() const;
  std::int64_t head_input_dim() const { return cnn_dim + vit_dim; }
  bool operator==(const ModelSpec&) const = default;
};

/// Spec with the canonical widths and input size of `arch`.
ModelSpec default_spec(Architecture arch, std::int64_t num_classes);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& doc);

// ---------------------------------------------------------------------------
// Building blocks

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kExpansion = 4;
  BottleneckImpl(std::int64_t in, std::int64_t width, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  torch::nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

/// Convolutional branch as a chain of named stages, so GradCAM can tap any
/// stage output.
class CnnBranchImpl : public torch::nn::Module {
 public:
  explicit CnnBranchImpl(const ModelSpec& spec);

  struct Output {
    torch::Tensor map;       // last stage output (B, C, h, w)
    torch::Tensor captured;  // output of the requested stage, if any
  };
  Output forward(const torch::Tensor& x, std::string_view capture = {});
  const std::vector<std::string>& stage_names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(CnnBranch);

struct VitConfig {
  std::int64_t image_size = 224;
  std::int64_t patch = 16;
  std::int64_t dim = 768;
  std::int64_t depth = 12;
  std::int64_t heads = 12;
  std::int64_t mlp_dim = 3072;
};

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_dim);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::int64_t heads_;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TransformerBlock);

class VitBranchImpl : public torch::nn::Module {
 public:
  explicit VitBranchImpl(const VitConfig& config);
  /// Class-token embedding after the final norm, (B, dim).
  torch::Tensor forward(const torch::Tensor& x);

 private:
  VitConfig config_;
  torch::nn::Conv2d patch_embed{nullptr};
  torch::Tensor cls_token, pos_embed;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(VitBranch);

struct BackboneOutput {
  torch::Tensor cnn_map;
  torch::Tensor cnn_features;  // globally pooled cnn_map, (B, cnn_dim)
  torch::Tensor vit_features;  // (B, vit_dim); undefined for resnet50
  torch::Tensor captured;
};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const ModelSpec& spec);
  BackboneOutput forward(const torch::Tensor& x, std::string_view capture = {});
  /// Pre-head features concatenated in head-input order.
  static torch::Tensor fuse(const BackboneOutput& out);

  CnnBranch cnn{nullptr};
  VitBranch vit{nullptr};
};
TORCH_MODULE(Backbone);

class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(HeadKind kind, std::int64_t in, std::int64_t hidden, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& features);

  HeadKind kind;
  torch::nn::Linear hidden{nullptr};  // only for HeadKind::mlp
  torch::nn::Linear out{nullptr};
};
TORCH_MODULE(Head);

// ---------------------------------------------------------------------------

struct FeaturePair {
  torch::Tensor cnn;
  torch::Tensor vit;  // undefined for resnet50
};

/// Backbone plus a classification head whose outputs are `class_names`.
/// Copies share parameters; call clone() for an independent model.
class TrainedModel {
 public:
  TrainedModel(ModelSpec spec, std::vector<std::string> class_names, Backbone backbone, Head head);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Head& head() { return head_; }
  const Head& head() const { return head_; }

  /// Throws ConfigError unless x is (B, 3, input_size, input_size).
  void check_input(const torch::Tensor& x) const;
  torch::Tensor forward(const torch::Tensor& x);
  FeaturePair forward_features(const torch::Tensor& x);
  std::size_t class_index(std::string_view name) const;

  void train(bool on = true);
  void eval() { train(false); }
  void to(torch::Device device);
  std::vector<torch::Tensor> parameters() const;
  TrainedModel clone() const;

 private:
  ModelSpec spec_;
  std::vector<std::string> class_names_;
  Backbone backbone_;
  Head head_;
};

/// Builds a model with outputs `class_names`. Initialization is drawn from the
/// torch generator seeded with `seed`.
TrainedModel build_model(const ModelSpec& spec, std::vector<std::string> class_names, std::uint64_t seed);
/// Same, with placeholder class names "class0".."classN-1".
TrainedModel build_model(const ModelSpec& spec, std::uint64_t seed = 0);

/// New model whose backbone is a bit-exact copy of `model`'s and whose head
/// has one output per `new_class_names`. With copy_overlap, head rows of
/// classes present in both lists (and an MLP head's hidden layer) are copied,
/// so those logits are unchanged; every other row is drawn uniformly from
/// ±1/sqrt(fan_in) using `seed`.
TrainedModel expand_head(const TrainedModel& model, const std::vector<std::string>& new_class_names,
                         bool copy_overlap, std::uint64_t seed);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainedModel model;
  std::int64_t stage_index = 0;
};

/// Layout: "CAPSCKPT", u32 version, u64 header length, JSON header (spec,
/// class_names, stage_index, tensor table), then raw little-endian tensor data.
void save_checkpoint(const TrainedModel& model, std::int64_t stage_index, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every parameter and buffer of `src` into the same-named tensor of
/// `dst`. Throws ConfigError on missing names or shape mismatches.
void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst);

}  // namespace capsule
