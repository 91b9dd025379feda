#include "capsule/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>

#include "capsule/error.hpp"
#include "capsule/random.hpp"

namespace capsule {

namespace nn = torch::nn;

namespace {

constexpr std::pair<Architecture, std::string_view> kArchNames[] = {
    {Architecture::resnet50, "resnet50"},
    {Architecture::vit_cnn_hybrid, "vit_cnn_hybrid"},
    {Architecture::tiny_hybrid, "tiny_hybrid"},
};

constexpr std::int64_t kTinyPatch = 4;
constexpr std::int64_t kTinyDepth = 2;
constexpr std::int64_t kTinyHeads = 4;

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(false));
}

nn::Sequential make_downsample(std::int64_t in, std::int64_t out, std::int64_t stride) {
  if (stride == 1 && in == out) return nullptr;
  return nn::Sequential(conv(in, out, 1, stride, 0), nn::BatchNorm2d(out));
}

bool has_vit(Architecture arch) { return arch != Architecture::resnet50; }

VitConfig vit_config(const ModelSpec& spec) {
  if (spec.architecture == Architecture::vit_cnn_hybrid) return VitConfig{spec.input_size, 16, 768, 12, 12, 3072};
  return VitConfig{spec.input_size, kTinyPatch, spec.vit_dim, kTinyDepth, kTinyHeads, 2 * spec.vit_dim};
}

}  // namespace

std::string_view to_string(Architecture arch) {
  for (const auto& [a, name] : kArchNames) {
    if (a == arch) return name;
  }
  return "unknown";
}

Architecture parse_architecture(std::string_view text) {
  for (const auto& [a, name] : kArchNames) {
    if (name == text) return a;
  }
  throw ConfigError("unsupported architecture '" + std::string(text) +
                    "' (expected resnet50, vit_cnn_hybrid or tiny_hybrid)");
}

std::string_view to_string(HeadKind kind) { return kind == HeadKind::linear ? "linear" : "mlp"; }

HeadKind parse_head_kind(std::string_view text) {
  if (text == "linear") return HeadKind::linear;
  if (text == "mlp") return HeadKind::mlp;
  throw ConfigError("unknown head kind '" + std::string(text) + "' (expected linear or mlp)");
}

void ModelSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (head == HeadKind::mlp && head_hidden < 1) throw ConfigError("mlp head needs a positive hidden width");
  switch (architecture) {
    case Architecture::resnet50:
      if (cnn_dim != 2048 || vit_dim != 0) throw ConfigError("resnet50 has cnn_dim 2048 and no ViT branch");
      if (input_size < 32) throw ConfigError("resnet50 input_size must be >= 32");
      break;
    case Architecture::vit_cnn_hybrid:
      if (cnn_dim != 512 || vit_dim != 768) {
        throw ConfigError("vit_cnn_hybrid uses a ResNet34 branch (512) and a ViT-Base branch (768)");
      }
      if (input_size < 32 || input_size % 16 != 0) throw ConfigError("vit_cnn_hybrid input_size must be a multiple of 16");
      break;
    case Architecture::tiny_hybrid:
      if (cnn_dim < 1 || vit_dim < 1) throw ConfigError("tiny_hybrid needs positive cnn_dim and vit_dim");
      if (vit_dim % kTinyHeads != 0) throw ConfigError("tiny_hybrid vit_dim must be divisible by 4");
      if (input_size < 16 || input_size % kTinyPatch != 0) {
        throw ConfigError("tiny_hybrid input_size must be >= 16 and divisible by 4");
      }
      break;
  }
}

ModelSpec default_spec(Architecture arch, std::int64_t num_classes) {
  ModelSpec spec;
  spec.architecture = arch;
  spec.num_classes = num_classes;
  switch (arch) {
    case Architecture::resnet50:
      spec.cnn_dim = 2048;
      spec.vit_dim = 0;
      spec.input_size = 224;
      break;
    case Architecture::vit_cnn_hybrid:
      spec.cnn_dim = 512;
      spec.vit_dim = 768;
      spec.input_size = 224;
      break;
    case Architecture::tiny_hybrid:
      spec.cnn_dim = 64;
      spec.vit_dim = 64;
      spec.input_size = 32;
      break;
  }
  return spec;
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return {{"architecture", to_string(spec.architecture)},
          {"num_classes", spec.num_classes},
          {"cnn_dim", spec.cnn_dim},
          {"vit_dim", spec.vit_dim},
          {"pretrained", spec.pretrained},
          {"input_size", spec.input_size},
          {"head", to_string(spec.head)},
          {"head_hidden", spec.head_hidden},
          {"weights_path", spec.weights_path}};
}

ModelSpec spec_from_json(const nlohmann::json& doc) {
  try {
    const auto arch = parse_architecture(doc.value("architecture", std::string("tiny_hybrid")));
    ModelSpec spec = default_spec(arch, doc.value("num_classes", std::int64_t{2}));
    spec.cnn_dim = doc.value("cnn_dim", spec.cnn_dim);
    spec.vit_dim = doc.value("vit_dim", spec.vit_dim);
    spec.pretrained = doc.value("pretrained", spec.pretrained);
    spec.input_size = doc.value("input_size", spec.input_size);
    spec.head = parse_head_kind(doc.value("head", std::string("linear")));
    spec.head_hidden = doc.value("head_hidden", spec.head_hidden);
    spec.weights_path = doc.value("weights_path", std::string{});
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

BasicBlockImpl::BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride) {
  conv1 = register_module("conv1", conv(in, out, 3, stride, 1));
  bn1 = register_module("bn1", nn::BatchNorm2d(out));
  conv2 = register_module("conv2", conv(out, out, 3, 1, 1));
  bn2 = register_module("bn2", nn::BatchNorm2d(out));
  downsample = make_downsample(in, out, stride);
  if (downsample) register_module("downsample", downsample);
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = bn2(conv2(y));
  return torch::relu(y + (downsample ? downsample->forward(x) : x));
}

BottleneckImpl::BottleneckImpl(std::int64_t in, std::int64_t width, std::int64_t stride) {
  const std::int64_t out = width * kExpansion;
  conv1 = register_module("conv1", conv(in, width, 1, 1, 0));
  bn1 = register_module("bn1", nn::BatchNorm2d(width));
  conv2 = register_module("conv2", conv(width, width, 3, stride, 1));
  bn2 = register_module("bn2", nn::BatchNorm2d(width));
  conv3 = register_module("conv3", conv(width, out, 1, 1, 0));
  bn3 = register_module("bn3", nn::BatchNorm2d(out));
  downsample = make_downsample(in, out, stride);
  if (downsample) register_module("downsample", downsample);
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1(conv1(x)));
  y = torch::relu(bn2(conv2(y)));
  y = bn3(conv3(y));
  return torch::relu(y + (downsample ? downsample->forward(x) : x));
}

CnnBranchImpl::CnnBranchImpl(const ModelSpec& spec) {
  auto add = [&](std::string name, nn::Sequential seq) {
    names_.push_back(name);
    stages_.push_back(register_module(name, seq));
  };

  if (spec.architecture == Architecture::tiny_hybrid) {
    add("stem", nn::Sequential(conv(3, 16, 3, 1, 1), nn::BatchNorm2d(16), nn::Functional(torch::relu)));
    add("block1", nn::Sequential(BasicBlock(16, 16, 1)));
    add("block2", nn::Sequential(BasicBlock(16, 32, 2)));
    add("block3", nn::Sequential(BasicBlock(32, spec.cnn_dim, 2)));
    return;
  }

  add("stem", nn::Sequential(conv(3, 64, 7, 2, 3), nn::BatchNorm2d(64), nn::Functional(torch::relu),
                             nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
  const std::int64_t blocks[4] = {3, 4, 6, 3};
  const std::int64_t widths[4] = {64, 128, 256, 512};
  const bool bottleneck = spec.architecture == Architecture::resnet50;
  std::int64_t in = 64;
  for (int layer = 0; layer < 4; ++layer) {
    nn::Sequential seq;
    for (std::int64_t b = 0; b < blocks[layer]; ++b) {
      const std::int64_t stride = (b == 0 && layer > 0) ? 2 : 1;
      if (bottleneck) {
        seq->push_back(Bottleneck(in, widths[layer], stride));
        in = widths[layer] * BottleneckImpl::kExpansion;
      } else {
        seq->push_back(BasicBlock(in, widths[layer], stride));
        in = widths[layer];
      }
    }
    add("layer" + std::to_string(layer + 1), seq);
  }
}

CnnBranchImpl::Output CnnBranchImpl::forward(const torch::Tensor& x, std::string_view capture) {
  Output out;
  torch::Tensor h = x;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    h = stages_[i]->forward(h);
    if (names_[i] == capture) out.captured = h;
  }
  out.map = h;
  return out;
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_dim) : heads_(heads) {
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)));
  qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
  proj = register_module("proj", nn::Linear(dim, dim));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)));
  fc1 = register_module("fc1", nn::Linear(dim, mlp_dim));
  fc2 = register_module("fc2", nn::Linear(mlp_dim, dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto n = x.size(1);
  const auto d = x.size(2);
  const auto head_dim = d / heads_;
  // (3, B, heads, N, head_dim)
  auto qkv_t = qkv(norm1(x)).reshape({b, n, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_t[0], k = qkv_t[1], v = qkv_t[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim)), -1);
  auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, d});
  auto h = x + proj(y);
  return h + fc2(torch::gelu(fc1(norm2(h))));
}

VitBranchImpl::VitBranchImpl(const VitConfig& config) : config_(config) {
  const auto tokens = (config.image_size / config.patch) * (config.image_size / config.patch);
  patch_embed = register_module(
      "patch_embed", nn::Conv2d(nn::Conv2dOptions(3, config.dim, config.patch).stride(config.patch)));
  cls_token = register_parameter("cls_token", torch::randn({1, 1, config.dim}) * 0.02);
  pos_embed = register_parameter("pos_embed", torch::randn({1, tokens + 1, config.dim}) * 0.02);
  blocks = register_module("blocks", nn::ModuleList());
  for (std::int64_t i = 0; i < config.depth; ++i) {
    blocks->push_back(TransformerBlock(config.dim, config.heads, config.mlp_dim));
  }
  norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({config.dim}).eps(1e-6)));
}

torch::Tensor VitBranchImpl::forward(const torch::Tensor& x) {
  auto tokens = patch_embed(x).flatten(2).transpose(1, 2);  // (B, N, dim)
  auto cls = cls_token.expand({x.size(0), 1, config_.dim});
  auto h = torch::cat({cls, tokens}, 1) + pos_embed;
  for (auto& block : *blocks) h = block->as<TransformerBlock>()->forward(h);
  return norm(h).select(1, 0);
}

BackboneImpl::BackboneImpl(const ModelSpec& spec) {
  cnn = register_module("cnn", CnnBranch(spec));
  if (has_vit(spec.architecture)) vit = register_module("vit", VitBranch(vit_config(spec)));
}

BackboneOutput BackboneImpl::forward(const torch::Tensor& x, std::string_view capture) {
  auto c = cnn->forward(x, capture);
  BackboneOutput out;
  out.cnn_map = c.map;
  out.captured = c.captured;
  out.cnn_features = c.map.mean({2, 3});
  if (vit) out.vit_features = vit->forward(x);
  return out;
}

torch::Tensor BackboneImpl::fuse(const BackboneOutput& out) {
  return out.vit_features.defined() ? torch::cat({out.cnn_features, out.vit_features}, 1) : out.cnn_features;
}

HeadImpl::HeadImpl(HeadKind kind_, std::int64_t in, std::int64_t hidden_width, std::int64_t classes) : kind(kind_) {
  if (kind == HeadKind::mlp) {
    hidden = register_module("hidden", nn::Linear(in, hidden_width));
    out = register_module("out", nn::Linear(hidden_width, classes));
  } else {
    out = register_module("out", nn::Linear(in, classes));
  }
}

torch::Tensor HeadImpl::forward(const torch::Tensor& features) {
  const auto h = kind == HeadKind::mlp ? torch::relu(hidden(features)) : features;
  // One matrix-vector product per output row. A single GEMM may pick a
  // different kernel (and summation order) for a different number of rows,
  // which would perturb the logits of classes kept across expand_head.
  std::vector<torch::Tensor> logits;
  logits.reserve(static_cast<std::size_t>(out->weight.size(0)));
  for (std::int64_t c = 0; c < out->weight.size(0); ++c) logits.push_back(torch::mv(h, out->weight[c]) + out->bias[c]);
  return torch::stack(logits, 1);
}

// ---------------------------------------------------------------------------

TrainedModel::TrainedModel(ModelSpec spec, std::vector<std::string> class_names, Backbone backbone, Head head)
    : spec_(std::move(spec)), class_names_(std::move(class_names)), backbone_(std::move(backbone)),
      head_(std::move(head)) {
  if (static_cast<std::int64_t>(class_names_.size()) != spec_.num_classes) {
    throw ConfigError("model has " + std::to_string(spec_.num_classes) + " outputs but " +
                      std::to_string(class_names_.size()) + " class names");
  }
}

void TrainedModel::check_input(const torch::Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) != spec_.input_size || x.size(3) != spec_.input_size) {
    std::ostringstream os;
    os << "model expects input (B, 3, " << spec_.input_size << ", " << spec_.input_size << "), got " << x.sizes();
    throw ConfigError(os.str());
  }
}

torch::Tensor TrainedModel::forward(const torch::Tensor& x) {
  check_input(x);
  return head_->forward(BackboneImpl::fuse(backbone_->forward(x)));
}

FeaturePair TrainedModel::forward_features(const torch::Tensor& x) {
  check_input(x);
  auto out = backbone_->forward(x);
  return {out.cnn_features, out.vit_features};
}

std::size_t TrainedModel::class_index(std::string_view name) const {
  auto it = std::find(class_names_.begin(), class_names_.end(), name);
  if (it == class_names_.end()) {
    std::string valid;
    for (const auto& c : class_names_) valid += (valid.empty() ? "" : ", ") + c;
    throw ConfigError("class '" + std::string(name) + "' is not an output of this model (valid: " + valid + ")");
  }
  return static_cast<std::size_t>(it - class_names_.begin());
}

void TrainedModel::train(bool on) {
  backbone_->train(on);
  head_->train(on);
}

void TrainedModel::to(torch::Device device) {
  backbone_->to(device);
  head_->to(device);
}

std::vector<torch::Tensor> TrainedModel::parameters() const {
  auto params = backbone_->parameters();
  auto head_params = head_->parameters();
  params.insert(params.end(), head_params.begin(), head_params.end());
  return params;
}

TrainedModel TrainedModel::clone() const {
  Backbone backbone(spec_);
  copy_module_state(*backbone_, *backbone);
  Head head(spec_.head, spec_.head_input_dim(), spec_.head_hidden, spec_.num_classes);
  copy_module_state(*head_, *head);
  TrainedModel copy(spec_, class_names_, backbone, head);
  copy.train(backbone_->is_training());
  return copy;
}

void copy_module_state(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters(true);
  auto src_buffers = src.named_buffers(true);
  auto copy_all = [](const auto& from, auto to) {
    for (auto& item : to) {
      const torch::Tensor* s = from.find(item.key());
      if (!s) throw ConfigError("no tensor named '" + item.key() + "' to copy from");
      if (s->sizes() != item.value().sizes()) throw ConfigError("shape mismatch for '" + item.key() + "'");
      item.value().copy_(*s);
    }
  };
  copy_all(src_params, dst.named_parameters(true));
  copy_all(src_buffers, dst.named_buffers(true));
}

namespace {

void fill_uniform(torch::Tensor t, double bound, Rng& rng) {
  auto flat = t.view(-1);
  auto acc = flat.accessor<float, 1>();
  for (std::int64_t i = 0; i < flat.numel(); ++i) acc[i] = static_cast<float>(rng.uniform(-bound, bound));
}

}  // namespace

TrainedModel build_model(const ModelSpec& spec, std::vector<std::string> class_names, std::uint64_t seed) {
  spec.validate();
  if (static_cast<std::int64_t>(class_names.size()) != spec.num_classes) {
    throw ConfigError("class_names length does not match num_classes");
  }
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size()) {
    throw ConfigError("duplicate class names for model head");
  }
  torch::manual_seed(seed);
  Backbone backbone(spec);
  Head head(spec.head, spec.head_input_dim(), spec.head_hidden, spec.num_classes);
  if (spec.pretrained) {
    if (!spec.weights_path.empty()) {
      auto pre = load_checkpoint(spec.weights_path);
      if (!(pre.model.spec().architecture == spec.architecture)) {
        throw ConfigError("pretrained weights at " + spec.weights_path + " are for a different architecture");
      }
      copy_module_state(*pre.model.backbone(), *backbone);
    } else {
      std::cerr << "warning: no pretrained weights configured for " << to_string(spec.architecture)
                << "; using random initialization\n";
    }
  }
  return TrainedModel(spec, std::move(class_names), backbone, head);
}

TrainedModel build_model(const ModelSpec& spec, std::uint64_t seed) {
  std::vector<std::string> names;
  for (std::int64_t i = 0; i < spec.num_classes; ++i) names.push_back("class" + std::to_string(i));
  return build_model(spec, std::move(names), seed);
}

TrainedModel expand_head(const TrainedModel& model, const std::vector<std::string>& new_class_names,
                         bool copy_overlap, std::uint64_t seed) {
  if (std::set<std::string>(new_class_names.begin(), new_class_names.end()).size() != new_class_names.size()) {
    throw ConfigError("duplicate class names in expanded head");
  }
  if (new_class_names.size() < 2) throw ConfigError("expanded head needs at least 2 classes");
  const auto& old_names = model.class_names();
  bool overlap = false;
  for (const auto& n : new_class_names) {
    overlap = overlap || std::find(old_names.begin(), old_names.end(), n) != old_names.end();
  }
  if (copy_overlap && !overlap) throw ConfigError("copy_overlap requested but no class is shared with the old head");

  ModelSpec spec = model.spec();
  spec.num_classes = static_cast<std::int64_t>(new_class_names.size());

  Backbone backbone(spec);
  copy_module_state(*model.backbone(), *backbone);

  Head head(spec.head, spec.head_input_dim(), spec.head_hidden, spec.num_classes);
  {
    torch::NoGradGuard guard;
    Rng rng(seed);
    const auto& old_head = model.head();
    if (head->hidden) {
      if (copy_overlap) {
        head->hidden->weight.copy_(old_head->hidden->weight);
        head->hidden->bias.copy_(old_head->hidden->bias);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(head->hidden->weight.size(1)));
        fill_uniform(head->hidden->weight, bound, rng);
        fill_uniform(head->hidden->bias, bound, rng);
      }
    }
    auto& w = head->out->weight;
    auto& b = head->out->bias;
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.size(1)));
    for (std::size_t row = 0; row < new_class_names.size(); ++row) {
      auto it = std::find(old_names.begin(), old_names.end(), new_class_names[row]);
      const auto r = static_cast<std::int64_t>(row);
      if (copy_overlap && it != old_names.end()) {
        const auto src = static_cast<std::int64_t>(it - old_names.begin());
        w[r].copy_(old_head->out->weight[src]);
        b[r].copy_(old_head->out->bias[src]);
      } else {
        fill_uniform(w[r], bound, rng);
        fill_uniform(b[r], bound, rng);
      }
    }
  }
  TrainedModel expanded(spec, new_class_names, backbone, head);
  expanded.train(model.backbone()->is_training());
  return expanded;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

std::vector<std::pair<std::string, torch::Tensor>> all_tensors(const TrainedModel& model) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  auto collect = [&](const std::string& prefix, const torch::nn::Module& m) {
    for (const auto& p : m.named_parameters(true)) out.emplace_back(prefix + p.key(), p.value());
    for (const auto& p : m.named_buffers(true)) out.emplace_back(prefix + p.key(), p.value());
  };
  collect("backbone.", *model.backbone());
  collect("head.", *model.head());
  return out;
}

}  // namespace

void save_checkpoint(const TrainedModel& model, std::int64_t stage_index, const std::filesystem::path& path) {
  auto tensors = all_tensors(model);
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> payload;
  for (const auto& [name, t] : tensors) {
    auto c = t.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<std::uint64_t>(c.numel() * c.element_size());
    std::string dtype;
    if (c.scalar_type() == torch::kFloat) dtype = "f32";
    else if (c.scalar_type() == torch::kLong) dtype = "i64";
    else throw ConfigError("unsupported tensor dtype in checkpoint for '" + name + "'");
    table.push_back({{"name", name}, {"dtype", dtype}, {"shape", c.sizes().vec()}, {"offset", offset},
                     {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(c);
  }
  nlohmann::json header = {{"format", "capsule-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"spec", spec_to_json(model.spec())},
                           {"class_names", model.class_names()},
                           {"stage_index", stage_index},
                           {"tensors", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : payload) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path.string() + " is not a capsule checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_len = read_pod<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw DataError("truncated checkpoint header in " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  ModelSpec spec = spec_from_json(header.at("spec"));
  spec.pretrained = false;  // tensors come from this file
  auto class_names = header.at("class_names").get<std::vector<std::string>>();
  TrainedModel model = build_model(spec, class_names, 0);

  std::map<std::string, torch::Tensor> targets;
  for (auto& [name, t] : all_tensors(model)) targets.emplace(name, t);

  const auto data_start = in.tellg();
  torch::NoGradGuard guard;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = targets.find(name);
    if (it == targets.end()) throw DataError("checkpoint tensor '" + name + "' does not belong to the model");
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (torch::IntArrayRef(shape) != it->second.sizes()) throw DataError("shape mismatch for '" + name + "'");
    const auto dtype = entry.at("dtype").get<std::string>();
    auto expected = dtype == "f32" ? torch::kFloat : torch::kLong;
    if (it->second.scalar_type() != expected) throw DataError("dtype mismatch for '" + name + "'");
    auto buffer = torch::empty(shape, torch::TensorOptions().dtype(expected));
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(buffer.data_ptr()), static_cast<std::streamsize>(entry.at("nbytes").get<std::uint64_t>()));
    if (!in) throw DataError("truncated tensor data for '" + name + "' in " + path.string());
    it->second.copy_(buffer);
    targets.erase(it);
  }
  if (!targets.empty()) throw DataError("checkpoint " + path.string() + " lacks tensor '" + targets.begin()->first + "'");
  model.eval();
  return {model, header.value("stage_index", std::int64_t{0})};
}

}  // namespace capsule
