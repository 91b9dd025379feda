#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "capsule/catalog.hpp"
#include "capsule/curriculum.hpp"
#include "capsule/metrics.hpp"
#include "capsule/model.hpp"

namespace capsule {

struct TrainConfig {
  double learning_rate = 1e-3;  // Adam
  std::int64_t batch_size = 32;
  std::int64_t epochs_per_stage = 5;
  bool class_weights = false;  // inverse-frequency cross-entropy weights
  std::uint64_t seed = 0;
  std::string device = "cpu";
  bool curriculum = true;
  /// Single intra-op thread and fixed shuffles, so reruns match bit for bit.
  bool deterministic = true;
  int threads = 1;  // used when deterministic is false

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// "cpu" or "cuda[:n]"; throws ConfigError when the device is unavailable.
torch::Device resolve_device(const std::string& name);

/// Loads images as normalized (3, S, S) RGB tensors, caching by path.
class ImageLoader {
 public:
  explicit ImageLoader(std::int64_t input_size, bool cache = true);

  torch::Tensor load(const fs::path& path);
  torch::Tensor batch(const std::vector<const SampleRecord*>& records);
  std::int64_t input_size() const { return input_size_; }

 private:
  std::int64_t input_size_;
  bool cache_;
  std::unordered_map<std::string, torch::Tensor> cached_;
};

/// BGR 8-bit image to a normalized (3, S, S) RGB tensor.
torch::Tensor preprocess(const cv::Mat& bgr, std::int64_t input_size);

struct EpochRecord {
  std::int64_t stage = 0;
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  std::int64_t steps = 0;
  std::optional<WeightedMetrics> val;
};

struct StageTransition {
  std::int64_t from_stage = 0;
  std::int64_t to_stage = 0;
  std::vector<std::string> label_space;
  bool backbone_preserved = false;
  bool retained_logits_preserved = false;
};

struct TrainingLog {
  std::string mode;
  std::vector<EpochRecord> epochs;
  std::vector<StageTransition> transitions;
  std::uint64_t seed = 0;
  double wall_time_seconds = 0.0;
  nlohmann::json config_snapshot;

  std::vector<double> loss_curve() const;
  std::int64_t total_steps() const;
  /// With include_wall_time=false, identical runs serialize identically.
  nlohmann::json to_json(bool include_wall_time = true) const;
};

struct Evaluation {
  MetricsReport report;
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;
};

Evaluation evaluate(TrainedModel& model, const StageView& view, ImageLoader& loader, std::int64_t batch_size,
                    std::string method_name = {});

/// Runs epochs_per_stage epochs of Adam on `train`, evaluating on `val` after
/// each epoch when it has samples. `model`'s outputs must equal the stage's
/// label space. Throws TrainingAbort on a non-finite loss.
std::vector<EpochRecord> train_stage(TrainedModel& model, const StageView& train, const StageView* val,
                                     const TrainConfig& config, ImageLoader& loader,
                                     std::optional<std::int64_t> epochs = std::nullopt);

struct RunResult {
  TrainedModel model;
  TrainingLog log;
  std::optional<Evaluation> final_evaluation;
};

/// Called after each stage with the stage, the trained model, and the stage
/// evaluation on validation data (when there is any).
using StageCallback = std::function<void(const Stage&, const TrainedModel&, const std::optional<Evaluation>&)>;

/// Stage whose label space is the whole catalog (every class introduced).
Stage full_catalog_stage(const ClassCatalog& catalog);

/// Trains stage 0 from a freshly built model, then widens the head with
/// expand_head (copying retained rows) before every later stage.
RunResult run_curriculum(const DatasetManifest& manifest, const CurriculumSchedule& schedule, const ModelSpec& spec,
                         const TrainConfig& config, ImageLoader& loader, const StageCallback& on_stage = {});

/// One stage over the full catalog for `total_epochs` epochs.
RunResult run_direct(const DatasetManifest& manifest, const ModelSpec& spec, const TrainConfig& config,
                     std::int64_t total_epochs, ImageLoader& loader, const StageCallback& on_stage = {});

}  // namespace capsule
