#include "capsule/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "capsule/error.hpp"
#include "capsule/random.hpp"

namespace capsule {

namespace F = torch::nn::functional;

namespace {

constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kHeadStream = 2;
constexpr std::uint64_t kShuffleStream = 3;

void configure_threads(const TrainConfig& config) {
  torch::set_num_threads(config.deterministic ? 1 : std::max(1, config.threads));
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }
  return order;
}

torch::Tensor class_weight_tensor(const StageView& view) {
  const auto counts = view.label_counts();
  const double total = static_cast<double>(view.samples.size());
  const double k = static_cast<double>(counts.size());
  auto w = torch::zeros({static_cast<std::int64_t>(counts.size())});
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) w[static_cast<std::int64_t>(i)] = total / (k * static_cast<double>(counts[i]));
  }
  return w;
}

struct Probe {
  torch::Tensor cnn, vit, logits;
};

Probe probe(TrainedModel& model, const torch::Tensor& batch) {
  torch::NoGradGuard guard;
  const bool was_training = model.backbone()->is_training();
  model.eval();
  auto f = model.forward_features(batch);
  Probe p{f.cnn.clone(), f.vit.defined() ? f.vit.clone() : torch::Tensor{}, model.forward(batch).clone()};
  model.train(was_training);
  return p;
}

bool equal_or_both_undefined(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.defined() != b.defined()) return false;
  return !a.defined() || torch::equal(a, b);
}

torch::Tensor probe_batch(const StageView& view, ImageLoader& loader) {
  std::vector<const SampleRecord*> records;
  for (std::size_t i = 0; i < view.samples.size() && records.size() < 8; ++i) records.push_back(&view.samples[i].record);
  return loader.batch(records);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs_per_stage < 1) throw ConfigError("epochs_per_stage must be at least 1");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"optimizer", "adam"},       {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs_per_stage", c.epochs_per_stage}, {"loss", "cross_entropy"}, {"class_weights", c.class_weights},
          {"seed", c.seed},             {"device", c.device},               {"curriculum", c.curriculum},
          {"deterministic", c.deterministic}, {"threads", c.threads}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  TrainConfig c;
  try {
    if (doc.contains("optimizer") && doc.at("optimizer") != "adam") throw ConfigError("only the adam optimizer is supported");
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.epochs_per_stage = doc.value("epochs_per_stage", c.epochs_per_stage);
    c.class_weights = doc.value("class_weights", c.class_weights);
    c.seed = doc.value("seed", c.seed);
    c.device = doc.value("device", c.device);
    c.curriculum = doc.value("curriculum", c.curriculum);
    c.deterministic = doc.value("deterministic", c.deterministic);
    c.threads = doc.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

torch::Device resolve_device(const std::string& name) {
  if (name.empty() || name == "cpu") return torch::kCPU;
  if (name.rfind("cuda", 0) == 0) {
    if (!torch::cuda::is_available()) throw ConfigError("device '" + name + "' requested but CUDA is not available");
    return torch::Device(name);
  }
  throw ConfigError("unknown device '" + name + "'");
}

torch::Tensor preprocess(const cv::Mat& bgr, std::int64_t input_size) {
  if (bgr.empty() || bgr.type() != CV_8UC3) throw DataError("expected an 8-bit 3-channel image");
  cv::Mat resized;
  if (bgr.rows != input_size || bgr.cols != input_size) {
    cv::resize(bgr, resized, cv::Size(static_cast<int>(input_size), static_cast<int>(input_size)), 0, 0,
               cv::INTER_AREA);
  } else {
    resized = bgr;
  }
  cv::Mat rgb;
  cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {input_size, input_size, 3}, torch::kUInt8).clone();
  t = t.permute({2, 0, 1}).to(torch::kFloat).div_(255.0f);
  for (int c = 0; c < 3; ++c) t[c].sub_(kMean[c]).div_(kStd[c]);
  return t.contiguous();
}

ImageLoader::ImageLoader(std::int64_t input_size, bool cache) : input_size_(input_size), cache_(cache) {}

torch::Tensor ImageLoader::load(const fs::path& path) {
  const std::string key = path.string();
  if (cache_) {
    auto it = cached_.find(key);
    if (it != cached_.end()) return it->second;
  }
  cv::Mat img = cv::imread(key, cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot read image " + key);
  auto t = preprocess(img, input_size_);
  if (cache_) cached_.emplace(key, t);
  return t;
}

torch::Tensor ImageLoader::batch(const std::vector<const SampleRecord*>& records) {
  std::vector<torch::Tensor> items;
  items.reserve(records.size());
  for (const auto* r : records) items.push_back(load(r->image_path));
  return torch::stack(items);
}

std::vector<double> TrainingLog::loss_curve() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.train_loss);
  return out;
}

std::int64_t TrainingLog::total_steps() const {
  std::int64_t n = 0;
  for (const auto& e : epochs) n += e.steps;
  return n;
}

nlohmann::json TrainingLog::to_json(bool include_wall_time) const {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json r = {{"stage", e.stage}, {"epoch", e.epoch}, {"train_loss", e.train_loss}, {"steps", e.steps}};
    if (e.val) {
      r["val"] = {{"accuracy", e.val->accuracy},
                  {"precision", e.val->precision},
                  {"recall", e.val->recall},
                  {"f1", e.val->f1}};
    }
    records.push_back(std::move(r));
  }
  nlohmann::json transitions_json = nlohmann::json::array();
  for (const auto& t : transitions) {
    transitions_json.push_back({{"from_stage", t.from_stage},
                                {"to_stage", t.to_stage},
                                {"label_space", t.label_space},
                                {"backbone_preserved", t.backbone_preserved},
                                {"retained_logits_preserved", t.retained_logits_preserved}});
  }
  nlohmann::json doc = {{"mode", mode},
                        {"seed", seed},
                        {"epochs", records},
                        {"transitions", transitions_json},
                        {"config", config_snapshot}};
  if (include_wall_time) doc["wall_time_seconds"] = wall_time_seconds;
  return doc;
}

Evaluation evaluate(TrainedModel& model, const StageView& view, ImageLoader& loader, std::int64_t batch_size,
                    std::string method_name) {
  if (view.samples.empty()) throw DataError("cannot evaluate on an empty view");
  torch::NoGradGuard guard;
  const bool was_training = model.backbone()->is_training();
  model.eval();
  std::vector<std::size_t> truth, predicted;
  for (std::size_t start = 0; start < view.samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(view.samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const SampleRecord*> records;
    for (std::size_t i = start; i < end; ++i) {
      records.push_back(&view.samples[i].record);
      truth.push_back(view.samples[i].label_index);
    }
    auto logits = model.forward(loader.batch(records));
    auto argmax = logits.argmax(1).to(torch::kLong);
    for (std::int64_t i = 0; i < argmax.size(0); ++i) predicted.push_back(static_cast<std::size_t>(argmax[i].item<std::int64_t>()));
  }
  model.train(was_training);
  auto cm = confusion(std::span<const std::size_t>(truth), std::span<const std::size_t>(predicted),
                      view.stage.label_space);
  return {weighted_report(cm, std::move(method_name)), cm, std::move(predicted)};
}

std::vector<EpochRecord> train_stage(TrainedModel& model, const StageView& train, const StageView* val,
                                     const TrainConfig& config, ImageLoader& loader,
                                     std::optional<std::int64_t> epochs) {
  config.validate();
  if (train.samples.empty()) {
    throw DataError("stage " + std::to_string(train.stage.index) + " has no training samples");
  }
  if (model.class_names() != train.stage.label_space) {
    throw ConfigError("model head does not match the label space of stage " + std::to_string(train.stage.index));
  }
  configure_threads(config);
  const auto device = resolve_device(config.device);
  model.to(device);

  torch::optim::Adam optimizer(model.parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto loss_options = F::CrossEntropyFuncOptions();
  if (config.class_weights) loss_options = loss_options.weight(class_weight_tensor(train).to(device));

  const auto stage_index = static_cast<std::int64_t>(train.stage.index);
  const std::int64_t n_epochs = epochs.value_or(config.epochs_per_stage);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<EpochRecord> records;
  for (std::int64_t epoch = 0; epoch < n_epochs; ++epoch) {
    model.train(true);
    const auto order = shuffled(train.samples.size(),
                                derive_seed(config.seed, {kShuffleStream, static_cast<std::uint64_t>(stage_index),
                                                          static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<const SampleRecord*> batch_records;
      std::vector<std::int64_t> targets;
      for (std::size_t i = start; i < end; ++i) {
        batch_records.push_back(&train.samples[order[i]].record);
        targets.push_back(static_cast<std::int64_t>(train.samples[order[i]].label_index));
      }
      auto x = loader.batch(batch_records).to(device);
      auto y = torch::tensor(targets, torch::kLong).to(device);

      optimizer.zero_grad();
      auto loss = F::cross_entropy(model.forward(x), y, loss_options);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw TrainingAbort("non-finite loss (" + std::to_string(value) + ") at stage " + std::to_string(stage_index) +
                            ", epoch " + std::to_string(epoch) + ", step " + std::to_string(steps));
      }
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(end - start);
      ++steps;
    }
    EpochRecord record{stage_index, epoch, loss_sum / static_cast<double>(order.size()), steps, std::nullopt};
    if (val && !val->samples.empty()) {
      record.val = evaluate(model, *val, loader, config.batch_size).report.weighted;
    }
    records.push_back(record);
  }
  return records;
}

Stage full_catalog_stage(const ClassCatalog& catalog) {
  Stage stage;
  stage.index = catalog.abnormal_classes().size();
  stage.label_space = catalog.classes();
  stage.introduced = catalog.classes();
  stage.remainder_mode = RemainderMode::aggregate;
  return stage;
}

namespace {

std::optional<Evaluation> stage_evaluation(TrainedModel& model, const StageView& val, ImageLoader& loader,
                                           const TrainConfig& config, const std::string& name) {
  if (val.samples.empty()) return std::nullopt;
  return evaluate(model, val, loader, config.batch_size, name);
}

}  // namespace

RunResult run_curriculum(const DatasetManifest& manifest, const CurriculumSchedule& schedule, const ModelSpec& spec,
                         const TrainConfig& config, ImageLoader& loader, const StageCallback& on_stage) {
  config.validate();
  if (schedule.stages.empty()) throw ConfigError("curriculum schedule has no stages");
  const auto& catalog = manifest.catalog;
  for (const auto& name : schedule.ordering) {
    if (!catalog.contains(name)) throw ConfigError("schedule class '" + name + "' is not in the manifest catalog");
  }
  const auto started = std::chrono::steady_clock::now();
  configure_threads(config);

  TrainingLog log;
  log.mode = "curriculum";
  log.seed = config.seed;
  log.config_snapshot = train_config_to_json(config);
  log.config_snapshot["schedule"] = schedule_to_json(schedule);

  ModelSpec stage_spec = spec;
  const auto& first = schedule.stages.front();
  stage_spec.num_classes = static_cast<std::int64_t>(first.label_space.size());
  TrainedModel model = build_model(stage_spec, first.label_space, derive_seed(config.seed, {kInitStream}));

  std::optional<Evaluation> last_eval;
  for (const auto& stage : schedule.stages) {
    const StageView train = stage_manifest(manifest, stage, catalog, Split::train);
    const StageView val = stage_manifest(manifest, stage, catalog, Split::val);

    if (stage.index > 0) {
      const auto probe_x = probe_batch(train, loader);
      const Probe before = probe(model, probe_x);
      const auto old_names = model.class_names();
      model = expand_head(model, stage.label_space, true,
                          derive_seed(config.seed, {kHeadStream, static_cast<std::uint64_t>(stage.index)}));
      const Probe after = probe(model, probe_x);

      bool logits_kept = true;
      for (std::size_t i = 0; i < old_names.size(); ++i) {
        auto it = std::find(stage.label_space.begin(), stage.label_space.end(), old_names[i]);
        if (it == stage.label_space.end()) continue;
        const auto j = static_cast<std::int64_t>(it - stage.label_space.begin());
        logits_kept = logits_kept && torch::equal(before.logits.select(1, static_cast<std::int64_t>(i)),
                                                  after.logits.select(1, j));
      }
      log.transitions.push_back({static_cast<std::int64_t>(stage.index) - 1, static_cast<std::int64_t>(stage.index),
                                 stage.label_space,
                                 torch::equal(before.cnn, after.cnn) && equal_or_both_undefined(before.vit, after.vit),
                                 logits_kept});
    }

    auto records = train_stage(model, train, &val, config, loader);
    log.epochs.insert(log.epochs.end(), records.begin(), records.end());
    last_eval = stage_evaluation(model, val, loader, config, "curriculum stage " + std::to_string(stage.index));
    if (on_stage) on_stage(stage, model, last_eval);
  }
  log.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {model, std::move(log), std::move(last_eval)};
}

RunResult run_direct(const DatasetManifest& manifest, const ModelSpec& spec, const TrainConfig& config,
                     std::int64_t total_epochs, ImageLoader& loader, const StageCallback& on_stage) {
  config.validate();
  if (total_epochs < 1) throw ConfigError("direct training needs at least one epoch");
  const auto started = std::chrono::steady_clock::now();
  configure_threads(config);

  const auto& catalog = manifest.catalog;
  const Stage stage = full_catalog_stage(catalog);
  TrainingLog log;
  log.mode = "direct";
  log.seed = config.seed;
  log.config_snapshot = train_config_to_json(config);
  log.config_snapshot["total_epochs"] = total_epochs;

  ModelSpec direct_spec = spec;
  direct_spec.num_classes = static_cast<std::int64_t>(catalog.size());
  TrainedModel model = build_model(direct_spec, catalog.classes(), derive_seed(config.seed, {kInitStream}));

  const StageView train = stage_manifest(manifest, stage, catalog, Split::train);
  const StageView val = stage_manifest(manifest, stage, catalog, Split::val);
  log.epochs = train_stage(model, train, &val, config, loader, total_epochs);
  auto evaluation = stage_evaluation(model, val, loader, config, "direct");
  if (on_stage) on_stage(stage, model, evaluation);
  log.wall_time_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {model, std::move(log), std::move(evaluation)};
}

}  // namespace capsule
