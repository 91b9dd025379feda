#include <torch/torch.h>

#include "capsule/augment.hpp"
#include "capsule/error.hpp"
#include "capsule/trainer.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace capsule;
using testing::TempDir;

namespace {

DatasetManifest synthetic(const fs::path& root, const ClassCatalog& cat, std::map<std::string, std::int64_t> train,
                          std::map<std::string, std::int64_t> val, std::uint64_t seed = 1) {
  SyntheticSpec spec;
  spec.train_counts = std::move(train);
  spec.val_counts = std::move(val);
  spec.image_size = 32;
  spec.seed = seed;
  generate_synthetic(cat, spec, root);
  return ingest(root, cat);
}

TrainConfig quick_config(std::uint64_t seed = 0) {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs_per_stage = 5;
  c.seed = seed;
  return c;
}

ModelSpec tiny_spec(std::int64_t classes) { return default_spec(Architecture::tiny_hybrid, classes); }

}  // namespace

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK(c.learning_rate == 1e-3);
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs_per_stage = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 7;
  c.class_weights = true;
  const auto back = train_config_from_json(train_config_to_json(c));
  CHECK(back.batch_size == 7);
  CHECK(back.class_weights);
  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"optimizer", "sgd"}}), ConfigError);
  CHECK_THROWS_AS(resolve_device("tpu"), ConfigError);
  CHECK(resolve_device("cpu").is_cpu());
}

TEST_CASE("3-class training lowers the loss and is reproducible") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A", "B"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"Normal", 24}, {"A", 24}, {"B", 24}}, {});
  const Stage stage = full_catalog_stage(cat);
  const auto view = stage_manifest(m, stage, cat, Split::train);
  ImageLoader loader(32);

  auto run = [&] {
    auto model = build_model(tiny_spec(3), cat.classes(), 7);
    return train_stage(model, view, nullptr, quick_config(3), loader);
  };
  const auto a = run();
  REQUIRE(a.size() == 5);
  CHECK(a.back().train_loss < a.front().train_loss);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].epoch == static_cast<std::int64_t>(i));
    CHECK(std::isfinite(a[i].train_loss));
    CHECK(a[i].steps == 5);
  }
  const auto b = run();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].train_loss == b[i].train_loss);
}

TEST_CASE("separable binary stage 0 reaches 0.95 validation accuracy") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"Normal", 48}, {"A", 48}}, {{"Normal", 30}, {"A", 30}});
  const auto schedule = build_schedule(compute_stats(m, Split::train), cat);
  const auto& s0 = schedule.stages.front();
  const auto train = stage_manifest(m, s0, cat, Split::train);
  const auto val = stage_manifest(m, s0, cat, Split::val);
  ImageLoader loader(32);
  auto model = build_model(tiny_spec(2), s0.label_space, 1);
  const auto log = train_stage(model, train, &val, quick_config(), loader);
  REQUIRE(log.back().val.has_value());
  const auto eval = evaluate(model, val, loader, 32);
  CHECK(eval.report.weighted.accuracy >= 0.95);
  CHECK(eval.report.weighted.accuracy == log.back().val->accuracy);
}

TEST_CASE("three evenly sized synthetic classes are learnable to 0.9") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A", "B", "C"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"A", 20}, {"B", 20}, {"C", 20}}, {{"A", 10}, {"B", 10}, {"C", 10}}, 4);
  const Stage stage = full_catalog_stage(cat);
  ImageLoader loader(32);
  auto model = build_model(tiny_spec(4), cat.classes(), 2);
  auto config = quick_config();
  config.epochs_per_stage = 10;
  train_stage(model, stage_manifest(m, stage, cat, Split::train), nullptr, config, loader);
  const auto eval = evaluate(model, stage_manifest(m, stage, cat, Split::val), loader, 32);
  CHECK(eval.report.weighted.accuracy >= 0.9);
}

TEST_CASE("train_stage preconditions and loss abort") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"Normal", 4}, {"A", 4}}, {});
  const Stage stage = full_catalog_stage(cat);
  const auto view = stage_manifest(m, stage, cat, Split::train);
  ImageLoader loader(32);

  auto wrong = build_model(tiny_spec(2), {"Normal", "Abnormal"}, 1);
  CHECK_THROWS_AS(train_stage(wrong, view, nullptr, quick_config(), loader), ConfigError);

  const auto empty = stage_manifest(m, stage, cat, Split::val);
  auto model = build_model(tiny_spec(2), cat.classes(), 1);
  CHECK_THROWS_AS(train_stage(model, empty, nullptr, quick_config(), loader), DataError);

  {
    torch::NoGradGuard guard;
    model.head()->out->weight.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  CHECK_THROWS_WITH_AS(train_stage(model, view, nullptr, quick_config(), loader), doctest::Contains("non-finite"),
                       TrainingAbort);
}

TEST_CASE("class weights follow inverse frequency and still train") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"Normal", 12}, {"A", 4}}, {});
  const Stage stage = full_catalog_stage(cat);
  ImageLoader loader(32);
  auto model = build_model(tiny_spec(2), cat.classes(), 1);
  auto config = quick_config();
  config.class_weights = true;
  config.epochs_per_stage = 2;
  const auto log = train_stage(model, stage_manifest(m, stage, cat, Split::train), nullptr, config, loader);
  CHECK(std::isfinite(log.back().train_loss));
}

TEST_CASE("curriculum and direct runs: stages, head widths, budget, determinism") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A", "B", "C"}, "Normal");
  const auto m = synthetic(tmp.path(), cat, {{"Normal", 16}, {"A", 12}, {"B", 8}, {"C", 6}},
                           {{"Normal", 4}, {"A", 4}, {"B", 4}, {"C", 4}});
  const auto schedule = build_schedule(compute_stats(m, Split::train), cat);
  ImageLoader loader(32);
  auto config = quick_config(5);
  config.epochs_per_stage = 1;

  std::vector<std::size_t> widths;
  std::vector<std::size_t> stages_seen;
  auto result = run_curriculum(m, schedule, tiny_spec(2), config, loader,
                               [&](const Stage& s, const TrainedModel& model, const std::optional<Evaluation>& ev) {
                                 stages_seen.push_back(s.index);
                                 widths.push_back(model.class_names().size());
                                 CHECK(ev.has_value());
                               });
  CHECK(stages_seen == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(widths == std::vector<std::size_t>{2, 3, 4, 4});
  CHECK(result.model.class_names() == cat.classes());
  REQUIRE(result.log.transitions.size() == 3);
  for (const auto& t : result.log.transitions) {
    CHECK(t.backbone_preserved);
    CHECK(t.retained_logits_preserved);
  }
  CHECK(result.log.epochs.size() == 4);
  for (const auto& e : result.log.epochs) CHECK(std::isfinite(e.train_loss));
  REQUIRE(result.final_evaluation.has_value());
  CHECK(result.final_evaluation->confusion.labels == cat.classes());

  auto again = run_curriculum(m, schedule, tiny_spec(2), config, loader);
  CHECK(again.log.loss_curve() == result.log.loss_curve());
  CHECK(again.log.to_json(false) == result.log.to_json(false));

  const auto stage_epochs = config.epochs_per_stage * static_cast<std::int64_t>(schedule.stages.size());
  auto direct = run_direct(m, tiny_spec(2), config, stage_epochs, loader);
  CHECK(direct.model.class_names() == cat.classes());
  CHECK(direct.log.epochs.size() == static_cast<std::size_t>(stage_epochs));
  // Aggregate mode trains on every record at every stage, so budgets match exactly.
  CHECK(direct.log.total_steps() == result.log.total_steps());
  const auto steps_per_epoch = direct.log.epochs.front().steps;
  CHECK(std::abs(direct.log.total_steps() - result.log.total_steps()) <= steps_per_epoch);

  auto direct_again = run_direct(m, tiny_spec(2), config, stage_epochs, loader);
  CHECK(direct_again.log.to_json(false) == direct.log.to_json(false));
  CHECK(direct.log.to_json(true).contains("wall_time_seconds"));
  CHECK_FALSE(direct.log.to_json(false).contains("wall_time_seconds"));
}

TEST_CASE("preprocess normalizes to the model input size") {
  cv::Mat img(20, 40, CV_8UC3, cv::Scalar(0, 0, 255));  // pure red in BGR
  const auto t = preprocess(img, 32);
  CHECK(t.sizes() == torch::IntArrayRef({3, 32, 32}));
  // Channel 0 is red after conversion: (1 - 0.485) / 0.229.
  CHECK(t[0][5][5].item<float>() == doctest::Approx((1.0 - 0.485) / 0.229).epsilon(1e-5));
  CHECK(t[2][5][5].item<float>() == doctest::Approx((0.0 - 0.406) / 0.225).epsilon(1e-5));
  CHECK_THROWS_AS(preprocess(cv::Mat(), 32), DataError);
}
