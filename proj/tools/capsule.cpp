// capsule: command-line driver for the augmentation / curriculum / training
// pipeline. Subcommands run in pipeline order: stats, augment, train,
// explain, report.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training abort.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include <opencv2/imgcodecs.hpp>

#include "CLI11.hpp"
#include "capsule/augment.hpp"
#include "capsule/catalog.hpp"
#include "capsule/config.hpp"
#include "capsule/curriculum.hpp"
#include "capsule/error.hpp"
#include "capsule/explain.hpp"
#include "capsule/metrics.hpp"
#include "capsule/model.hpp"
#include "capsule/trainer.hpp"

namespace {

using namespace capsule;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string file_safe(std::string_view name) {
  std::string s;
  for (char c : name) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '-') ? c : '_';
  return s;
}

void print_stats(const ClassStats& stats) {
  for (const auto& [name, n] : stats.counts) std::cout << "  " << name << ": " << n << '\n';
  std::cout << "  total: " << stats.total() << ", imbalance ratio: " << stats.imbalance_ratio << '\n';
}

// ---------------------------------------------------------------------------

int cmd_stats(const RunConfig& config, bool no_normal) {
  const auto manifest = ingest(config.dataset, config.catalog);
  const auto stats = compute_stats(manifest, Split::train, Origin::original);
  std::cout << "train distribution (original images)\n";
  print_stats(stats);

  const fs::path dir = config.output_dir / "stats";
  write_config_snapshot(config, config.output_dir);
  write_json(dir / "train_stats.json", stats_to_json(stats));
  if (!no_normal) {
    emit_distribution_plot(stats, true, dir / "distribution_with_normal.png",
                           "Pre-augmentation class distribution (with Normal)");
  }
  emit_distribution_plot(stats, false, dir / "distribution_without_normal.png",
                         "Pre-augmentation class distribution (without Normal)");
  std::cout << "plots written to " << dir.string() << '\n';
  return 0;
}

int cmd_augment(const RunConfig& config, bool dry_run) {
  const auto manifest = ingest(config.dataset, config.catalog);
  const auto stats = compute_stats(manifest, Split::train, Origin::original);
  const auto plan = build_plan(stats, config.catalog, config.target_count, config.cap_multiplier, config.thresholds);
  std::cout << describe_plan(plan, config.catalog);
  if (dry_run) {
    std::cout << "dry run: no files written\n";
    return 0;
  }

  const fs::path dir = config.output_dir / "augment";
  write_config_snapshot(config, config.output_dir);
  write_json(dir / "plan.json", plan_to_json(plan));
  const auto augmented = execute_plan(manifest, plan, config.tiers, config.seed, dir / "images",
                                      ExecuteOptions{config.augment_threads});
  export_manifest_csv(augmented, config.augmented_manifest());

  const auto post = compute_stats(augmented, Split::train, std::nullopt);
  std::cout << "train distribution after augmentation\n";
  print_stats(post);
  write_json(config.output_dir / "stats" / "train_stats_augmented.json", stats_to_json(post));
  emit_distribution_plot(post, false, config.output_dir / "stats" / "distribution_post_augmentation.png",
                         "Post-augmentation class distribution (without Normal)");
  std::cout << "augmented manifest: " << config.augmented_manifest().string() << '\n';
  return 0;
}

struct ModeOutcome {
  std::string name;
  std::optional<MetricsReport> report;
};

ModeOutcome train_one(const RunConfig& config, const DatasetManifest& manifest, const CurriculumSchedule& schedule,
                      TrainMode mode, ImageLoader& loader) {
  const std::string name(to_string(mode));
  const fs::path dir = config.output_dir / "train" / name;
  fs::create_directories(dir / "checkpoints");

  auto on_stage = [&](const Stage& stage, const TrainedModel& model, const std::optional<Evaluation>& evaluation) {
    const auto k = static_cast<std::int64_t>(mode == TrainMode::curriculum ? stage.index : 0);
    const std::string tag = "stage_" + std::to_string(k);
    save_checkpoint(model, k, dir / "checkpoints" / (tag + ".ckpt"));
    if (evaluation) {
      write_json(dir / ("metrics_" + tag + ".json"), report_to_json(evaluation->report));
      write_text(dir / ("metrics_" + tag + ".md"), report_to_markdown(evaluation->report));
    }
    std::cout << "  " << name << " " << tag << " done (" << model.class_names().size() << " outputs)";
    if (evaluation) std::cout << ", val weighted F1 " << evaluation->report.weighted.f1;
    std::cout << '\n';
  };

  TrainConfig train = config.train;
  train.curriculum = mode == TrainMode::curriculum;
  RunResult result = mode == TrainMode::curriculum
                         ? run_curriculum(manifest, schedule, config.model, train, loader, on_stage)
                         : run_direct(manifest, config.model, train,
                                      train.epochs_per_stage * static_cast<std::int64_t>(schedule.stages.size()),
                                      loader, on_stage);

  write_json(dir / "training_log.json", result.log.to_json(false));
  write_json(dir / "timing.json", {{"wall_time_seconds", result.log.wall_time_seconds}});
  ModeOutcome outcome{name, std::nullopt};
  if (result.final_evaluation) {
    MetricsReport report = result.final_evaluation->report;
    report.method_name = std::string(to_string(config.model.architecture)) + " (" + name + ")";
    write_json(dir / "final_metrics.json", report_to_json(report));
    write_text(dir / "final_metrics.md", report_to_markdown(report));
    outcome.report = report;
  }
  return outcome;
}

int cmd_train(const RunConfig& config, std::optional<std::string> mode_override) {
  const fs::path manifest_path = config.augmented_manifest();
  if (!fs::exists(manifest_path)) {
    throw DataError("augmented manifest not found at " + manifest_path.string() + "; run `capsule augment` first");
  }
  const auto mode = mode_override ? parse_train_mode(*mode_override) : config.mode;
  const auto manifest = ingest(manifest_path, config.catalog);
  const auto ordering_stats = compute_stats(
      manifest, Split::train,
      config.ordering_source == OrderingSource::original ? std::optional<Origin>(Origin::original) : std::nullopt);
  const auto schedule = build_schedule(ordering_stats, config.catalog, config.remainder_mode);

  write_config_snapshot(config, config.output_dir);
  write_json(config.output_dir / "train" / "schedule.json", schedule_to_json(schedule));
  std::cout << "curriculum ordering:";
  for (const auto& c : schedule.ordering) std::cout << " " << c;
  std::cout << "\n";

  ImageLoader loader(config.model.input_size);
  std::vector<MetricsReport> reports;
  for (TrainMode m : {TrainMode::curriculum, TrainMode::direct}) {
    if (mode != TrainMode::both && mode != m) continue;
    auto outcome = train_one(config, manifest, schedule, m, loader);
    if (outcome.report) {
      std::cout << report_to_markdown(*outcome.report);
      reports.push_back(*outcome.report);
    }
  }
  if (mode == TrainMode::both) {
    const auto table = render_comparison(reports, published_rows());
    write_text(config.output_dir / "train" / "comparison.md", table);
    write_text(config.output_dir / "train" / "comparison.csv",
               render_comparison(reports, published_rows(), TableFormat::csv));
    std::cout << '\n' << table;
  }
  return 0;
}

int cmd_explain(const RunConfig& config, const fs::path& checkpoint, const std::vector<std::string>& images,
                std::optional<std::string> target_class, std::optional<std::string> layer, bool dump_csv,
                std::optional<double> alpha) {
  auto loaded = load_checkpoint(checkpoint);
  TrainedModel& model = loaded.model;
  if (target_class) model.class_index(*target_class);
  const fs::path dir = config.output_dir / "explain";
  write_config_snapshot(config, config.output_dir);
  for (const auto& image_path : images) {
    cv::Mat image = cv::imread(image_path, cv::IMREAD_COLOR);
    if (image.empty()) throw DataError("cannot read image " + image_path);
    auto x = preprocess(image, model.spec().input_size);
    std::string cls;
    if (target_class) {
      cls = *target_class;
    } else {
      torch::NoGradGuard guard;
      model.eval();
      cls = model.class_names()[static_cast<std::size_t>(model.forward(x.unsqueeze(0)).argmax(1).item<std::int64_t>())];
    }
    const auto heatmap = gradcam(model, x, cls, layer.value_or(config.explain_layer), image_path);
    const std::string stem = fs::path(image_path).stem().string() + "_" + file_safe(cls) + "_cam";
    write_overlay(heatmap, image, alpha.value_or(config.explain_alpha), dir / (stem + ".png"));
    if (dump_csv) write_grid_csv(heatmap, dir / (stem + ".csv"));
    std::cout << image_path << " -> " << (dir / (stem + ".png")).string() << " [" << cls << "]\n";
  }
  return 0;
}

int cmd_report(const RunConfig& config, std::vector<std::string> report_files, const std::string& format) {
  if (report_files.empty()) {
    for (const char* mode : {"curriculum", "direct"}) {
      const fs::path p = config.output_dir / "train" / mode / "final_metrics.json";
      if (fs::exists(p)) report_files.push_back(p.string());
    }
  }
  std::vector<MetricsReport> reports;
  for (const auto& f : report_files) {
    std::ifstream in(f);
    if (!in) throw DataError("cannot open metrics report " + f);
    try {
      reports.push_back(report_from_json(nlohmann::json::parse(in)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("metrics report " + f + " is not valid JSON: " + e.what());
    }
  }
  const auto fmt = format == "csv" ? TableFormat::csv : TableFormat::markdown;
  const auto table = render_comparison(reports, published_rows(), fmt);
  write_text(config.output_dir / "report" / (fmt == TableFormat::csv ? "comparison.csv" : "comparison.md"), table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tiered-augmentation and curriculum training pipeline for imbalanced image classification"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
  };

  auto* stats = app.add_subcommand("stats", "Class distribution and plots of the training split");
  add_config(stats);
  bool no_normal = false;
  stats->add_flag("--no-normal", no_normal, "Only plot the distribution without the Normal class");

  auto* augment = app.add_subcommand("augment", "Plan and materialize tiered augmentations");
  add_config(augment);
  bool dry_run = false;
  augment->add_flag("--dry-run", dry_run, "Print the plan without writing files");

  auto* train = app.add_subcommand("train", "Curriculum and/or direct training");
  add_config(train);
  std::optional<std::string> mode;
  train->add_option("--mode", mode, "curriculum, direct or both")
      ->check(CLI::IsMember({"curriculum", "direct", "both"}));

  auto* explain = app.add_subcommand("explain", "GradCAM overlays for a checkpoint");
  add_config(explain);
  std::string checkpoint;
  std::vector<std::string> images;
  std::optional<std::string> target_class, layer;
  std::optional<double> alpha;
  bool dump_csv = false;
  explain->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  explain->add_option("--image", images, "Image(s) to explain")->required();
  explain->add_option("--class", target_class, "Target class (default: predicted class)");
  explain->add_option("--layer", layer, "CNN stage to explain (default: last)");
  explain->add_option("--alpha", alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));
  explain->add_flag("--csv", dump_csv, "Also dump the raw heatmap grid as CSV");

  auto* report = app.add_subcommand("report", "Comparison table of metrics reports");
  add_config(report);
  std::vector<std::string> report_files;
  std::string format = "markdown";
  report->add_option("--reports", report_files, "final_metrics.json files (default: this run's)");
  report->add_option("--format", format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const RunConfig config = load_run_config(config_path);
    if (stats->parsed()) return cmd_stats(config, no_normal);
    if (augment->parsed()) return cmd_augment(config, dry_run);
    if (train->parsed()) return cmd_train(config, mode);
    if (explain->parsed()) return cmd_explain(config, checkpoint, images, target_class, layer, dump_csv, alpha);
    if (report->parsed()) return cmd_report(config, report_files, format);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kExitTraining;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
