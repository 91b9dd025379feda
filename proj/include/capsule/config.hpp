#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "capsule/augment.hpp"
#include "capsule/catalog.hpp"
#include "capsule/curriculum.hpp"
#include "capsule/model.hpp"
#include "capsule/trainer.hpp"

namespace capsule {

enum class TrainMode { curriculum, direct, both };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

enum class OrderingSource { original, augmented };

/// Everything one pipeline run needs. Relative paths in the file resolve
/// against the directory holding the config file.
struct RunConfig {
  fs::path config_path;
  fs::path dataset;
  fs::path output_dir;
  ClassCatalog catalog = default_catalog();
  std::uint64_t seed = 0;

  TierThresholds thresholds;
  std::int64_t target_count = 3000;
  std::int64_t cap_multiplier = 25;
  unsigned augment_threads = 1;
  TierSet tiers = default_tiers();

  RemainderMode remainder_mode = RemainderMode::aggregate;
  OrderingSource ordering_source = OrderingSource::original;

  ModelSpec model = default_spec(Architecture::tiny_hybrid, 2);
  TrainConfig train;
  TrainMode mode = TrainMode::curriculum;

  double explain_alpha = 0.5;
  std::string explain_layer;

  /// Normalized JSON of every field, the form embedded in output directories.
  nlohmann::json to_json() const;

  fs::path augmented_manifest() const { return output_dir / "augment" / "manifest.csv"; }
};

/// Parses and validates; throws ConfigError for malformed or missing fields
/// (the seed is mandatory) and DataError when the dataset path is missing.
RunConfig parse_run_config(const nlohmann::json& doc, const fs::path& base_dir);
RunConfig load_run_config(const fs::path& path);

/// Writes `config_snapshot.json` into `dir`.
void write_config_snapshot(const RunConfig& config, const fs::path& dir);

}  // namespace capsule
