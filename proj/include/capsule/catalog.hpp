#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace capsule {

namespace fs = std::filesystem;

/// The class universe of a dataset, with exactly one class designated Normal.
class ClassCatalog {
 public:
  ClassCatalog() = default;
  /// Throws ConfigError unless names are unique, there are at least two, and
  /// `normal_class` is one of them.
  ClassCatalog(std::vector<std::string> classes, std::string normal_class);

  const std::vector<std::string>& classes() const { return classes_; }
  const std::string& normal_class() const { return normal_class_; }
  std::size_t size() const { return classes_.size(); }

  bool contains(std::string_view name) const;
  bool is_normal(std::string_view name) const { return name == normal_class_; }
  /// Position in catalog order; throws DataError for unknown names.
  std::size_t index_of(std::string_view name) const;
  /// Every class except Normal, in catalog order.
  std::vector<std::string> abnormal_classes() const;

  bool operator==(const ClassCatalog&) const = default;

 private:
  std::vector<std::string> classes_;
  std::string normal_class_;
};

/// Normal plus the nine abnormality classes of the Capsule Vision 2024 release.
ClassCatalog default_catalog();

ClassCatalog catalog_from_json(const nlohmann::json& doc);
nlohmann::json catalog_to_json(const ClassCatalog& catalog);
ClassCatalog load_catalog(const fs::path& path);
void save_catalog(const ClassCatalog& catalog, const fs::path& path);

enum class Split { train, val };
enum class Origin { original, augmented };

std::string_view to_string(Split split);
std::string_view to_string(Origin origin);
Split parse_split(std::string_view text);
Origin parse_origin(std::string_view text);

struct SampleRecord {
  fs::path image_path;
  std::string class_name;
  Split split = Split::train;
  Origin origin = Origin::original;
  fs::path source_path;  // empty unless origin == augmented

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  ClassCatalog catalog;
  std::vector<SampleRecord> records;

  /// Throws DataError on unknown classes, duplicate paths within a split, or
  /// augmented records without a source.
  void validate() const;
  std::vector<SampleRecord> select(Split split, std::optional<Origin> origin = std::nullopt) const;
};

/// Order-insensitive equality of two manifests.
bool same_records(const DatasetManifest& a, const DatasetManifest& b);

/// Reads either a `split/class_name/image` directory tree or a manifest CSV.
/// Relative CSV paths resolve against the CSV's directory.
DatasetManifest ingest(const fs::path& root_or_csv, const ClassCatalog& catalog);

inline constexpr std::string_view kManifestHeader = "image_path,class_name,split,origin,source_path";

void export_manifest_csv(const DatasetManifest& manifest, const fs::path& csv_path);

/// Per-class counts in catalog order.
struct ClassStats {
  std::vector<std::pair<std::string, std::int64_t>> counts;
  std::string normal_class;
  double imbalance_ratio = 0.0;

  std::int64_t count(std::string_view name) const;
  std::int64_t total() const;
  bool empty() const { return counts.empty(); }
  std::map<std::string, std::int64_t> as_map() const;
};

/// Builds stats from explicit counts; missing catalog classes count 0.
ClassStats stats_from_counts(const ClassCatalog& catalog, const std::map<std::string, std::int64_t>& counts);

/// max/min over classes with a positive count; 0 when no class has any.
double imbalance_ratio(const std::vector<std::pair<std::string, std::int64_t>>& counts);

ClassStats compute_stats(const DatasetManifest& manifest, Split split,
                         std::optional<Origin> origin_filter = Origin::original);

nlohmann::json stats_to_json(const ClassStats& stats);

struct PlotSummary {
  std::size_t bars = 0;
  std::vector<std::string> labels;
};

/// Writes a PNG bar chart of `stats`; with include_normal=false the Normal
/// class is left out.
PlotSummary emit_distribution_plot(const ClassStats& stats, bool include_normal, const fs::path& out,
                                   std::string_view title = {});

struct SyntheticSpec {
  std::map<std::string, std::int64_t> train_counts;
  std::map<std::string, std::int64_t> val_counts;
  int image_size = 32;
  std::uint64_t seed = 0;
};

/// Renders a `train/` and `val/` tree under `out_root`. Every abnormal class
/// draws a class-specific shape and color inside one fixed image quadrant
/// (see synthetic_quadrant); Normal images are texture only. Output bytes are
/// a pure function of (catalog, spec).
fs::path generate_synthetic(const ClassCatalog& catalog, const SyntheticSpec& spec, const fs::path& out_root);

/// Quadrant holding the synthetic pattern of `class_name`: 0 top-left,
/// 1 top-right, 2 bottom-left, 3 bottom-right. nullopt for Normal.
std::optional<int> synthetic_quadrant(const ClassCatalog& catalog, std::string_view class_name);

}  // namespace capsule
