#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "capsule/catalog.hpp"
#include "capsule/random.hpp"

namespace capsule {

enum class TransformKind { horizontal_flip, vertical_flip, rotate90, color_jitter, shift_scale_rotate, gaussian_blur };

std::string_view to_string(TransformKind kind);
TransformKind parse_transform_kind(std::string_view text);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

struct JitterParams {
  double brightness = 0.2;  // factor drawn from [1-b, 1+b]
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.1;  // shift drawn from [-h, h] as a fraction of the hue circle
  bool operator==(const JitterParams&) const = default;
};

struct AffineParams {
  Range shift{-0.0625, 0.0625};  // fraction of the image side
  Range scale{-0.1, 0.1};        // added to 1
  Range rotate{-45.0, 45.0};     // degrees
  bool operator==(const AffineParams&) const = default;
};

struct BlurParams {
  int min_kernel = 3;
  int max_kernel = 7;
  bool operator==(const BlurParams&) const = default;
};

struct TransformSpec {
  TransformKind kind = TransformKind::horizontal_flip;
  double probability = 0.5;
  JitterParams jitter;
  AffineParams affine;
  BlurParams blur;

  /// Throws ConfigError for probabilities outside [0,1], inverted ranges, or
  /// blur kernels that are even or below 3.
  void validate() const;
  bool operator==(const TransformSpec&) const = default;
};

enum class TierName { heavy, medium, light };

std::string_view to_string(TierName tier);
TierName parse_tier(std::string_view text);

struct AugmentationTier {
  TierName name = TierName::light;
  std::vector<TransformSpec> transforms;

  std::vector<TransformKind> kinds() const;
  bool operator==(const AugmentationTier&) const = default;
};

/// Tier name to transform list. Light is flips only, medium adds rotate90 and
/// color jitter, heavy adds shift-scale-rotate and gaussian blur.
using TierSet = std::map<TierName, AugmentationTier>;

TierSet default_tiers();
/// Checks parameter validity and the light ⊂ medium ⊂ heavy nesting.
void validate_tiers(const TierSet& tiers);

nlohmann::json tiers_to_json(const TierSet& tiers);
TierSet tiers_from_json(const nlohmann::json& doc);

struct TierThresholds {
  std::int64_t low = 500;
  std::int64_t high = 3000;
};

/// count < low → heavy, low ≤ count < high → medium, otherwise light.
TierName assign_tier(std::int64_t class_count, TierThresholds thresholds = {});

struct PlanEntry {
  TierName tier = TierName::light;
  std::int64_t original_count = 0;
  std::int64_t copies_per_image = 0;
  std::string warning;

  std::int64_t planned_total() const { return original_count * (1 + copies_per_image); }
};

struct AugmentationPlan {
  std::map<std::string, PlanEntry> per_class;
  std::int64_t target_count = 0;
  std::int64_t cap_multiplier = 0;

  const PlanEntry& at(const std::string& class_name) const;
};

/// copies(c) = min(cap, ceil(target / count(c)) - 1) for abnormal classes, 0
/// for Normal. Classes with no images get 0 copies and a warning.
AugmentationPlan build_plan(const ClassStats& stats, const ClassCatalog& catalog, std::int64_t target_count,
                            std::int64_t cap_multiplier, TierThresholds thresholds = {});

nlohmann::json plan_to_json(const AugmentationPlan& plan);
std::string describe_plan(const AugmentationPlan& plan, const ClassCatalog& catalog);

/// Throws DataError unless `image` is a non-empty 8-bit 3-channel matrix.
void check_image(const cv::Mat& image);

cv::Mat flip_horizontal(const cv::Mat& image);
cv::Mat flip_vertical(const cv::Mat& image);
/// Rotates counter-clockwise by quarter_turns × 90°.
cv::Mat rotate_quarter_turns(const cv::Mat& image, int quarter_turns);

/// Applies `spec` with its probability. The Bernoulli draw and every parameter
/// draw come from `rng`, so equal generator states give equal images.
cv::Mat apply_transform(const cv::Mat& image, const TransformSpec& spec, Rng& rng);

/// Applies each transform of the tier independently, in listed order.
cv::Mat apply_tier(const cv::Mat& image, const AugmentationTier& tier, Rng& rng);

/// Seed for one augmented copy; depends only on its inputs, never on
/// processing order.
std::uint64_t copy_seed(std::uint64_t seed, const fs::path& source_path, std::int64_t copy_index);

struct ExecuteOptions {
  unsigned threads = 1;
};

/// Materializes `copies_per_image` transformed copies of every original train
/// image as `out_dir/<class>/<stem>_aug<k>.png` (k starts at 1) and returns
/// the input records followed by the augmented ones.
DatasetManifest execute_plan(const DatasetManifest& manifest, const AugmentationPlan& plan, const TierSet& tiers,
                             std::uint64_t seed, const fs::path& out_dir, ExecuteOptions options = {});

}  // namespace capsule
