#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capsule/catalog.hpp"

namespace capsule {

/// How abnormal classes that have not been introduced yet are labeled.
enum class RemainderMode {
  aggregate,  // lumped into "Abnormal-rest"
  drop,       // left out of the stage entirely
};

std::string_view to_string(RemainderMode mode);
RemainderMode parse_remainder_mode(std::string_view text);

inline constexpr std::string_view kAbnormalLabel = "Abnormal";
inline constexpr std::string_view kRestLabel = "Abnormal-rest";
inline constexpr std::string_view kExcludedLabel = "excluded";

struct Stage {
  std::size_t index = 0;
  std::vector<std::string> label_space;
  std::string added_class;  // empty at stage 0
  RemainderMode remainder_mode = RemainderMode::aggregate;
  /// Concrete classes live at this stage (Normal first, then the added classes
  /// in introduction order).
  std::vector<std::string> introduced;

  std::size_t label_index(std::string_view label) const;
  bool operator==(const Stage&) const = default;
};

struct CurriculumSchedule {
  std::vector<Stage> stages;
  /// Abnormal classes, most training images first.
  std::vector<std::string> ordering;
};

/// Stage 0 separates Normal from Abnormal; stage k adds ordering[k-1]. The
/// ordering sorts abnormal classes by descending count, ties by catalog order.
/// Concrete labels appear in catalog order, so the final label space is the
/// catalog itself.
CurriculumSchedule build_schedule(const ClassStats& stats, const ClassCatalog& catalog,
                                  RemainderMode mode = RemainderMode::aggregate);

/// Label of `class_name` at `stage`; kExcludedLabel for dropped records.
std::string remap_label(const Stage& stage, std::string_view class_name, const ClassCatalog& catalog);

struct StageSample {
  SampleRecord record;
  std::string label;
  std::size_t label_index = 0;
};

struct StageView {
  Stage stage;
  std::vector<StageSample> samples;

  std::vector<std::int64_t> label_counts() const;
};

/// Relabels every record of `split` for `stage`. Drop mode omits excluded
/// records; aggregate mode keeps every record.
StageView stage_manifest(const DatasetManifest& manifest, const Stage& stage, const ClassCatalog& catalog,
                         std::optional<Split> split = std::nullopt);

nlohmann::json schedule_to_json(const CurriculumSchedule& schedule);

}  // namespace capsule
