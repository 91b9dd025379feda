#include "capsule/curriculum.hpp"

#include <algorithm>

#include "capsule/error.hpp"

namespace capsule {

std::string_view to_string(RemainderMode mode) { return mode == RemainderMode::aggregate ? "aggregate" : "drop"; }

RemainderMode parse_remainder_mode(std::string_view text) {
  if (text == "aggregate") return RemainderMode::aggregate;
  if (text == "drop") return RemainderMode::drop;
  throw ConfigError("unknown remainder mode '" + std::string(text) + "' (expected aggregate or drop)");
}

std::size_t Stage::label_index(std::string_view label) const {
  auto it = std::find(label_space.begin(), label_space.end(), label);
  if (it == label_space.end()) {
    throw DataError("label '" + std::string(label) + "' is not part of stage " + std::to_string(index));
  }
  return static_cast<std::size_t>(it - label_space.begin());
}

CurriculumSchedule build_schedule(const ClassStats& stats, const ClassCatalog& catalog, RemainderMode mode) {
  if (catalog.normal_class().empty() || !catalog.contains(catalog.normal_class())) {
    throw DataError("catalog has no Normal class");
  }
  const auto counts = stats.as_map();
  if (!counts.contains(catalog.normal_class())) {
    throw DataError("stats do not cover the Normal class '" + catalog.normal_class() + "'");
  }
  auto abnormal = catalog.abnormal_classes();
  for (const auto& name : abnormal) {
    if (!counts.contains(name)) throw DataError("stats do not cover class '" + name + "'");
  }

  CurriculumSchedule schedule;
  schedule.ordering = abnormal;
  // abnormal is already in catalog order, so a stable sort keeps catalog order among ties.
  std::stable_sort(schedule.ordering.begin(), schedule.ordering.end(),
                   [&](const std::string& a, const std::string& b) { return counts.at(a) > counts.at(b); });

  Stage first;
  first.index = 0;
  first.label_space = {catalog.normal_class(), std::string(kAbnormalLabel)};
  first.remainder_mode = mode;
  first.introduced = {catalog.normal_class()};
  schedule.stages.push_back(first);

  std::vector<std::string> introduced = {catalog.normal_class()};
  for (std::size_t k = 1; k <= schedule.ordering.size(); ++k) {
    Stage stage;
    stage.index = k;
    stage.added_class = schedule.ordering[k - 1];
    stage.remainder_mode = mode;
    introduced.push_back(stage.added_class);
    stage.introduced = introduced;
    for (const auto& c : catalog.classes()) {
      if (std::find(introduced.begin(), introduced.end(), c) != introduced.end()) stage.label_space.push_back(c);
    }
    if (mode == RemainderMode::aggregate && k < schedule.ordering.size()) {
      stage.label_space.emplace_back(kRestLabel);
    }
    schedule.stages.push_back(std::move(stage));
  }
  return schedule;
}

std::string remap_label(const Stage& stage, std::string_view class_name, const ClassCatalog& catalog) {
  if (!catalog.contains(class_name)) throw DataError("unknown class '" + std::string(class_name) + "'");
  if (catalog.is_normal(class_name)) return std::string(class_name);
  if (stage.index == 0) return std::string(kAbnormalLabel);
  if (std::find(stage.introduced.begin(), stage.introduced.end(), class_name) != stage.introduced.end()) {
    return std::string(class_name);
  }
  return std::string(stage.remainder_mode == RemainderMode::aggregate ? kRestLabel : kExcludedLabel);
}

std::vector<std::int64_t> StageView::label_counts() const {
  std::vector<std::int64_t> counts(stage.label_space.size(), 0);
  for (const auto& s : samples) ++counts[s.label_index];
  return counts;
}

StageView stage_manifest(const DatasetManifest& manifest, const Stage& stage, const ClassCatalog& catalog,
                         std::optional<Split> split) {
  StageView view{stage, {}};
  for (const auto& r : manifest.records) {
    if (split && r.split != *split) continue;
    std::string label = remap_label(stage, r.class_name, catalog);
    if (label == kExcludedLabel) continue;
    const std::size_t index = stage.label_index(label);
    view.samples.push_back({r, std::move(label), index});
  }
  return view;
}

nlohmann::json schedule_to_json(const CurriculumSchedule& schedule) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : schedule.stages) {
    stages.push_back({{"index", s.index},
                      {"label_space", s.label_space},
                      {"added_class", s.added_class},
                      {"remainder_mode", to_string(s.remainder_mode)}});
  }
  return {{"ordering", schedule.ordering}, {"stages", stages}};
}

}  // namespace capsule
