#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace capsule {

/// Rows are true labels, columns are predictions.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::int64_t>> counts;

  std::size_t size() const { return labels.size(); }
  std::int64_t total() const;
  std::int64_t trace() const;
  /// Throws DataError unless the matrix is square, matches the labels, and has
  /// no negative entries.
  void validate() const;
};

ConfusionMatrix confusion(std::span<const std::string> true_labels, std::span<const std::string> predicted_labels,
                          const std::vector<std::string>& label_space);
ConfusionMatrix confusion(std::span<const std::size_t> true_indices, std::span<const std::size_t> predicted_indices,
                          const std::vector<std::string>& label_space);

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

struct WeightedMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::string method_name;
  std::vector<ClassMetrics> per_class;
  WeightedMetrics weighted;
};

enum class AccuracyMode {
  overall,                     // trace / total
  support_weighted_per_class,  // Σ support_c · (TP_c + TN_c) / total, over total
};

/// Per-class precision, recall and F1 (0 on empty denominators) and their
/// support-weighted means. Throws DataError for an empty matrix.
MetricsReport weighted_report(const ConfusionMatrix& cm, std::string method_name = {},
                              AccuracyMode accuracy_mode = AccuracyMode::overall);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
std::string report_to_markdown(const MetricsReport& report);

/// A results row kept exactly as published, as display strings.
struct ReferenceRow {
  std::string method;
  std::string accuracy;
  std::string precision;
  std::string recall;
  std::string f1;
};

/// Previously reported validation results (weighted averages), shown for
/// comparison. Not reproduced by this code.
const std::vector<ReferenceRow>& published_rows();

enum class TableFormat { markdown, csv };

/// Columns Method, Avg ACC, Avg Precision, Avg Recall, Avg F1. Computed rows
/// print accuracy as a percentage with two decimals and the rest with three;
/// reference rows print verbatim.
std::string render_comparison(const std::vector<MetricsReport>& reports, const std::vector<ReferenceRow>& baselines,
                              TableFormat format = TableFormat::markdown);

}  // namespace capsule
