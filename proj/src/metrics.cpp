#include "capsule/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "capsule/csv.hpp"
#include "capsule/error.hpp"

namespace capsule {

std::int64_t ConfusionMatrix::total() const {
  std::int64_t sum = 0;
  for (const auto& row : counts) {
    for (auto v : row) sum += v;
  }
  return sum;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) sum += counts[i][i];
  return sum;
}

void ConfusionMatrix::validate() const {
  if (counts.size() != labels.size()) throw DataError("confusion matrix rows do not match its labels");
  for (const auto& row : counts) {
    if (row.size() != labels.size()) throw DataError("confusion matrix is not square");
    for (auto v : row) {
      if (v < 0) throw DataError("confusion matrix has a negative entry");
    }
  }
}

ConfusionMatrix confusion(std::span<const std::size_t> true_indices, std::span<const std::size_t> predicted_indices,
                          const std::vector<std::string>& label_space) {
  if (true_indices.size() != predicted_indices.size()) {
    throw DataError("true and predicted label sequences differ in length");
  }
  if (true_indices.empty()) throw DataError("cannot build a confusion matrix from no samples");
  const std::size_t n = label_space.size();
  ConfusionMatrix cm{label_space, std::vector<std::vector<std::int64_t>>(n, std::vector<std::int64_t>(n, 0))};
  for (std::size_t i = 0; i < true_indices.size(); ++i) {
    if (true_indices[i] >= n || predicted_indices[i] >= n) throw DataError("label index outside the label space");
    ++cm.counts[true_indices[i]][predicted_indices[i]];
  }
  return cm;
}

ConfusionMatrix confusion(std::span<const std::string> true_labels, std::span<const std::string> predicted_labels,
                          const std::vector<std::string>& label_space) {
  auto index = [&](const std::string& label) {
    auto it = std::find(label_space.begin(), label_space.end(), label);
    if (it == label_space.end()) throw DataError("label '" + label + "' is not in the label space");
    return static_cast<std::size_t>(it - label_space.begin());
  };
  if (true_labels.size() != predicted_labels.size()) {
    throw DataError("true and predicted label sequences differ in length");
  }
  std::vector<std::size_t> t, p;
  t.reserve(true_labels.size());
  p.reserve(predicted_labels.size());
  for (const auto& l : true_labels) t.push_back(index(l));
  for (const auto& l : predicted_labels) p.push_back(index(l));
  return confusion(std::span<const std::size_t>(t), std::span<const std::size_t>(p), label_space);
}

MetricsReport weighted_report(const ConfusionMatrix& cm, std::string method_name, AccuracyMode accuracy_mode) {
  cm.validate();
  const std::int64_t total = cm.total();
  if (total <= 0) throw DataError("confusion matrix has no samples");
  const std::size_t n = cm.size();

  MetricsReport report;
  report.method_name = std::move(method_name);
  double w_precision = 0.0, w_recall = 0.0, w_f1 = 0.0, w_accuracy = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::int64_t tp = cm.counts[c][c];
    std::int64_t support = 0, predicted = 0;
    for (std::size_t j = 0; j < n; ++j) {
      support += cm.counts[c][j];
      predicted += cm.counts[j][c];
    }
    ClassMetrics m;
    m.label = cm.labels[c];
    m.support = support;
    m.precision = predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    m.recall = support > 0 ? static_cast<double>(tp) / static_cast<double>(support) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;

    const double weight = static_cast<double>(support);
    w_precision += weight * m.precision;
    w_recall += weight * m.recall;
    w_f1 += weight * m.f1;
    const std::int64_t tn = total - support - predicted + tp;
    w_accuracy += weight * (static_cast<double>(tp + tn) / static_cast<double>(total));
    report.per_class.push_back(std::move(m));
  }
  const double denom = static_cast<double>(total);
  report.weighted.precision = w_precision / denom;
  report.weighted.recall = w_recall / denom;
  report.weighted.f1 = w_f1 / denom;
  report.weighted.accuracy = accuracy_mode == AccuracyMode::overall
                                 ? static_cast<double>(cm.trace()) / denom
                                 : w_accuracy / denom;
  return report;
}

nlohmann::json report_to_json(const MetricsReport& report) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& m : report.per_class) {
    per_class.push_back(
        {{"label", m.label}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}});
  }
  return {{"method", report.method_name},
          {"per_class", per_class},
          {"weighted",
           {{"accuracy", report.weighted.accuracy},
            {"precision", report.weighted.precision},
            {"recall", report.weighted.recall},
            {"f1", report.weighted.f1}}}};
}

MetricsReport report_from_json(const nlohmann::json& doc) {
  try {
    MetricsReport r;
    r.method_name = doc.value("method", "");
    for (const auto& m : doc.at("per_class")) {
      r.per_class.push_back({m.at("label").get<std::string>(), m.at("precision").get<double>(),
                             m.at("recall").get<double>(), m.at("f1").get<double>(), m.at("support").get<std::int64_t>()});
    }
    const auto& w = doc.at("weighted");
    r.weighted = {w.at("accuracy").get<double>(), w.at("precision").get<double>(), w.at("recall").get<double>(),
                  w.at("f1").get<double>()};
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed metrics report: ") + e.what());
  }
}

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

std::string percent(double v) { return fixed(100.0 * v, 2) + "%"; }

}  // namespace

std::string report_to_markdown(const MetricsReport& report) {
  std::ostringstream os;
  os << "## " << (report.method_name.empty() ? "Metrics" : report.method_name) << "\n\n";
  os << "| Class | Precision | Recall | F1 | Support |\n|---|---|---|---|---|\n";
  for (const auto& m : report.per_class) {
    os << "| " << m.label << " | " << fixed(m.precision, 3) << " | " << fixed(m.recall, 3) << " | " << fixed(m.f1, 3)
       << " | " << m.support << " |\n";
  }
  os << "\nWeighted: accuracy " << percent(report.weighted.accuracy) << ", precision "
     << fixed(report.weighted.precision, 3) << ", recall " << fixed(report.weighted.recall, 3) << ", F1 "
     << fixed(report.weighted.f1, 3) << "\n";
  return os.str();
}

const std::vector<ReferenceRow>& published_rows() {
  static const std::vector<ReferenceRow> rows = {
      {"ResNet50 (baseline)", "76%", "0.78", "0.76", "0.76"},
      {"SVM (baseline)", "82%", "0.81", "0.82", "0.78"},
      {"ResNet50 (curriculum + tiered augmentation)", "89.57%", "0.893", "0.895", "0.894"},
      {"ViT-CNN Hybrid (curriculum + tiered augmentation)", "89.79%", "0.909", "0.897", "0.902"},
  };
  return rows;
}

std::string render_comparison(const std::vector<MetricsReport>& reports, const std::vector<ReferenceRow>& baselines,
                              TableFormat format) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& b : baselines) {
    rows.push_back({b.method + " [reported]", b.accuracy, b.precision, b.recall, b.f1});
  }
  for (const auto& r : reports) {
    rows.push_back({r.method_name, percent(r.weighted.accuracy), fixed(r.weighted.precision, 3),
                    fixed(r.weighted.recall, 3), fixed(r.weighted.f1, 3)});
  }
  const std::vector<std::string> header = {"Method", "Avg ACC", "Avg Precision", "Avg Recall", "Avg F1"};

  std::ostringstream os;
  if (format == TableFormat::csv) {
    csv::write_row(os, header);
    for (const auto& row : rows) csv::write_row(os, row);
    return os.str();
  }
  auto line = [&](const std::vector<std::string>& cells) {
    os << '|';
    for (const auto& c : cells) os << ' ' << c << " |";
    os << '\n';
  };
  line(header);
  os << "|---|---|---|---|---|\n";
  for (const auto& row : rows) line(row);
  if (!baselines.empty()) os << "\nRows marked [reported] are published values, not reproduced here. All averages are support-weighted.\n";
  return os.str();
}

}  // namespace capsule
