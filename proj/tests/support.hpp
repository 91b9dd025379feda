#pragma once

// Test-only helpers: scratch directories, file comparison, and oracles that
// recompute expected values without going through the library code paths.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "capsule/metrics.hpp"
#include "capsule/random.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "capsule") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& child) const { return path_ / child; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Relative path → bytes for every regular file under `root`.
inline std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = read_file(e.path());
  }
  return out;
}

inline std::size_t count_files(const fs::path& dir) {
  if (!fs::exists(dir)) return 0;
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.is_regular_file() ? 1 : 0;
  return n;
}

// ---------------------------------------------------------------------------
// Metrics oracle: expands the matrix into individual (true, predicted) samples
// and counts TP/FP/FN by walking them one at a time.

struct OracleMetrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  std::vector<double> per_class_precision, per_class_recall, per_class_f1;
  std::vector<std::int64_t> support;
};

inline OracleMetrics brute_force_metrics(const std::vector<std::vector<std::int64_t>>& counts) {
  const std::size_t k = counts.size();
  std::vector<std::pair<std::size_t, std::size_t>> samples;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::int64_t n = 0; n < counts[i][j]; ++n) samples.emplace_back(i, j);
    }
  }
  OracleMetrics m;
  std::int64_t correct = 0;
  for (const auto& [t, p] : samples) correct += t == p ? 1 : 0;
  const double total = static_cast<double>(samples.size());
  m.accuracy = static_cast<double>(correct) / total;

  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (const auto& [t, p] : samples) {
      if (t == c && p == c) ++tp;
      else if (t != c && p == c) ++fp;
      else if (t == c && p != c) ++fn;
    }
    const double prec = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    m.per_class_precision.push_back(prec);
    m.per_class_recall.push_back(rec);
    m.per_class_f1.push_back(f1);
    m.support.push_back(tp + fn);
  }
  // Support-weighted means, accumulated in class order.
  for (std::size_t c = 0; c < k; ++c) {
    const double w = static_cast<double>(m.support[c]);
    m.precision += w * m.per_class_precision[c];
    m.recall += w * m.per_class_recall[c];
    m.f1 += w * m.per_class_f1[c];
  }
  m.precision /= total;
  m.recall /= total;
  m.f1 /= total;
  return m;
}

/// Random k×k matrix (2 ≤ k ≤ max_classes) with entries in [0, max_count] and
/// at least one sample.
inline capsule::ConfusionMatrix random_confusion(capsule::Rng& rng, int max_classes = 6, int max_count = 20) {
  const auto k = static_cast<std::size_t>(rng.uniform_int(2, max_classes));
  capsule::ConfusionMatrix cm;
  for (std::size_t i = 0; i < k; ++i) cm.labels.push_back("c" + std::to_string(i));
  cm.counts.assign(k, std::vector<std::int64_t>(k, 0));
  std::int64_t total = 0;
  for (auto& row : cm.counts) {
    for (auto& v : row) {
      // Sparse-ish: about a third of the cells stay empty so zero
      // denominators occur.
      v = rng.uniform() < 0.35 ? 0 : rng.uniform_int(0, max_count);
      total += v;
    }
  }
  if (total == 0) cm.counts[0][0] = 1;
  return cm;
}

}  // namespace testing
