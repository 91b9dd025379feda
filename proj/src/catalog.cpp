#include "capsule/catalog.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "capsule/csv.hpp"
#include "capsule/error.hpp"
#include "capsule/random.hpp"

namespace capsule {

ClassCatalog::ClassCatalog(std::vector<std::string> classes, std::string normal_class)
    : classes_(std::move(classes)), normal_class_(std::move(normal_class)) {
  if (classes_.size() < 2) {
    throw ConfigError("catalog needs at least 2 classes, got " + std::to_string(classes_.size()));
  }
  std::set<std::string> seen;
  for (const auto& name : classes_) {
    if (name.empty()) throw ConfigError("catalog contains an empty class name");
    if (!seen.insert(name).second) throw ConfigError("duplicate class name in catalog: " + name);
  }
  if (!seen.contains(normal_class_)) {
    throw ConfigError("normal class '" + normal_class_ + "' is not listed in the catalog");
  }
}

bool ClassCatalog::contains(std::string_view name) const {
  return std::find(classes_.begin(), classes_.end(), name) != classes_.end();
}

std::size_t ClassCatalog::index_of(std::string_view name) const {
  auto it = std::find(classes_.begin(), classes_.end(), name);
  if (it == classes_.end()) throw DataError("unknown class '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - classes_.begin());
}

std::vector<std::string> ClassCatalog::abnormal_classes() const {
  std::vector<std::string> out;
  for (const auto& c : classes_) {
    if (c != normal_class_) out.push_back(c);
  }
  return out;
}

ClassCatalog default_catalog() {
  return ClassCatalog({"Angioectasia", "Bleeding", "Erosion", "Erythema", "Foreign Body", "Lymphangiectasia",
                       "Normal", "Polyp", "Ulcer", "Worms"},
                      "Normal");
}

ClassCatalog catalog_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("classes") || !doc.contains("normal_class")) {
    throw ConfigError("catalog document needs 'classes' and 'normal_class'");
  }
  try {
    return ClassCatalog(doc.at("classes").get<std::vector<std::string>>(), doc.at("normal_class").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed catalog: ") + e.what());
  }
}

nlohmann::json catalog_to_json(const ClassCatalog& catalog) {
  return {{"classes", catalog.classes()}, {"normal_class", catalog.normal_class()}};
}

ClassCatalog load_catalog(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open catalog file " + path.string());
  try {
    return catalog_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("catalog file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void save_catalog(const ClassCatalog& catalog, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write catalog file " + path.string());
  out << catalog_to_json(catalog).dump(2) << '\n';
}

std::string_view to_string(Split split) { return split == Split::train ? "train" : "val"; }

std::string_view to_string(Origin origin) { return origin == Origin::original ? "original" : "augmented"; }

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  throw DataError("unknown split '" + std::string(text) + "' (expected train or val)");
}

Origin parse_origin(std::string_view text) {
  if (text == "original" || text.empty()) return Origin::original;
  if (text == "augmented") return Origin::augmented;
  throw DataError("unknown origin '" + std::string(text) + "'");
}

void DatasetManifest::validate() const {
  std::set<std::pair<Split, std::string>> seen;
  for (const auto& r : records) {
    if (!catalog.contains(r.class_name)) {
      throw DataError("record " + r.image_path.string() + " has unknown class '" + r.class_name + "'");
    }
    if (r.origin == Origin::augmented && r.source_path.empty()) {
      throw DataError("augmented record " + r.image_path.string() + " has no source_path");
    }
    if (!seen.emplace(r.split, r.image_path.generic_string()).second) {
      throw DataError("duplicate path in split " + std::string(to_string(r.split)) + ": " + r.image_path.string());
    }
  }
}

std::vector<SampleRecord> DatasetManifest::select(Split split, std::optional<Origin> origin) const {
  std::vector<SampleRecord> out;
  for (const auto& r : records) {
    if (r.split == split && (!origin || r.origin == *origin)) out.push_back(r);
  }
  return out;
}

namespace {

auto record_key(const SampleRecord& r) {
  return std::make_tuple(r.split, r.image_path.generic_string(), r.class_name, r.origin, r.source_path.generic_string());
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

DatasetManifest ingest_directory(const fs::path& root, const ClassCatalog& catalog) {
  DatasetManifest manifest{catalog, {}};
  const fs::path base = fs::absolute(root).lexically_normal();
  for (Split split : {Split::train, Split::val}) {
    const fs::path split_dir = base / to_string(split);
    if (!fs::is_directory(split_dir)) continue;
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(split_dir)) {
      if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& dir : class_dirs) {
      const std::string name = dir.filename().string();
      if (!catalog.contains(name)) {
        throw DataError("unknown class '" + name + "' found at " + dir.string());
      }
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      for (auto& f : files) {
        manifest.records.push_back({std::move(f), name, split, Origin::original, {}});
      }
    }
  }
  return manifest;
}

DatasetManifest ingest_csv(const fs::path& csv_path, const ClassCatalog& catalog) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open manifest " + csv_path.string());
  const fs::path base = fs::absolute(csv_path).parent_path();
  auto rows = csv::read_all(in);
  if (rows.empty()) throw DataError("manifest " + csv_path.string() + " is empty");

  const auto& header = rows.front();
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto path_col = column("image_path");
  const auto class_col = column("class_name");
  const auto split_col = column("split");
  const auto origin_col = column("origin");
  const auto source_col = column("source_path");
  if (!path_col || !class_col || !split_col) {
    throw DataError("manifest " + csv_path.string() + " needs columns image_path, class_name, split");
  }

  auto resolve = [&](const std::string& text) -> fs::path {
    if (text.empty()) return {};
    fs::path p(text);
    return p.is_absolute() ? p.lexically_normal() : (base / p).lexically_normal();
  };

  DatasetManifest manifest{catalog, {}};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() == 1 && row[0].empty()) continue;
    auto cell = [&](std::optional<std::size_t> col) -> std::string {
      return col && *col < row.size() ? row[*col] : std::string{};
    };
    SampleRecord r;
    r.image_path = resolve(cell(path_col));
    r.class_name = cell(class_col);
    if (!catalog.contains(r.class_name)) {
      throw DataError("unknown class '" + r.class_name + "' on line " + std::to_string(i + 1) + " of " +
                      csv_path.string());
    }
    r.split = parse_split(cell(split_col));
    r.origin = parse_origin(cell(origin_col));
    r.source_path = resolve(cell(source_col));
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

}  // namespace

bool same_records(const DatasetManifest& a, const DatasetManifest& b) {
  if (!(a.catalog == b.catalog) || a.records.size() != b.records.size()) return false;
  std::vector<decltype(record_key(a.records.front()))> ka, kb;
  for (const auto& r : a.records) ka.push_back(record_key(r));
  for (const auto& r : b.records) kb.push_back(record_key(r));
  std::sort(ka.begin(), ka.end());
  std::sort(kb.begin(), kb.end());
  return ka == kb;
}

DatasetManifest ingest(const fs::path& root_or_csv, const ClassCatalog& catalog) {
  if (!fs::exists(root_or_csv)) throw DataError("dataset path does not exist: " + root_or_csv.string());
  DatasetManifest manifest =
      fs::is_directory(root_or_csv) ? ingest_directory(root_or_csv, catalog) : ingest_csv(root_or_csv, catalog);
  if (manifest.records.empty()) throw DataError("dataset at " + root_or_csv.string() + " contains no images");
  manifest.validate();
  return manifest;
}

void export_manifest_csv(const DatasetManifest& manifest, const fs::path& csv_path) {
  if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + csv_path.string());
  out << kManifestHeader << '\n';
  for (const auto& r : manifest.records) {
    csv::write_row(out, {r.image_path.generic_string(), r.class_name, std::string(to_string(r.split)),
                         std::string(to_string(r.origin)), r.source_path.generic_string()});
  }
  if (!out) throw DataError("failed writing manifest " + csv_path.string());
}

std::int64_t ClassStats::count(std::string_view name) const {
  for (const auto& [c, n] : counts) {
    if (c == name) return n;
  }
  throw DataError("no count for class '" + std::string(name) + "'");
}

std::int64_t ClassStats::total() const {
  std::int64_t sum = 0;
  for (const auto& kv : counts) sum += kv.second;
  return sum;
}

std::map<std::string, std::int64_t> ClassStats::as_map() const { return {counts.begin(), counts.end()}; }

double imbalance_ratio(const std::vector<std::pair<std::string, std::int64_t>>& counts) {
  std::int64_t hi = 0;
  std::int64_t lo = 0;
  for (const auto& kv : counts) {
    if (kv.second <= 0) continue;
    hi = std::max(hi, kv.second);
    lo = lo == 0 ? kv.second : std::min(lo, kv.second);
  }
  return lo == 0 ? 0.0 : static_cast<double>(hi) / static_cast<double>(lo);
}

ClassStats stats_from_counts(const ClassCatalog& catalog, const std::map<std::string, std::int64_t>& counts) {
  for (const auto& [name, n] : counts) {
    if (!catalog.contains(name)) throw DataError("unknown class '" + name + "'");
    if (n < 0) throw DataError("negative count for class '" + name + "'");
  }
  ClassStats stats;
  stats.normal_class = catalog.normal_class();
  for (const auto& c : catalog.classes()) {
    auto it = counts.find(c);
    stats.counts.emplace_back(c, it == counts.end() ? 0 : it->second);
  }
  stats.imbalance_ratio = imbalance_ratio(stats.counts);
  return stats;
}

ClassStats compute_stats(const DatasetManifest& manifest, Split split, std::optional<Origin> origin_filter) {
  std::map<std::string, std::int64_t> counts;
  std::int64_t considered = 0;
  for (const auto& r : manifest.records) {
    if (r.split != split || (origin_filter && r.origin != *origin_filter)) continue;
    ++counts[r.class_name];
    ++considered;
  }
  if (considered == 0) {
    throw DataError("split '" + std::string(to_string(split)) + "' has no matching records");
  }
  return stats_from_counts(manifest.catalog, counts);
}

nlohmann::json stats_to_json(const ClassStats& stats) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [name, n] : stats.counts) counts.push_back({{"class", name}, {"count", n}});
  return {{"counts", counts},
          {"normal_class", stats.normal_class},
          {"imbalance_ratio", stats.imbalance_ratio},
          {"total", stats.total()}};
}

PlotSummary emit_distribution_plot(const ClassStats& stats, bool include_normal, const fs::path& out,
                                   std::string_view title) {
  std::vector<std::pair<std::string, std::int64_t>> bars;
  for (const auto& kv : stats.counts) {
    if (include_normal || kv.first != stats.normal_class) bars.push_back(kv);
  }
  if (bars.empty()) throw DataError("cannot plot an empty class distribution");

  constexpr int kBarWidth = 56;
  constexpr int kGap = 18;
  constexpr int kLeft = 70;
  constexpr int kTop = 60;
  constexpr int kPlotHeight = 320;
  constexpr int kLabelBand = 150;
  const int width = kLeft + static_cast<int>(bars.size()) * (kBarWidth + kGap) + kGap + 20;
  const int height = kTop + kPlotHeight + kLabelBand;
  const int baseline = kTop + kPlotHeight;

  cv::Mat canvas(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Scalar ink(40, 40, 40);
  const cv::Scalar bar_color(180, 119, 31);

  std::int64_t peak = 0;
  for (const auto& kv : bars) peak = std::max(peak, kv.second);

  std::string heading = title.empty() ? (include_normal ? "Class distribution (with Normal)"
                                                        : "Class distribution (without Normal)")
                                      : std::string(title);
  cv::putText(canvas, heading, {kLeft, 30}, cv::FONT_HERSHEY_SIMPLEX, 0.6, ink, 1, cv::LINE_AA);
  cv::line(canvas, {kLeft - 10, baseline}, {width - 10, baseline}, ink, 1);
  cv::line(canvas, {kLeft - 10, kTop}, {kLeft - 10, baseline}, ink, 1);

  PlotSummary summary;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& [name, n] = bars[i];
    const int x0 = kLeft + kGap / 2 + static_cast<int>(i) * (kBarWidth + kGap);
    const int h = peak > 0 ? static_cast<int>(std::lround(static_cast<double>(n) / peak * (kPlotHeight - 20))) : 0;
    if (h > 0) cv::rectangle(canvas, {x0, baseline - h}, {x0 + kBarWidth - 1, baseline - 1}, bar_color, cv::FILLED);
    cv::putText(canvas, std::to_string(n), {x0, baseline - h - 6}, cv::FONT_HERSHEY_SIMPLEX, 0.4, ink, 1, cv::LINE_AA);

    // Class name written vertically under the bar.
    cv::Mat label(kBarWidth / 2, kLabelBand - 10, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::putText(label, name, {2, label.rows - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45, ink, 1, cv::LINE_AA);
    cv::Mat rotated;
    cv::rotate(label, rotated, cv::ROTATE_90_CLOCKWISE);
    rotated.copyTo(canvas(cv::Rect(x0 + kBarWidth / 4, baseline + 5, rotated.cols, rotated.rows)));

    summary.labels.push_back(name);
  }
  summary.bars = bars.size();

  if (out.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(out.parent_path(), ec);
  }
  bool ok = false;
  try {
    ok = cv::imwrite(out.string(), canvas);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw DataError("cannot write plot to " + out.string());
  return summary;
}

namespace {

// BGR, chosen far apart from the pinkish background and from each other.
constexpr std::array<std::array<unsigned char, 3>, 9> kPalette = {{
    {40, 220, 40},    // green
    {230, 60, 30},    // blue
    {20, 220, 240},   // yellow
    {230, 40, 200},   // purple
    {240, 230, 40},   // cyan
    {30, 30, 30},     // near-black
    {250, 250, 250},  // white
    {0, 120, 255},    // orange
    {120, 60, 0},     // navy
}};

std::string slug(std::string_view name) {
  std::string s;
  for (char c : name) s += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
  return s;
}

cv::Mat render_background(Rng& rng, int size) {
  const double tint = rng.uniform(-12.0, 12.0);
  cv::Mat img(size, size, CV_8UC3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      auto* px = img.ptr<cv::Vec3b>(y) + x;
      const double wave = 6.0 * std::sin(0.35 * x + 0.21 * y);
      const double noise = rng.uniform(-6.0, 6.0);
      (*px)[0] = cv::saturate_cast<unsigned char>(95 + tint + wave + noise);
      (*px)[1] = cv::saturate_cast<unsigned char>(105 + tint + wave + noise);
      (*px)[2] = cv::saturate_cast<unsigned char>(185 + tint + wave + noise);
    }
  }
  return img;
}

void render_pattern(cv::Mat& img, Rng& rng, int abnormal_index, int quadrant) {
  const int size = img.rows;
  const int half = size / 2;
  const auto& bgr = kPalette[static_cast<std::size_t>(abnormal_index) % kPalette.size()];
  const cv::Scalar color(bgr[0], bgr[1], bgr[2]);
  const int radius = std::max(3, static_cast<int>(std::lround(size * rng.uniform(0.13, 0.19))));
  const int qx = (quadrant % 2) * half;
  const int qy = (quadrant / 2) * half;
  const int cx = qx + static_cast<int>(rng.uniform_int(radius, std::max<std::int64_t>(radius, half - radius - 1)));
  const int cy = qy + static_cast<int>(rng.uniform_int(radius, std::max<std::int64_t>(radius, half - radius - 1)));

  switch (abnormal_index % 3) {
    case 0:
      cv::circle(img, {cx, cy}, radius, color, cv::FILLED, cv::LINE_8);
      break;
    case 1:
      cv::rectangle(img, {cx - radius, cy - radius}, {cx + radius, cy + radius}, color, cv::FILLED, cv::LINE_8);
      break;
    default: {
      std::vector<cv::Point> tri = {{cx, cy - radius}, {cx - radius, cy + radius}, {cx + radius, cy + radius}};
      cv::fillConvexPoly(img, tri, color, cv::LINE_8);
      break;
    }
  }
}

}  // namespace

std::optional<int> synthetic_quadrant(const ClassCatalog& catalog, std::string_view class_name) {
  if (catalog.is_normal(class_name)) return std::nullopt;
  const auto abnormal = catalog.abnormal_classes();
  auto it = std::find(abnormal.begin(), abnormal.end(), class_name);
  if (it == abnormal.end()) throw DataError("unknown class '" + std::string(class_name) + "'");
  return static_cast<int>((it - abnormal.begin()) % 4);
}

fs::path generate_synthetic(const ClassCatalog& catalog, const SyntheticSpec& spec, const fs::path& out_root) {
  if (spec.image_size < 16) throw ConfigError("synthetic image_size must be >= 16");
  for (const auto* counts : {&spec.train_counts, &spec.val_counts}) {
    for (const auto& [name, n] : *counts) {
      if (!catalog.contains(name)) throw DataError("unknown class '" + name + "' in synthetic counts");
      if (n < 0) throw ConfigError("negative synthetic count for class '" + name + "'");
    }
  }
  const auto abnormal = catalog.abnormal_classes();
  for (Split split : {Split::train, Split::val}) {
    const auto& counts = split == Split::train ? spec.train_counts : spec.val_counts;
    for (const auto& [name, n] : counts) {
      const fs::path dir = out_root / to_string(split) / name;
      fs::create_directories(dir);
      const auto quadrant = synthetic_quadrant(catalog, name);
      const int abnormal_index =
          quadrant ? static_cast<int>(std::find(abnormal.begin(), abnormal.end(), name) - abnormal.begin()) : -1;
      for (std::int64_t i = 0; i < n; ++i) {
        SeedHasher h(spec.seed);
        h.add(name).add(static_cast<std::uint64_t>(split)).add(static_cast<std::uint64_t>(i));
        Rng rng(h.digest());
        cv::Mat img = render_background(rng, spec.image_size);
        if (quadrant) render_pattern(img, rng, abnormal_index, *quadrant);
        char file[64];
        std::snprintf(file, sizeof(file), "_%05lld.png", static_cast<long long>(i));
        const fs::path path = dir / (slug(name) + file);
        if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
      }
    }
  }
  return out_root;
}

}  // namespace capsule
