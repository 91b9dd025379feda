#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "capsule/catalog.hpp"
#include "capsule/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace capsule;
using testing::TempDir;

namespace {

ClassCatalog abc_catalog() { return ClassCatalog({"Normal", "A", "B"}, "Normal"); }

// Distinct bar columns along one image row, counted by color runs.
std::size_t count_bar_runs(const fs::path& png) {
  cv::Mat img = cv::imread(png.string(), cv::IMREAD_COLOR);
  REQUIRE_FALSE(img.empty());
  const cv::Vec3b bar(180, 119, 31);
  // The x axis sits at row 380; one row above it every non-empty bar is drawn.
  const int row = 378;
  std::size_t runs = 0;
  bool inside = false;
  for (int x = 0; x < img.cols; ++x) {
    const bool hit = img.at<cv::Vec3b>(row, x) == bar;
    if (hit && !inside) ++runs;
    inside = hit;
  }
  return runs;
}

}  // namespace

TEST_CASE("catalog rejects malformed class lists") {
  CHECK_THROWS_AS(ClassCatalog({"Normal"}, "Normal"), ConfigError);
  CHECK_THROWS_AS(ClassCatalog({"Normal", "A", "A"}, "Normal"), ConfigError);
  CHECK_THROWS_AS(ClassCatalog({"A", "B"}, "Normal"), ConfigError);
  const auto c = default_catalog();
  CHECK(c.size() == 10);
  CHECK(c.contains("Worms"));
  CHECK(c.normal_class() == "Normal");
  CHECK(c.abnormal_classes().size() == 9);
}

TEST_CASE("catalog JSON round trip") {
  TempDir tmp;
  save_catalog(default_catalog(), tmp / "catalog.json");
  CHECK(load_catalog(tmp / "catalog.json") == default_catalog());
  CHECK_THROWS_AS(catalog_from_json(nlohmann::json{{"classes", {"a", "b"}}}), ConfigError);
}

TEST_CASE("ingest a split/class directory tree") {
  TempDir tmp;
  SyntheticSpec spec;
  spec.train_counts = {{"Normal", 3}, {"A", 2}, {"B", 1}};
  spec.val_counts = {{"Normal", 1}, {"A", 1}, {"B", 1}};
  spec.image_size = 16;
  generate_synthetic(abc_catalog(), spec, tmp.path());

  const auto m = ingest(tmp.path(), abc_catalog());
  CHECK(m.records.size() == 9);
  CHECK(m.select(Split::train).size() == 6);
  CHECK(m.select(Split::val).size() == 3);
  for (const auto& r : m.records) {
    CHECK(r.origin == Origin::original);
    CHECK(fs::exists(r.image_path));
    CHECK(abc_catalog().contains(r.class_name));
  }
}

TEST_CASE("ingest rejects unknown classes by name") {
  TempDir tmp;
  {
    std::ofstream csv(tmp / "m.csv");
    csv << "image_path,class_name,split\n";
    csv << "a.png,A,train\n";
    csv << "b.png,Wormz,train\n";
  }
  try {
    ingest(tmp / "m.csv", abc_catalog());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("Wormz") != std::string::npos);
  }

  fs::create_directories(tmp / "tree" / "train" / "Wormz");
  CHECK_THROWS_WITH_AS(ingest(tmp / "tree", abc_catalog()), doctest::Contains("Wormz"), DataError);
}

TEST_CASE("ingest rejects empty datasets and missing paths") {
  TempDir tmp;
  fs::create_directories(tmp / "train" / "A");
  CHECK_THROWS_AS(ingest(tmp.path(), abc_catalog()), DataError);
  CHECK_THROWS_WITH_AS(ingest(tmp / "nope", abc_catalog()), doctest::Contains("nope"), DataError);
}

TEST_CASE("synthetic set of 10 images per class over 4 classes yields 40 train records") {
  TempDir tmp;
  const ClassCatalog cat({"Normal", "A", "B", "C"}, "Normal");
  SyntheticSpec spec;
  spec.train_counts = {{"Normal", 10}, {"A", 10}, {"B", 10}, {"C", 10}};
  spec.image_size = 16;
  spec.seed = 3;
  generate_synthetic(cat, spec, tmp.path());
  // Independent count: files the generator actually wrote.
  const auto on_disk = testing::count_files(tmp / "train");
  REQUIRE(on_disk == 40);
  const auto m = ingest(tmp.path(), cat);
  CHECK(m.select(Split::train).size() == on_disk);
}

TEST_CASE("synthetic generation is byte-deterministic per seed") {
  TempDir a, b, c;
  const ClassCatalog cat({"Normal", "A", "B"}, "Normal");
  SyntheticSpec spec;
  spec.train_counts = {{"A", 5}, {"B", 5}};
  spec.seed = 7;
  generate_synthetic(cat, spec, a.path());
  generate_synthetic(cat, spec, b.path());
  CHECK(testing::snapshot_tree(a.path()) == testing::snapshot_tree(b.path()));

  spec.seed = 8;
  generate_synthetic(cat, spec, c.path());
  CHECK(testing::snapshot_tree(a.path()) != testing::snapshot_tree(c.path()));
}

TEST_CASE("synthetic class with zero count gets an empty directory") {
  TempDir tmp;
  SyntheticSpec spec;
  spec.train_counts = {{"A", 0}};
  generate_synthetic(abc_catalog(), spec, tmp.path());
  CHECK(fs::is_directory(tmp / "train" / "A"));
  CHECK(fs::is_empty(tmp / "train" / "A"));
  CHECK_THROWS_AS(generate_synthetic(abc_catalog(), SyntheticSpec{{{"A", 1}}, {}, 8, 0}, tmp / "x"), ConfigError);
}

TEST_CASE("synthetic patterns sit in their class quadrant") {
  const ClassCatalog cat({"Normal", "A", "B", "C", "D", "E"}, "Normal");
  CHECK_FALSE(synthetic_quadrant(cat, "Normal").has_value());
  CHECK(*synthetic_quadrant(cat, "A") == 0);
  CHECK(*synthetic_quadrant(cat, "D") == 3);
  CHECK(*synthetic_quadrant(cat, "E") == 0);

  TempDir tmp;
  SyntheticSpec spec;
  spec.train_counts = {{"Normal", 1}, {"B", 4}};
  spec.image_size = 32;
  generate_synthetic(cat, spec, tmp.path());
  // B draws in the top-right quadrant: pixel difference from a Normal image is
  // concentrated there.
  for (const auto& e : fs::directory_iterator(tmp / "train" / "B")) {
    cv::Mat img = cv::imread(e.path().string());
    double energy[4] = {0, 0, 0, 0};
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        const auto px = img.at<cv::Vec3b>(y, x);
        // Background is pink (R high, B/G mid); the B pattern is a saturated blue.
        const double blue = std::max(0, px[0] - px[2]);
        energy[(y >= 16 ? 2 : 0) + (x >= 16 ? 1 : 0)] += blue;
      }
    }
    CHECK(energy[1] > 0.0);
    CHECK(energy[1] > energy[0] + energy[2] + energy[3]);
  }
}

TEST_CASE("compute_stats counts, ratios and zero classes") {
  const auto cat = default_catalog();
  auto s = stats_from_counts(cat, {{"Normal", 28663}, {"Worms", 158}});
  CHECK(s.imbalance_ratio == doctest::Approx(28663.0 / 158.0));
  CHECK(s.imbalance_ratio == doctest::Approx(181.41).epsilon(1e-4));
  CHECK(s.count("Polyp") == 0);

  std::map<std::string, std::int64_t> equal;
  for (const auto& c : cat.classes()) equal[c] = 50;
  CHECK(stats_from_counts(cat, equal).imbalance_ratio == 1.0);

  DatasetManifest m{abc_catalog(), {}};
  m.records.push_back({"n1.png", "Normal", Split::train, Origin::original, {}});
  m.records.push_back({"n2.png", "Normal", Split::train, Origin::original, {}});
  m.records.push_back({"a1.png", "A", Split::train, Origin::original, {}});
  m.records.push_back({"a1_aug1.png", "A", Split::train, Origin::augmented, "a1.png"});
  const auto st = compute_stats(m, Split::train);
  CHECK(st.count("B") == 0);
  CHECK(st.count("A") == 1);
  CHECK(st.imbalance_ratio == 2.0);
  CHECK(compute_stats(m, Split::train, std::nullopt).count("A") == 2);
  CHECK_THROWS_AS(compute_stats(m, Split::val), DataError);
}

TEST_CASE("stats are exhaustive over matching records") {
  Rng rng(11);
  const auto cat = default_catalog();
  for (int trial = 0; trial < 30; ++trial) {
    DatasetManifest m{cat, {}};
    const auto n = rng.uniform_int(1, 200);
    std::int64_t expected_train_original = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      SampleRecord r;
      r.image_path = "img" + std::to_string(i) + ".png";
      r.class_name = cat.classes()[static_cast<std::size_t>(rng.uniform_int(0, 9))];
      r.split = rng.bernoulli(0.7) ? Split::train : Split::val;
      if (rng.bernoulli(0.3)) {
        r.origin = Origin::augmented;
        r.source_path = "src.png";
      }
      expected_train_original += (r.split == Split::train && r.origin == Origin::original) ? 1 : 0;
      m.records.push_back(r);
    }
    if (expected_train_original == 0) continue;
    CHECK(compute_stats(m, Split::train).total() == expected_train_original);
  }
}

TEST_CASE("manifest CSV export and re-ingest round trip") {
  TempDir tmp;
  SyntheticSpec spec;
  spec.train_counts = {{"Normal", 3}, {"A", 2}};
  spec.val_counts = {{"B", 2}};
  spec.image_size = 16;
  generate_synthetic(abc_catalog(), spec, tmp / "data");
  auto m = ingest(tmp / "data", abc_catalog());
  m.records.push_back({tmp / "extra, \"odd\".png", "A", Split::train, Origin::augmented, m.records.front().image_path});
  export_manifest_csv(m, tmp / "manifest.csv");
  CHECK(testing::read_file(tmp / "manifest.csv").rfind(std::string(kManifestHeader) + "\n", 0) == 0);
  const auto back = ingest(tmp / "manifest.csv", abc_catalog());
  CHECK(same_records(m, back));

  std::reverse(m.records.begin(), m.records.end());
  CHECK(same_records(m, back));
}

TEST_CASE("distribution plot has one bar per class") {
  TempDir tmp;
  std::map<std::string, std::int64_t> counts;
  std::int64_t n = 100;
  const auto cat = default_catalog();
  for (const auto& c : cat.classes()) counts[c] = (n += 37);
  const auto stats = stats_from_counts(default_catalog(), counts);

  const auto with = emit_distribution_plot(stats, true, tmp / "with.png");
  CHECK(with.bars == 10);
  CHECK(fs::exists(tmp / "with.png"));
  CHECK(count_bar_runs(tmp / "with.png") == 10);

  const auto without = emit_distribution_plot(stats, false, tmp / "without.png");
  CHECK(without.bars == 9);
  CHECK(std::find(without.labels.begin(), without.labels.end(), "Normal") == without.labels.end());
  CHECK(count_bar_runs(tmp / "without.png") == 9);

  CHECK_THROWS_AS(emit_distribution_plot(ClassStats{}, true, tmp / "empty.png"), DataError);
  std::ofstream(tmp / "file") << "x";
  CHECK_THROWS_AS(emit_distribution_plot(stats, true, tmp / "file" / "p.png"), DataError);
}
