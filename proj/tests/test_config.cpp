#include <cstdlib>
#include <fstream>

#include "capsule/config.hpp"
#include "capsule/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace capsule;
using testing::TempDir;

namespace {

void write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("run config parsing resolves paths and fills defaults") {
  TempDir tmp;
  fs::create_directories(tmp / "data");
  write(tmp / "cfg" / "run.json", R"({
    "seed": 11,
    "dataset": "../data",
    "output_dir": "out",
    "catalog": {"classes": ["Normal", "A", "B"], "normal_class": "Normal"},
    "augmentation": {"target_count": 40, "thresholds": [10, 30]},
    "curriculum": {"remainder_mode": "drop"},
    "model": {"architecture": "tiny_hybrid", "input_size": 32, "head": "mlp"},
    "train": {"epochs_per_stage": 2, "mode": "both"}
  })");
  const auto c = load_run_config(tmp / "cfg" / "run.json");
  CHECK(c.seed == 11);
  CHECK(c.dataset == (tmp / "data").lexically_normal());
  CHECK(c.output_dir == (tmp / "cfg" / "out").lexically_normal());
  CHECK(c.catalog.size() == 3);
  CHECK(c.target_count == 40);
  CHECK(c.cap_multiplier == 25);
  CHECK(c.thresholds.low == 10);
  CHECK(c.remainder_mode == RemainderMode::drop);
  CHECK(c.model.head == HeadKind::mlp);
  CHECK(c.train.epochs_per_stage == 2);
  CHECK(c.train.seed == 11);
  CHECK(c.train.learning_rate == 1e-3);
  CHECK(c.mode == TrainMode::both);
  CHECK(c.augmented_manifest() == c.output_dir / "augment" / "manifest.csv");

  // The snapshot parses back to the same settings.
  write_config_snapshot(c, tmp / "snap");
  const auto again = load_run_config(tmp / "snap" / "config_snapshot.json");
  CHECK(again.to_json() == c.to_json());
}

TEST_CASE("run config errors") {
  TempDir tmp;
  fs::create_directories(tmp / "data");
  auto parse = [&](const std::string& text) { return parse_run_config(nlohmann::json::parse(text), tmp.path()); };
  CHECK_THROWS_WITH_AS(parse(R"({"dataset": "data"})"), doctest::Contains("seed"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": 1})"), ConfigError);
  CHECK_THROWS_WITH_AS(parse(R"({"seed": 1, "dataset": "missing_dir"})"), doctest::Contains("missing_dir"), DataError);
  CHECK_THROWS_AS(parse(R"({"seed": 1, "dataset": "data", "model": {"architecture": "vgg"}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": 1, "dataset": "data", "train": {"learning_rate": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": 1, "dataset": "data", "train": {"mode": "sideways"}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": 1, "dataset": "data", "augmentation": {"thresholds": [5, 1]}})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": "x", "dataset": "data"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"seed": 1, "dataset": "data", "explain": {"alpha": 2}})"), ConfigError);
  CHECK_THROWS_AS(load_run_config(tmp / "nope.json"), ConfigError);
  write(tmp / "bad.json", "{ not json");
  CHECK_THROWS_AS(load_run_config(tmp / "bad.json"), ConfigError);
}

TEST_CASE("device can be overridden from the environment") {
  TempDir tmp;
  fs::create_directories(tmp / "data");
  ::setenv("CAPSULE_DEVICE", "cuda:3", 1);
  const auto c = parse_run_config(nlohmann::json::parse(R"({"seed": 1, "dataset": "data"})"), tmp.path());
  ::unsetenv("CAPSULE_DEVICE");
  CHECK(c.train.device == "cuda:3");
}
