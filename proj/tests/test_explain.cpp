#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "capsule/error.hpp"
#include "capsule/explain.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace capsule;
using testing::TempDir;

namespace {

FeatureMaps maps(std::int64_t c, std::int64_t h, std::int64_t w, std::vector<float> values) {
  return {c, h, w, std::move(values)};
}

double max_abs_diff(const cv::Mat& a, const cv::Mat& b) { return cv::norm(a, b, cv::NORM_INF); }

TrainedModel tiny_model(std::uint64_t seed, std::vector<std::string> names = {"Normal", "A", "B"}) {
  auto spec = default_spec(Architecture::tiny_hybrid, static_cast<std::int64_t>(names.size()));
  return build_model(spec, std::move(names), seed);
}

torch::Tensor random_image(std::uint64_t seed) {
  auto gen = torch::make_generator<torch::CPUGeneratorImpl>(seed);
  return torch::randn({3, 32, 32}, gen);
}

}  // namespace

TEST_CASE("hand-computed 2x2 example") {
  const auto a = maps(1, 2, 2, {1, 2, 3, 4});
  const auto g = maps(1, 2, 2, {0.5f, 0.5f, 0.5f, 0.5f});
  const cv::Mat m = gradcam_map(a, g);
  REQUIRE(m.rows == 2);
  REQUIRE(m.cols == 2);
  CHECK(m.at<float>(0, 0) == 0.25f);
  CHECK(m.at<float>(0, 1) == 0.5f);
  CHECK(m.at<float>(1, 0) == 0.75f);
  CHECK(m.at<float>(1, 1) == 1.0f);
}

TEST_CASE("constructed maps: uniform, rectified, zero-gradient channels") {
  // Channel 0 all ones with all-ones gradient; channel 1 has a pattern but zero gradient.
  const auto a = maps(2, 2, 3, {1, 1, 1, 1, 1, 1, 9, 0, 5, 0, 7, 0});
  const auto g = maps(2, 2, 3, {1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
  const cv::Mat m = gradcam_map(a, g);
  CHECK(cv::countNonZero(m != 1.0f) == 0);

  const auto neg = maps(2, 2, 2, {1, 2, 3, 4, 4, 3, 2, 1});
  const auto neg_g = maps(2, 2, 2, {-1, -1, -1, -1, -0.5f, -0.5f, -0.5f, -0.5f});
  CHECK(cv::countNonZero(gradcam_map(neg, neg_g)) == 0);

  CHECK_THROWS_AS(gradcam_map(maps(1, 2, 2, {1, 2, 3, 4}), maps(1, 1, 2, {1, 1})), ConfigError);
}

TEST_CASE("map scaling invariance at the combination step") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t c = rng.uniform_int(1, 6), h = rng.uniform_int(1, 5), w = rng.uniform_int(1, 5);
    std::vector<float> av, gv;
    for (std::int64_t i = 0; i < c * h * w; ++i) {
      av.push_back(static_cast<float>(rng.uniform(0.0, 3.0)));
      gv.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    }
    const auto base = gradcam_map(maps(c, h, w, av), maps(c, h, w, gv));
    for (float lambda : {0.5f, 2.0f, 8.0f}) {
      std::vector<float> scaled = gv;
      for (auto& v : scaled) v *= lambda;
      CHECK(max_abs_diff(base, gradcam_map(maps(c, h, w, av), maps(c, h, w, scaled))) == 0.0);
    }
  }
}

TEST_CASE("model gradcam: range, default layer, scaling, errors") {
  auto model = tiny_model(1);
  const auto img = random_image(2);
  const auto h = gradcam(model, img, "A");
  CHECK(h.target_class == "A");
  CHECK(h.grid.rows == 8);  // last CNN stage of tiny_hybrid at 32 px
  CHECK(h.upsampled.rows == 32);
  double lo, hi;
  cv::minMaxLoc(h.upsampled, &lo, &hi);
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);

  for (double lambda : {0.25, 3.7, 1000.0}) {
    const auto s = gradcam_scaled(model, img, "A", lambda);
    CHECK(max_abs_diff(s.grid, h.grid) <= 1e-6);
  }

  const auto layers = gradcam_layers(model);
  CHECK(layers.front() == "stem");
  const auto early = gradcam(model, img, "B", layers.front());
  CHECK(early.grid.rows > h.grid.rows);

  CHECK_THROWS_WITH_AS(gradcam(model, img, "Worms"), doctest::Contains("valid"), ConfigError);
  CHECK_THROWS_AS(gradcam(model, img, "A", "pool"), ConfigError);
  CHECK_THROWS_AS(gradcam(model, img, "A", "vit"), ConfigError);
  CHECK_THROWS_AS(gradcam(model, img, "A", "layer9"), ConfigError);
  CHECK_THROWS_AS(gradcam(model, torch::zeros({3, 16, 16}), "A"), ConfigError);
}

TEST_CASE("gradcam leaves the model in its previous mode and without parameter grads") {
  auto model = tiny_model(3);
  model.train(true);
  gradcam(model, random_image(1), "Normal");
  CHECK(model.backbone()->is_training());
  for (const auto& p : model.parameters()) CHECK_FALSE(p.grad().defined());
}

TEST_CASE("heatmap values stay in [0,1] with max 1 unless zero") {
  for (std::uint64_t i = 0; i < 20; ++i) {
    auto model = tiny_model(100 + i);
    const auto h = gradcam(model, random_image(200 + i), "B");
    double lo, hi;
    cv::minMaxLoc(h.grid, &lo, &hi);
    CHECK(lo >= 0.0);
    CHECK((hi == 1.0 || hi == 0.0));
  }
}

TEST_CASE("overlay blends and keeps the input size") {
  Heatmap heat;
  heat.grid = cv::Mat(4, 4, CV_32F, cv::Scalar(0.0f));
  heat.grid.at<float>(1, 2) = 1.0f;
  heat.upsampled = upsample_map(heat.grid, 32, 32);

  cv::Mat img(50, 70, CV_8UC3);
  cv::randu(img, 0, 255);
  CHECK(max_abs_diff(overlay(heat, img, 0.0), img) == 0.0);
  CHECK(overlay(heat, img, 0.6).size() == img.size());

  Heatmap zero;
  zero.grid = cv::Mat(3, 5, CV_32F, cv::Scalar(0.0f));
  const cv::Mat pure = overlay(zero, img, 1.0);
  const cv::Vec3b c0 = heat_color(0.0f);
  for (int y = 0; y < pure.rows; ++y) {
    for (int x = 0; x < pure.cols; ++x) REQUIRE(pure.at<cv::Vec3b>(y, x) == c0);
  }
  // Jet at zero is dark blue.
  CHECK(c0[0] > 100);
  CHECK(c0[2] == 0);

  CHECK_THROWS_AS(overlay(heat, img, 1.5), ConfigError);
  CHECK_THROWS_AS(overlay(heat, cv::Mat(), 0.5), DataError);

  TempDir tmp;
  write_overlay(heat, img, 0.5, tmp / "o.png");
  const cv::Mat back = cv::imread((tmp / "o.png").string());
  CHECK(max_abs_diff(back, overlay(heat, img, 0.5)) == 0.0);
  write_grid_csv(heat, tmp / "g.csv");
  const auto text = testing::read_file(tmp / "g.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  CHECK(text.find("0,0,1,0") != std::string::npos);
}

TEST_CASE("centroid and quadrant helpers") {
  cv::Mat m(8, 8, CV_32F, cv::Scalar(0.0f));
  m(cv::Rect(5, 1, 2, 2)).setTo(1.0f);
  const auto c = mass_centroid(m);
  CHECK(c.x == doctest::Approx(6.0));
  CHECK(c.y == doctest::Approx(2.0));
  CHECK(quadrant_of(c, 8, 8) == 1);
  CHECK(quadrant_of({1, 7}, 8, 8) == 2);
  CHECK(quadrant_of({7, 7}, 8, 8) == 3);
}
