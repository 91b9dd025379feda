#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "capsule/model.hpp"

namespace capsule {

/// Activations or gradients of one image at one layer, channel-major.
struct FeatureMaps {
  std::int64_t channels = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> values;

  float at(std::int64_t c, std::int64_t y, std::int64_t x) const { return values[(c * height + y) * width + x]; }
  /// From a (C, h, w) or (1, C, h, w) tensor.
  static FeatureMaps from_tensor(const torch::Tensor& t);
};

struct Heatmap {
  cv::Mat grid;       // CV_32F at feature-map resolution, values in [0, 1]
  cv::Mat upsampled;  // CV_32F at model input resolution
  std::string target_class;
  std::string input_ref;
};

/// Grad-CAM combination: weights α_k are the spatial means of the gradients,
/// the map is max(0, Σ_k α_k A_k) divided by its maximum. An all-zero map
/// stays zero. Returns a CV_32F grid of the activation's spatial size.
cv::Mat gradcam_map(const FeatureMaps& activations, const FeatureMaps& gradients);

/// Bilinear resize of a [0,1] grid, clamped back into [0,1].
cv::Mat upsample_map(const cv::Mat& grid, int rows, int cols);

/// Layer names GradCAM can target for this model (CNN branch stages). The
/// empty selector means the last one.
std::vector<std::string> gradcam_layers(const TrainedModel& model);

/// GradCAM of `target_class` for one preprocessed (3, S, S) image. Throws
/// ConfigError for unknown classes, unknown layers, or layers without spatial
/// extent ("pool", "vit", "head").
Heatmap gradcam(TrainedModel& model, const torch::Tensor& image, std::string_view target_class,
                std::string_view layer_selector = {}, std::string input_ref = {});

/// Same, but the gradient is taken of `scale` × logit. Normalized output is
/// invariant to any positive scale.
Heatmap gradcam_scaled(TrainedModel& model, const torch::Tensor& image, std::string_view target_class,
                       double scale, std::string_view layer_selector = {}, std::string input_ref = {});

/// Jet-colored heatmap blended over `image` (8-bit BGR) at opacity alpha.
/// The output has the size of `image`.
cv::Mat overlay(const Heatmap& heatmap, const cv::Mat& image, double alpha);
/// Jet color used for heat value v in [0,1].
cv::Vec3b heat_color(float v);

void write_overlay(const Heatmap& heatmap, const cv::Mat& image, double alpha, const std::filesystem::path& out);
void write_grid_csv(const Heatmap& heatmap, const std::filesystem::path& out);

/// Heat-weighted centroid (x, y) of a map in its own pixel coordinates.
cv::Point2d mass_centroid(const cv::Mat& map);
/// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
int quadrant_of(const cv::Point2d& point, int rows, int cols);

}  // namespace capsule
