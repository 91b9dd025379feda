#include "capsule/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "capsule/error.hpp"

namespace capsule {

FeatureMaps FeatureMaps::from_tensor(const torch::Tensor& t) {
  auto x = t.detach().to(torch::kCPU).to(torch::kFloat).contiguous();
  if (x.dim() == 4 && x.size(0) == 1) x = x.squeeze(0);
  if (x.dim() != 3) throw ConfigError("feature maps need shape (C, h, w)");
  FeatureMaps m{x.size(0), x.size(1), x.size(2), {}};
  m.values.assign(x.data_ptr<float>(), x.data_ptr<float>() + x.numel());
  return m;
}

cv::Mat gradcam_map(const FeatureMaps& activations, const FeatureMaps& gradients) {
  if (activations.channels != gradients.channels || activations.height != gradients.height ||
      activations.width != gradients.width) {
    throw ConfigError("activation and gradient shapes differ");
  }
  if (activations.height < 1 || activations.width < 1) throw ConfigError("feature maps have no spatial extent");
  const auto area = static_cast<double>(activations.height * activations.width);

  cv::Mat map(static_cast<int>(activations.height), static_cast<int>(activations.width), CV_64F, cv::Scalar(0.0));
  for (std::int64_t c = 0; c < activations.channels; ++c) {
    double alpha = 0.0;
    for (std::int64_t y = 0; y < gradients.height; ++y) {
      for (std::int64_t x = 0; x < gradients.width; ++x) alpha += gradients.at(c, y, x);
    }
    alpha /= area;
    if (alpha == 0.0) continue;
    for (std::int64_t y = 0; y < activations.height; ++y) {
      auto* row = map.ptr<double>(static_cast<int>(y));
      for (std::int64_t x = 0; x < activations.width; ++x) row[x] += alpha * activations.at(c, y, x);
    }
  }

  double peak = 0.0;
  for (int y = 0; y < map.rows; ++y) {
    auto* row = map.ptr<double>(y);
    for (int x = 0; x < map.cols; ++x) {
      row[x] = std::max(0.0, row[x]);
      peak = std::max(peak, row[x]);
    }
  }
  if (peak > 0.0) map /= peak;
  cv::Mat out;
  map.convertTo(out, CV_32F);
  return out;
}

cv::Mat upsample_map(const cv::Mat& grid, int rows, int cols) {
  cv::Mat out;
  cv::resize(grid, out, cv::Size(cols, rows), 0, 0, cv::INTER_LINEAR);
  cv::min(cv::max(out, 0.0), 1.0, out);
  return out;
}

std::vector<std::string> gradcam_layers(const TrainedModel& model) { return model.backbone()->cnn->stage_names(); }

Heatmap gradcam_scaled(TrainedModel& model, const torch::Tensor& image, std::string_view target_class, double scale,
                       std::string_view layer_selector, std::string input_ref) {
  const std::size_t target = model.class_index(target_class);
  if (layer_selector == "pool" || layer_selector == "vit" || layer_selector == "head") {
    throw ConfigError("layer '" + std::string(layer_selector) + "' has no spatial dimensions");
  }
  const auto layers = gradcam_layers(model);
  const std::string layer = layer_selector.empty() ? layers.back() : std::string(layer_selector);
  if (std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    std::string valid;
    for (const auto& l : layers) valid += (valid.empty() ? "" : ", ") + l;
    throw ConfigError("unknown GradCAM layer '" + layer + "' (valid: " + valid + ")");
  }
  if (!(scale > 0.0)) throw ConfigError("gradient scale must be positive");

  torch::AutoGradMode grad_mode(true);
  const bool was_training = model.backbone()->is_training();
  model.eval();
  auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
  model.check_input(x);
  if (x.size(0) != 1) throw ConfigError("gradcam takes a single image");

  auto out = model.backbone()->forward(x, layer);
  auto logits = model.head()->forward(BackboneImpl::fuse(out));
  auto objective = logits[0][static_cast<std::int64_t>(target)] * scale;
  auto grads = torch::autograd::grad({objective}, {out.captured}, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                     /*allow_unused=*/false);
  model.train(was_training);

  Heatmap heatmap;
  heatmap.grid = gradcam_map(FeatureMaps::from_tensor(out.captured), FeatureMaps::from_tensor(grads[0]));
  const int size = static_cast<int>(model.spec().input_size);
  heatmap.upsampled = upsample_map(heatmap.grid, size, size);
  heatmap.target_class = std::string(target_class);
  heatmap.input_ref = std::move(input_ref);
  return heatmap;
}

Heatmap gradcam(TrainedModel& model, const torch::Tensor& image, std::string_view target_class,
                std::string_view layer_selector, std::string input_ref) {
  return gradcam_scaled(model, image, target_class, 1.0, layer_selector, std::move(input_ref));
}

cv::Vec3b heat_color(float v) {
  cv::Mat px(1, 1, CV_8U, cv::Scalar(cv::saturate_cast<unsigned char>(std::lround(255.0 * v))));
  cv::Mat colored;
  cv::applyColorMap(px, colored, cv::COLORMAP_JET);
  return colored.at<cv::Vec3b>(0, 0);
}

cv::Mat overlay(const Heatmap& heatmap, const cv::Mat& image, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("overlay alpha must lie in [0, 1]");
  if (image.empty() || image.type() != CV_8UC3) throw DataError("overlay needs an 8-bit 3-channel image");
  const cv::Mat& source = heatmap.upsampled.empty() ? heatmap.grid : heatmap.upsampled;
  cv::Mat heat = upsample_map(source, image.rows, image.cols);
  cv::Mat heat8;
  heat.convertTo(heat8, CV_8U, 255.0);
  cv::Mat colored;
  cv::applyColorMap(heat8, colored, cv::COLORMAP_JET);

  cv::Mat out(image.size(), CV_8UC3);
  for (int y = 0; y < image.rows; ++y) {
    const auto* src = image.ptr<cv::Vec3b>(y);
    const auto* col = colored.ptr<cv::Vec3b>(y);
    auto* dst = out.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        dst[x][c] = cv::saturate_cast<unsigned char>(std::lround((1.0 - alpha) * src[x][c] + alpha * col[x][c]));
      }
    }
  }
  return out;
}

void write_overlay(const Heatmap& heatmap, const cv::Mat& image, double alpha, const std::filesystem::path& out) {
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  if (!cv::imwrite(out.string(), overlay(heatmap, image, alpha))) throw DataError("cannot write " + out.string());
}

void write_grid_csv(const Heatmap& heatmap, const std::filesystem::path& out) {
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out.string());
  f.precision(9);
  for (int y = 0; y < heatmap.grid.rows; ++y) {
    for (int x = 0; x < heatmap.grid.cols; ++x) f << (x ? "," : "") << heatmap.grid.at<float>(y, x);
    f << '\n';
  }
}

cv::Point2d mass_centroid(const cv::Mat& map) {
  double mass = 0.0, sx = 0.0, sy = 0.0;
  for (int y = 0; y < map.rows; ++y) {
    for (int x = 0; x < map.cols; ++x) {
      const double v = map.at<float>(y, x);
      mass += v;
      sx += v * (x + 0.5);
      sy += v * (y + 0.5);
    }
  }
  if (mass <= 0.0) return {map.cols / 2.0, map.rows / 2.0};
  return {sx / mass, sy / mass};
}

int quadrant_of(const cv::Point2d& point, int rows, int cols) {
  const int qx = point.x >= cols / 2.0 ? 1 : 0;
  const int qy = point.y >= rows / 2.0 ? 1 : 0;
  return qy * 2 + qx;
}

}  // namespace capsule
