#include "capsule/augment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "capsule/error.hpp"

namespace capsule {

namespace {

constexpr std::pair<TransformKind, std::string_view> kKindNames[] = {
    {TransformKind::horizontal_flip, "horizontal_flip"},
    {TransformKind::vertical_flip, "vertical_flip"},
    {TransformKind::rotate90, "rotate90"},
    {TransformKind::color_jitter, "color_jitter"},
    {TransformKind::shift_scale_rotate, "shift_scale_rotate"},
    {TransformKind::gaussian_blur, "gaussian_blur"},
};

constexpr std::pair<TierName, std::string_view> kTierNames[] = {
    {TierName::heavy, "heavy"},
    {TierName::medium, "medium"},
    {TierName::light, "light"},
};

void check_range(const Range& r, std::string_view what) {
  if (!(r.lo <= r.hi)) throw ConfigError(std::string(what) + " range is not ordered (low > high)");
}

}  // namespace

std::string_view to_string(TransformKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

TransformKind parse_transform_kind(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (name == text) return k;
  }
  throw ConfigError("unknown transform kind '" + std::string(text) + "'");
}

std::string_view to_string(TierName tier) {
  for (const auto& [t, name] : kTierNames) {
    if (t == tier) return name;
  }
  return "unknown";
}

TierName parse_tier(std::string_view text) {
  for (const auto& [t, name] : kTierNames) {
    if (name == text) return t;
  }
  throw ConfigError("unknown augmentation tier '" + std::string(text) + "'");
}

void TransformSpec::validate() const {
  if (!(probability >= 0.0 && probability <= 1.0)) {
    throw ConfigError(std::string(to_string(kind)) + ": probability must lie in [0, 1]");
  }
  switch (kind) {
    case TransformKind::color_jitter:
      if (jitter.brightness < 0 || jitter.contrast < 0 || jitter.saturation < 0 || jitter.hue < 0 ||
          jitter.hue > 0.5) {
        throw ConfigError("color_jitter: factors must be non-negative and hue <= 0.5");
      }
      break;
    case TransformKind::shift_scale_rotate:
      check_range(affine.shift, "shift_scale_rotate shift");
      check_range(affine.scale, "shift_scale_rotate scale");
      check_range(affine.rotate, "shift_scale_rotate rotate");
      if (affine.scale.lo <= -1.0) throw ConfigError("shift_scale_rotate: scale must stay above -1");
      break;
    case TransformKind::gaussian_blur:
      if (blur.min_kernel > blur.max_kernel) throw ConfigError("gaussian_blur kernel range is not ordered");
      if (blur.min_kernel < 3 || blur.min_kernel % 2 == 0 || blur.max_kernel % 2 == 0) {
        throw ConfigError("gaussian_blur kernel sizes must be odd and >= 3");
      }
      break;
    default:
      break;
  }
}

std::vector<TransformKind> AugmentationTier::kinds() const {
  std::vector<TransformKind> out;
  for (const auto& t : transforms) out.push_back(t.kind);
  return out;
}

TierSet default_tiers() {
  auto spec = [](TransformKind kind) {
    TransformSpec s;
    s.kind = kind;
    s.probability = 0.5;
    return s;
  };
  std::vector<TransformSpec> light = {spec(TransformKind::horizontal_flip), spec(TransformKind::vertical_flip)};
  std::vector<TransformSpec> medium = light;
  medium.push_back(spec(TransformKind::rotate90));
  medium.push_back(spec(TransformKind::color_jitter));
  std::vector<TransformSpec> heavy = medium;
  heavy.push_back(spec(TransformKind::shift_scale_rotate));
  heavy.push_back(spec(TransformKind::gaussian_blur));
  return {{TierName::light, {TierName::light, light}},
          {TierName::medium, {TierName::medium, medium}},
          {TierName::heavy, {TierName::heavy, heavy}}};
}

void validate_tiers(const TierSet& tiers) {
  for (TierName name : {TierName::light, TierName::medium, TierName::heavy}) {
    auto it = tiers.find(name);
    if (it == tiers.end()) throw ConfigError("missing augmentation tier '" + std::string(to_string(name)) + "'");
    for (const auto& t : it->second.transforms) t.validate();
  }
  auto kind_set = [&](TierName n) {
    auto k = tiers.at(n).kinds();
    return std::set<TransformKind>(k.begin(), k.end());
  };
  const auto light = kind_set(TierName::light);
  const auto medium = kind_set(TierName::medium);
  const auto heavy = kind_set(TierName::heavy);
  auto subset = [](const auto& a, const auto& b) { return std::includes(b.begin(), b.end(), a.begin(), a.end()); };
  if (!subset(light, medium) || !subset(medium, heavy)) {
    throw ConfigError("augmentation tiers must nest: light within medium within heavy");
  }
}

nlohmann::json tiers_to_json(const TierSet& tiers) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [name, tier] : tiers) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& t : tier.transforms) {
      nlohmann::json item = {{"kind", to_string(t.kind)}, {"probability", t.probability}};
      if (t.kind == TransformKind::color_jitter) {
        item["brightness"] = t.jitter.brightness;
        item["contrast"] = t.jitter.contrast;
        item["saturation"] = t.jitter.saturation;
        item["hue"] = t.jitter.hue;
      } else if (t.kind == TransformKind::shift_scale_rotate) {
        item["shift"] = {t.affine.shift.lo, t.affine.shift.hi};
        item["scale"] = {t.affine.scale.lo, t.affine.scale.hi};
        item["rotate"] = {t.affine.rotate.lo, t.affine.rotate.hi};
      } else if (t.kind == TransformKind::gaussian_blur) {
        item["kernel"] = {t.blur.min_kernel, t.blur.max_kernel};
      }
      list.push_back(std::move(item));
    }
    doc[std::string(to_string(name))] = std::move(list);
  }
  return doc;
}

TierSet tiers_from_json(const nlohmann::json& doc) {
  TierSet tiers;
  try {
    for (const auto& [key, list] : doc.items()) {
      AugmentationTier tier{parse_tier(key), {}};
      for (const auto& item : list) {
        TransformSpec t;
        t.kind = parse_transform_kind(item.at("kind").get<std::string>());
        t.probability = item.value("probability", 0.5);
        t.jitter.brightness = item.value("brightness", t.jitter.brightness);
        t.jitter.contrast = item.value("contrast", t.jitter.contrast);
        t.jitter.saturation = item.value("saturation", t.jitter.saturation);
        t.jitter.hue = item.value("hue", t.jitter.hue);
        auto range = [&](const char* field, Range fallback) {
          if (!item.contains(field)) return fallback;
          auto v = item.at(field).get<std::vector<double>>();
          if (v.size() != 2) throw ConfigError(std::string(field) + " must be a [low, high] pair");
          return Range{v[0], v[1]};
        };
        t.affine.shift = range("shift", t.affine.shift);
        t.affine.scale = range("scale", t.affine.scale);
        t.affine.rotate = range("rotate", t.affine.rotate);
        if (item.contains("kernel")) {
          auto k = item.at("kernel").get<std::vector<int>>();
          if (k.size() != 2) throw ConfigError("kernel must be a [min, max] pair");
          t.blur = {k[0], k[1]};
        }
        tier.transforms.push_back(t);
      }
      tiers[tier.name] = std::move(tier);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed tier definitions: ") + e.what());
  }
  validate_tiers(tiers);
  return tiers;
}

TierName assign_tier(std::int64_t class_count, TierThresholds thresholds) {
  if (!(0 < thresholds.low && thresholds.low < thresholds.high)) {
    throw ConfigError("tier thresholds must satisfy 0 < low < high");
  }
  if (class_count < 0) throw DataError("class count cannot be negative");
  if (class_count < thresholds.low) return TierName::heavy;
  if (class_count < thresholds.high) return TierName::medium;
  return TierName::light;
}

const PlanEntry& AugmentationPlan::at(const std::string& class_name) const {
  auto it = per_class.find(class_name);
  if (it == per_class.end()) throw DataError("class '" + class_name + "' is not in the augmentation plan");
  return it->second;
}

AugmentationPlan build_plan(const ClassStats& stats, const ClassCatalog& catalog, std::int64_t target_count,
                            std::int64_t cap_multiplier, TierThresholds thresholds) {
  if (target_count <= 0) throw ConfigError("target_count must be positive");
  if (cap_multiplier < 0) throw ConfigError("cap_multiplier must be non-negative");
  AugmentationPlan plan;
  plan.target_count = target_count;
  plan.cap_multiplier = cap_multiplier;
  for (const auto& [name, count] : stats.counts) {
    if (!catalog.contains(name)) throw DataError("stats mention unknown class '" + name + "'");
    PlanEntry entry;
    entry.original_count = count;
    entry.tier = assign_tier(count, thresholds);
    if (catalog.is_normal(name)) {
      entry.copies_per_image = 0;
    } else if (count == 0) {
      entry.warning = "no original images; nothing to augment";
    } else {
      const std::int64_t needed = (target_count + count - 1) / count - 1;
      entry.copies_per_image = std::min(cap_multiplier, needed);
    }
    plan.per_class[name] = entry;
  }
  return plan;
}

nlohmann::json plan_to_json(const AugmentationPlan& plan) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [name, e] : plan.per_class) {
    classes[name] = {{"tier", to_string(e.tier)},
                     {"original_count", e.original_count},
                     {"copies_per_image", e.copies_per_image},
                     {"planned_total", e.planned_total()}};
    if (!e.warning.empty()) classes[name]["warning"] = e.warning;
  }
  return {{"target_count", plan.target_count}, {"cap_multiplier", plan.cap_multiplier}, {"classes", classes}};
}

std::string describe_plan(const AugmentationPlan& plan, const ClassCatalog& catalog) {
  std::ostringstream os;
  os << "augmentation plan (target " << plan.target_count << ", cap " << plan.cap_multiplier << ")\n";
  for (const auto& name : catalog.classes()) {
    auto it = plan.per_class.find(name);
    if (it == plan.per_class.end()) continue;
    const auto& e = it->second;
    os << "  " << name << ": " << e.original_count << " originals, tier " << to_string(e.tier) << ", "
       << e.copies_per_image << " copies/image -> " << e.planned_total();
    if (!e.warning.empty()) os << "  [warning: " << e.warning << "]";
    os << '\n';
  }
  return os.str();
}

void check_image(const cv::Mat& image) {
  if (image.empty()) throw DataError("image is empty");
  if (image.type() != CV_8UC3) throw DataError("image must be 8-bit with 3 channels");
}

cv::Mat flip_horizontal(const cv::Mat& image) {
  check_image(image);
  cv::Mat out;
  cv::flip(image, out, 1);
  return out;
}

cv::Mat flip_vertical(const cv::Mat& image) {
  check_image(image);
  cv::Mat out;
  cv::flip(image, out, 0);
  return out;
}

cv::Mat rotate_quarter_turns(const cv::Mat& image, int quarter_turns) {
  check_image(image);
  cv::Mat out;
  switch (((quarter_turns % 4) + 4) % 4) {
    case 0:
      out = image.clone();
      break;
    case 1:
      cv::rotate(image, out, cv::ROTATE_90_COUNTERCLOCKWISE);
      break;
    case 2:
      cv::rotate(image, out, cv::ROTATE_180);
      break;
    default:
      cv::rotate(image, out, cv::ROTATE_90_CLOCKWISE);
      break;
  }
  return out;
}

namespace {

cv::Mat color_jitter(const cv::Mat& image, const JitterParams& p, Rng& rng) {
  const double fb = rng.uniform(1.0 - p.brightness, 1.0 + p.brightness);
  const double fc = rng.uniform(1.0 - p.contrast, 1.0 + p.contrast);
  const double fs = rng.uniform(1.0 - p.saturation, 1.0 + p.saturation);
  const double hue = rng.uniform(-p.hue, p.hue);

  cv::Mat work;
  image.convertTo(work, CV_32FC3, fb);

  cv::Mat gray;
  cv::cvtColor(work, gray, cv::COLOR_BGR2GRAY);
  const double mean = cv::mean(gray)[0];
  work = (work - cv::Scalar::all(mean)) * fc + cv::Scalar::all(mean);

  cv::cvtColor(work, gray, cv::COLOR_BGR2GRAY);
  cv::Mat gray3;
  cv::cvtColor(gray, gray3, cv::COLOR_GRAY2BGR);
  work = (work - gray3) * fs + gray3;

  cv::Mat out;
  work.convertTo(out, CV_8UC3);

  // 8-bit HSV hue spans [0, 180).
  const int shift = static_cast<int>(std::lround(hue * 180.0));
  if (shift != 0) {
    cv::Mat hsv;
    cv::cvtColor(out, hsv, cv::COLOR_BGR2HSV);
    for (int y = 0; y < hsv.rows; ++y) {
      auto* row = hsv.ptr<cv::Vec3b>(y);
      for (int x = 0; x < hsv.cols; ++x) {
        row[x][0] = static_cast<unsigned char>(((row[x][0] + shift) % 180 + 180) % 180);
      }
    }
    cv::cvtColor(hsv, out, cv::COLOR_HSV2BGR);
  }
  return out;
}

cv::Mat shift_scale_rotate(const cv::Mat& image, const AffineParams& p, Rng& rng) {
  const double angle = rng.uniform(p.rotate.lo, p.rotate.hi);
  const double scale = 1.0 + rng.uniform(p.scale.lo, p.scale.hi);
  const double dx = rng.uniform(p.shift.lo, p.shift.hi) * image.cols;
  const double dy = rng.uniform(p.shift.lo, p.shift.hi) * image.rows;
  const cv::Point2f center((image.cols - 1) * 0.5f, (image.rows - 1) * 0.5f);
  cv::Mat m = cv::getRotationMatrix2D(center, angle, scale);
  m.at<double>(0, 2) += dx;
  m.at<double>(1, 2) += dy;
  cv::Mat out;
  cv::warpAffine(image, out, m, image.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  return out;
}

cv::Mat gaussian_blur(const cv::Mat& image, const BlurParams& p, Rng& rng) {
  const int steps = (p.max_kernel - p.min_kernel) / 2;
  const int k = p.min_kernel + 2 * static_cast<int>(rng.uniform_int(0, steps));
  cv::Mat out;
  cv::GaussianBlur(image, out, cv::Size(k, k), 0.0, 0.0, cv::BORDER_REFLECT_101);
  return out;
}

}  // namespace

cv::Mat apply_transform(const cv::Mat& image, const TransformSpec& spec, Rng& rng) {
  check_image(image);
  if (!rng.bernoulli(spec.probability)) return image.clone();
  switch (spec.kind) {
    case TransformKind::horizontal_flip:
      return flip_horizontal(image);
    case TransformKind::vertical_flip:
      return flip_vertical(image);
    case TransformKind::rotate90: {
      // Odd turns would swap the sides of a non-square canvas.
      const bool square = image.rows == image.cols;
      const int turns = square ? static_cast<int>(rng.uniform_int(0, 3)) : 2 * static_cast<int>(rng.uniform_int(0, 1));
      return rotate_quarter_turns(image, turns);
    }
    case TransformKind::color_jitter:
      return color_jitter(image, spec.jitter, rng);
    case TransformKind::shift_scale_rotate:
      return shift_scale_rotate(image, spec.affine, rng);
    case TransformKind::gaussian_blur:
      return gaussian_blur(image, spec.blur, rng);
  }
  return image.clone();
}

cv::Mat apply_tier(const cv::Mat& image, const AugmentationTier& tier, Rng& rng) {
  cv::Mat current = image;
  for (const auto& t : tier.transforms) current = apply_transform(current, t, rng);
  return current.data == image.data ? image.clone() : current;
}

std::uint64_t copy_seed(std::uint64_t seed, const fs::path& source_path, std::int64_t copy_index) {
  return SeedHasher(seed).add(source_path.generic_string()).add(static_cast<std::uint64_t>(copy_index)).digest();
}

DatasetManifest execute_plan(const DatasetManifest& manifest, const AugmentationPlan& plan, const TierSet& tiers,
                             std::uint64_t seed, const fs::path& out_dir, ExecuteOptions options) {
  for (const auto& [name, entry] : plan.per_class) {
    if (!manifest.catalog.contains(name)) throw DataError("plan class '" + name + "' is not in the manifest catalog");
    if (entry.copies_per_image > 0 && !tiers.contains(entry.tier)) {
      throw ConfigError("no definition for augmentation tier '" + std::string(to_string(entry.tier)) + "'");
    }
  }

  struct Job {
    const SampleRecord* source;
    std::int64_t copy;
    fs::path target;
  };
  std::vector<Job> jobs;
  std::set<std::string> targets;
  for (const auto& r : manifest.records) {
    if (r.split != Split::train || r.origin != Origin::original) continue;
    auto it = plan.per_class.find(r.class_name);
    if (it == plan.per_class.end() || it->second.copies_per_image == 0) continue;
    for (std::int64_t k = 1; k <= it->second.copies_per_image; ++k) {
      fs::path target = out_dir / r.class_name / (r.image_path.stem().string() + "_aug" + std::to_string(k) + ".png");
      if (!targets.insert(target.generic_string()).second) {
        throw DataError("two source images of class '" + r.class_name + "' share the stem '" +
                        r.image_path.stem().string() + "'");
      }
      jobs.push_back({&r, k, std::move(target)});
    }
  }

  DatasetManifest result = manifest;
  if (jobs.empty()) return result;

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw DataError("cannot create output directory " + out_dir.string());
  for (const auto& [name, entry] : plan.per_class) {
    if (entry.copies_per_image > 0) fs::create_directories(out_dir / name, ec);
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const Job& job = jobs[i];
        cv::Mat image = cv::imread(job.source->image_path.string(), cv::IMREAD_COLOR);
        if (image.empty()) throw DataError("cannot read image " + job.source->image_path.string());
        Rng rng(copy_seed(seed, job.source->image_path, job.copy));
        const auto& tier = tiers.at(plan.per_class.at(job.source->class_name).tier);
        cv::Mat augmented = apply_tier(image, tier, rng);
        if (!cv::imwrite(job.target.string(), augmented)) throw DataError("cannot write " + job.target.string());
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(jobs.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& job : jobs) {
    result.records.push_back(
        {job.target, job.source->class_name, Split::train, Origin::augmented, job.source->image_path});
  }
  result.validate();
  return result;
}

}  // namespace capsule
