#include "capsule/config.hpp"

#include <fstream>

#include "capsule/error.hpp"

namespace capsule {

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::curriculum:
      return "curriculum";
    case TrainMode::direct:
      return "direct";
    case TrainMode::both:
      return "both";
  }
  return "unknown";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "curriculum") return TrainMode::curriculum;
  if (text == "direct") return TrainMode::direct;
  if (text == "both") return TrainMode::both;
  throw ConfigError("unknown training mode '" + std::string(text) + "' (expected curriculum, direct or both)");
}

namespace {

fs::path resolve(const fs::path& base, const std::string& text) {
  fs::path p(text);
  return (p.is_absolute() ? p : base / p).lexically_normal();
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json model_json = spec_to_json(model);
  model_json.erase("num_classes");  // set per stage
  nlohmann::json train_json = train_config_to_json(train);
  train_json["mode"] = to_string(mode);
  return {{"seed", seed},
          {"dataset", dataset.generic_string()},
          {"output_dir", output_dir.generic_string()},
          {"catalog", catalog_to_json(catalog)},
          {"augmentation",
           {{"thresholds", {thresholds.low, thresholds.high}},
            {"target_count", target_count},
            {"cap_multiplier", cap_multiplier},
            {"threads", augment_threads},
            {"tiers", tiers_to_json(tiers)}}},
          {"curriculum",
           {{"remainder_mode", to_string(remainder_mode)},
            {"ordering_source", ordering_source == OrderingSource::original ? "original" : "augmented"}}},
          {"model", model_json},
          {"train", train_json},
          {"explain", {{"alpha", explain_alpha}, {"layer", explain_layer}}}};
}

RunConfig parse_run_config(const nlohmann::json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    if (!doc.contains("seed")) throw ConfigError("run config needs a 'seed'");
    c.seed = doc.at("seed").get<std::uint64_t>();
    if (!doc.contains("dataset")) throw ConfigError("run config needs a 'dataset' path");
    c.dataset = resolve(base_dir, doc.at("dataset").get<std::string>());
    c.output_dir = resolve(base_dir, doc.value("output_dir", std::string("runs")));

    if (doc.contains("catalog")) {
      const auto& cat = doc.at("catalog");
      c.catalog = cat.is_string() ? load_catalog(resolve(base_dir, cat.get<std::string>())) : catalog_from_json(cat);
    }

    if (doc.contains("augmentation")) {
      const auto& a = doc.at("augmentation");
      if (a.contains("thresholds")) {
        auto t = a.at("thresholds").get<std::vector<std::int64_t>>();
        if (t.size() != 2) throw ConfigError("augmentation.thresholds must be [low, high]");
        c.thresholds = {t[0], t[1]};
      }
      c.target_count = a.value("target_count", c.target_count);
      c.cap_multiplier = a.value("cap_multiplier", c.cap_multiplier);
      c.augment_threads = a.value("threads", c.augment_threads);
      if (a.contains("tiers")) c.tiers = tiers_from_json(a.at("tiers"));
    }
    if (!(0 < c.thresholds.low && c.thresholds.low < c.thresholds.high)) {
      throw ConfigError("augmentation thresholds must satisfy 0 < low < high");
    }
    if (c.target_count <= 0) throw ConfigError("augmentation.target_count must be positive");
    if (c.cap_multiplier < 0) throw ConfigError("augmentation.cap_multiplier must be non-negative");
    validate_tiers(c.tiers);

    if (doc.contains("curriculum")) {
      const auto& cur = doc.at("curriculum");
      c.remainder_mode = parse_remainder_mode(cur.value("remainder_mode", std::string("aggregate")));
      const auto source = cur.value("ordering_source", std::string("original"));
      if (source == "original") c.ordering_source = OrderingSource::original;
      else if (source == "augmented") c.ordering_source = OrderingSource::augmented;
      else throw ConfigError("curriculum.ordering_source must be original or augmented");
    }

    nlohmann::json model_json = doc.value("model", nlohmann::json::object());
    model_json["num_classes"] = 2;
    if (model_json.contains("weights_path") && !model_json.at("weights_path").get<std::string>().empty()) {
      model_json["weights_path"] = resolve(base_dir, model_json.at("weights_path").get<std::string>()).string();
    }
    c.model = spec_from_json(model_json);

    nlohmann::json train_json = doc.value("train", nlohmann::json::object());
    if (!train_json.contains("seed")) train_json["seed"] = c.seed;
    c.mode = parse_train_mode(train_json.value("mode", std::string("curriculum")));
    c.train = train_config_from_json(train_json);
    c.train.curriculum = c.mode != TrainMode::direct;
    if (const char* device = std::getenv("CAPSULE_DEVICE"); device && *device) c.train.device = device;

    if (doc.contains("explain")) {
      c.explain_alpha = doc.at("explain").value("alpha", c.explain_alpha);
      c.explain_layer = doc.at("explain").value("layer", c.explain_layer);
    }
    if (!(c.explain_alpha >= 0.0 && c.explain_alpha <= 1.0)) throw ConfigError("explain.alpha must lie in [0, 1]");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  if (!fs::exists(c.dataset)) throw DataError("dataset path does not exist: " + c.dataset.string());
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = parse_run_config(doc, fs::absolute(path).parent_path());
  c.config_path = fs::absolute(path);
  return c;
}

void write_config_snapshot(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config_snapshot.json");
  if (!out) throw DataError("cannot write config snapshot into " + dir.string());
  out << config.to_json().dump(2) << '\n';
}

}  // namespace capsule
