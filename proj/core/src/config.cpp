#include "metadcseg/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace metadcseg {

namespace {

// Visits every (key, field) pair. Precision is handled separately.
template <typename Cfg, typename F>
void for_each_field(Cfg& c, F&& f) {
  f("epochs", c.epochs);
  f("warmup_epochs", c.warmup_epochs);
  f("lr", c.lr);
  f("momentum", c.momentum);
  f("weight_decay", c.weight_decay);
  f("grad_clip", c.grad_clip);
  f("meta_lr_scale", c.meta_lr_scale);
  f("batch_size", c.batch_size);
  f("meta_batch_size", c.meta_batch_size);
  f("lambda1", c.lambda1);
  f("lambda2", c.lambda2);
  f("tau", c.tau);
  f("tau_dcd", c.tau_dcd);
  f("dcd_max", c.dcd_max);
  f("dcd_eps", c.dcd_eps);
  f("edge_percentile", c.edge_percentile);
  f("tau_min", c.tau_min);
  f("meta", c.meta);
  f("dcd", c.dcd);
  f("dice", c.dice);
  f("augment", c.augment);
  f("ema", c.ema);
  f("ema_decay", c.ema_decay);
  f("seed", c.seed);
  f("log_wall_time", c.log_wall_time);
  f("data_dir", c.data_dir);
  f("n", c.n);
  f("h", c.h);
  f("w", c.w);
  f("data_seed", c.data_seed);
  f("noise_level", c.noise_level);
  f("metaval_frac", c.metaval_frac);
  f("test_frac", c.test_frac);
  f("in_channels", c.net.in_channels);
  f("classes", c.net.classes);
  f("base_width", c.net.base_width);
  f("depth", c.net.depth);
  f("feature_dim", c.net.feature_dim);
}

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw std::invalid_argument("config field '" + field + "' " + rule);
}

}  // namespace

void TrainConfig::validate() const {
  require(epochs > 0, "epochs", "must be positive");
  require(warmup_epochs >= 0 && warmup_epochs < epochs, "warmup_epochs", "must lie in [0, epochs)");
  require(lr > 0, "lr", "must be positive");
  require(momentum >= 0 && momentum < 1, "momentum", "must lie in [0, 1)");
  require(weight_decay >= 0, "weight_decay", "must be non-negative");
  require(grad_clip > 0, "grad_clip", "must be positive");
  require(meta_lr_scale > 0, "meta_lr_scale", "must be positive");
  require(batch_size > 0, "batch_size", "must be positive");
  require(meta_batch_size > 0, "meta_batch_size", "must be positive");
  require(lambda1 >= 0, "lambda1", "must be non-negative");
  require(lambda2 >= 0, "lambda2", "must be non-negative");
  require(tau > 0.5 && tau < 1, "tau", "must lie in (0.5, 1)");
  require(tau_dcd > 0, "tau_dcd", "must be positive");
  require(dcd_max > 0, "dcd_max", "must be positive");
  require(dcd_eps > 0, "dcd_eps", "must be positive");
  require(edge_percentile > 0 && edge_percentile < 1, "edge_percentile", "must lie in (0, 1)");
  require(tau_min >= 1, "tau_min", "must be >= 1");
  require(ema_decay > 0 && ema_decay < 1, "ema_decay", "must lie in (0, 1)");
  require(n >= 10, "n", "must be >= 10");
  require(noise_level == 20 || noise_level == 40 || noise_level == 60, "noise_level", "must be 20, 40 or 60");
  net.validate(h, w);
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  TrainConfig c;
  std::set<std::string> known{"precision"};
  for_each_field(c, [&](const char* key, auto& field) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("config field '") + key + "': " + e.what());
    }
  });
  if (j.contains("precision")) {
    const auto p = j.at("precision").get<std::string>();
    if (p == "f64") {
      c.precision = Precision::kF64;
    } else if (p == "f32") {
      c.precision = Precision::kF32;
    } else {
      throw std::invalid_argument("config field 'precision' must be \"f64\" or \"f32\"");
    }
  }
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown config field '" + key + "'");
  }
  c.validate();
  return c;
}

nlohmann::json config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  for_each_field(cfg, [&](const char* key, const auto& field) { j[key] = field; });
  j["precision"] = cfg.precision == Precision::kF64 ? "f64" : "f32";
  return j;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  TrainConfig c = config_from_json(j);
  // A relative data_dir is resolved against the config file's directory.
  if (!c.data_dir.empty() && std::filesystem::path(c.data_dir).is_relative()) {
    c.data_dir = (path.parent_path() / c.data_dir).string();
  }
  return c;
}

}  // namespace metadcseg
