#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "metadcseg/segnet.hpp"

namespace metadcseg {

enum class Precision { kF64, kF32 };

/// Flat training configuration. JSON keys are the field names.
struct TrainConfig {
  // schedule
  int epochs = 100;
  int warmup_epochs = 10;
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 0.2;
  double meta_lr_scale = 0.01;  // eta = meta_lr_scale * current lr
  int batch_size = 2;
  int meta_batch_size = 2;

  // objective
  double lambda1 = 0.30;
  double lambda2 = 0.10;
  double tau = 0.7;
  double tau_dcd = 0.6;
  double dcd_max = 100.0;
  double dcd_eps = 1e-8;
  double edge_percentile = 0.10;
  int tau_min = 10;

  // toggles
  bool meta = true;
  bool dcd = true;
  bool dice = true;
  bool augment = true;
  bool ema = false;
  double ema_decay = 0.99;

  Precision precision = Precision::kF64;
  std::uint64_t seed = 0;
  bool log_wall_time = false;

  // data: either a directory written by gen-data/corrupt or a synthetic spec
  std::string data_dir;
  int n = 100;
  int h = 32;
  int w = 32;
  std::uint64_t data_seed = 0;
  int noise_level = 40;
  double metaval_frac = 0.02;
  double test_frac = 0.2;

  NetConfig net;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  /// lr0 * 20 / (epoch + 20)
  double lr_at(int epoch) const { return lr * 20.0 / (epoch + 20.0); }
};

/// Unknown keys are rejected. Net fields use the keys in_channels, classes,
/// base_width, depth, feature_dim.
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig load_config(const std::filesystem::path& path);

}  // namespace metadcseg
