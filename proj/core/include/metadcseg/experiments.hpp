#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "metadcseg/config.hpp"
#include "metadcseg/datakit.hpp"
#include "metadcseg/metrics.hpp"

namespace metadcseg {

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
};

MeanSd mean_sd(const std::vector<double>& v);

struct AblationRow {
  std::string name;
  bool meta = true, dcd = true, dice = true;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalSummary> runs;  // parallel to seeds
  MeanSd miou, dsc, hd;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // all-on, -meta, -dcd, -dice
  std::optional<AblationRow> baseline;  // meta, dcd and dice all off
};

struct AblationOptions {
  int seeds = 3;             // cfg.seed, cfg.seed + 1, ...
  bool with_baseline = true;
};

/// Trains every toggle row on `ds` for each seed and evaluates on its test
/// split.
AblationTable ablate(const TrainConfig& cfg, const Dataset& ds, const AblationOptions& opt = {});

nlohmann::json to_json(const AblationTable& t);

struct MetaSizeRow {
  double frac = 0.0;
  int metaval_items = 0;
  int train_items = 0;
  EvalSummary eval;
  double wall_seconds = 0.0;
  std::size_t peak_bytes = 0;
  std::optional<double> ce;  // empty at the reference row or when undefined
};

/// For each fraction: re-split `pool` (its split tags are ignored), regenerate
/// the noisy train masks from cfg.noise_level and cfg.data_seed, train and
/// evaluate. Rows come back sorted by frac; the smallest is the CE reference.
std::vector<MetaSizeRow> meta_size_study(const TrainConfig& cfg, const Dataset& pool,
                                         std::vector<double> fracs = {0.01, 0.02, 0.05, 0.10});

nlohmann::json to_json(const std::vector<MetaSizeRow>& rows);

}  // namespace metadcseg
