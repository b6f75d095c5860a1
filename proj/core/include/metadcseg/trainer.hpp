#pragma once

#include <functional>
#include <iosfwd>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metadcseg/config.hpp"
#include "metadcseg/datakit.hpp"
#include "metadcseg/metaweight.hpp"
#include "metadcseg/metrics.hpp"
#include "metadcseg/segnet.hpp"

namespace metadcseg {

/// Synthetic corpus from cfg (n, h, w, data_seed), split and corrupted at
/// cfg.noise_level; or the dataset stored in cfg.data_dir.
Dataset prepare_dataset(const TrainConfig& cfg);

/// A non-finite value ended training. The diagnostic record has already been
/// written to the log.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Checkpoint checkpoint;       // final parameters (EMA average when cfg.ema)
  WeightMaps weights;          // over the train split, in Dataset::indices(kTrain) order
  std::vector<nlohmann::json> log;
  long steps = 0;
  double wall_seconds = 0.0;
  std::size_t peak_tape_bytes = 0;
};

struct TrainHooks {
  std::ostream* log = nullptr;                            // JSONL, one record per step
  std::function<void(const nlohmann::json&)> on_record;   // called after each record
  bool keep_log = true;                                   // retain records in TrainResult
};

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const TrainHooks& hooks = {});

/// Argmax prediction on every test-tagged item against its clean mask.
/// Throws if the dataset has no test items.
EvalSummary evaluate(const Checkpoint& ckpt, const Dataset& ds, SplitTag tag = SplitTag::kTest);

/// Writes model.mdcp, weights.mdwm, train_log.jsonl (via hooks), config.json
/// and timing.json under out_dir.
TrainResult train_to_dir(const TrainConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir);

}  // namespace metadcseg
