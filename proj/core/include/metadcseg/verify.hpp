#pragma once

// Invariant and stability checks run by the `verify` command. Each building
// block is also callable on its own so tests can run it at full size.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadcseg/datakit.hpp"
#include "metadcseg/noisegen.hpp"

namespace metadcseg::check {

enum class Status { kPass, kFail, kSkip };
const char* to_string(Status s);

struct CheckResult {
  std::string name;
  Status status = Status::kPass;
  nlohmann::json measured;
};

struct Report {
  std::vector<CheckResult> checks;
  bool passed() const;  // no check failed
  nlohmann::json to_json() const;
};

// --- gradients ---------------------------------------------------------------

/// Names accepted by primitive_grad_error.
const std::vector<std::string>& primitive_names();

/// Reverse-mode vs central differences for one random instance of a diffcore
/// op, contracted with random weights. Returns the relative error.
double primitive_grad_error(const std::string& op, std::uint64_t seed);

enum class LossKind { kPixel, kDice, kTotal };

struct GradCase {
  double rel_error = 0.0;
  int params = 0;
};

/// Random small network and input; gradient of the chosen loss w.r.t. all
/// network parameters, checked against central differences.
GradCase network_grad_case(LossKind kind, std::uint64_t seed);

// --- meta-gradients ----------------------------------------------------------

struct MetaOracleCase {
  double rel_error = 0.0;
  int params = 0;
};

/// 100-parameter pixel classifier on 8x8 images, two batch images and two
/// validation images. Compares meta_grads with a central difference of
/// L_val(theta_hat) in every alpha and beta entry.
MetaOracleCase meta_grad_oracle_case(std::uint64_t seed);

// --- weights, DCD --------------------------------------------------------------

struct NormalizationStats {
  int updates = 0;
  int resets = 0;
  double min_rectified = 0.0;
  double max_norm_dev = 0.0;
};

/// Random update sequences through update_rectify_normalize.
NormalizationStats normalization_sweep(int updates, std::uint64_t seed);

struct DcdBoundStats {
  int fields = 0;
  int bd_pixels = 0;
  int pre_clip_violations = 0;   // raw > 4 R^2 / eps
  int post_clip_violations = 0;  // clipped > dcd_max
  int center_violations = 0;     // |c_k| > R
  double max_raw_over_bound = 0.0;
  double max_center_over_r = 0.0;
};

/// Random feature fields, probabilities and gamma maps with a fresh center
/// tracker per field.
DcdBoundStats dcd_bound_sweep(int fields, std::uint64_t seed);

// --- morphology ----------------------------------------------------------------

/// Direct window scan with zero padding, same window placement as morph().
LabelMask morph_bruteforce(const LabelMask& mask, MorphOp op, int k);

struct MorphOracleStats {
  long masks = 0;
  long mismatches = 0;
};

/// Every h x w binary mask (2^(h w) of them) under erosion and dilation.
MorphOracleStats morphology_exhaustive(int h, int w, int k);

// --- descent toy ----------------------------------------------------------------

struct DescentToy {
  int params = 0;
  int train_points = 0;
  int val_points = 0;
  double eta = 0.0;
  double sigma = 0.0;
  double lipschitz = 0.0;
  double bound = 0.0;
  double lambda = 0.0;
  bool condition_met = false;
  std::vector<double> val_losses;  // steps + 1 entries
  double max_increase = 0.0;
};

/// Linear least-squares toy with clean validation targets. lambda is
/// lambda_factor times the measured bound sqrt(2 / (eta sigma^2 M L)).
DescentToy descent_toy(double lambda_factor, int steps, std::uint64_t seed);

// --- suite -------------------------------------------------------------------------

struct Options {
  std::uint64_t seed = 0;
  int grad_cases = 10;      // per loss kind
  int primitive_cases = 3;  // per op
  int meta_cases = 5;
  int normalization_updates = 2000;
  int dcd_fields = 1000;
  bool exhaustive_morphology = true;
  double descent_lambda_factor = 0.5;
};

Report run_all(const Options& opt = {});

}  // namespace metadcseg::check
