#pragma once

// Label corruption: rotation, erosion/dilation with tabulated kernel sizes,
// and ellipse replacement, plus the Dice-based corruption rate.

#include <span>
#include <vector>

#include "metadcseg/datakit.hpp"

namespace metadcseg {

enum class MorphOp { kErode, kDilate };

struct NoiseConfig {
  int level = 40;
  std::vector<int> kernel_sizes;
  std::vector<double> p_ero;  // cumulative, ends at 1.0
  std::vector<double> p_dil;
  double p_morph = 0.5;
  double p_ellipse = 0.5;
  double max_rotation_deg = 20.0;
  int area_gate = 300;
  /// Extra morphological rounds for the 60% level; 0 otherwise.
  int extra_rounds = 0;
  double target_rate = 0.4;

  /// Tables for 20 and 40; 60 reuses the 40 table with 5 extra rounds.
  static NoiseConfig for_level(int level);
  void validate() const;
};

/// Nearest-neighbour rotation about ((W-1)/2, (H-1)/2). A pixel (x, y) of the
/// output samples the input at the inverse-rotated position; positions that
/// fall outside are background.
LabelMask rotate_mask(const LabelMask& mask, double theta_deg);

/// Flat k x k structuring element anchored at offset -(k/2) in each axis.
/// Erosion keeps a pixel iff the whole window lies inside the image and is
/// foreground; dilation uses the reflected window and sets a pixel iff any
/// foreground pixel lies under it. Throws if k exceeds either image side.
LabelMask morph(const LabelMask& mask, MorphOp op, int k);

/// Smallest j with u < p[j].
int sample_kernel(const NoiseConfig& cfg, MorphOp op, double u);

/// Filled ellipse inscribed in the foreground bounding box. A zero semi-axis
/// collapses that axis to the centre line. Throws on an empty mask.
LabelMask ellipse_replace(const LabelMask& mask);

/// 1 - 2|a & b| / (|a| + |b|); 0 when both are empty.
double corruption_rate(const LabelMask& a, const LabelMask& b);

/// One mask through the pipeline. Draws, in order: theta, morph gate, op
/// choice, kernel u, ellipse gate (always five, even when a gate fails), then
/// for each extra round while the rate is below target: gate, op, kernel u.
LabelMask corrupt_mask(const LabelMask& mask, const NoiseConfig& cfg, Rng& rng);

struct CorruptionReport {
  std::vector<double> rates;
  double mean_rate = 0.0;
  double target = 0.0;
  double tolerance = 0.0;
  bool within_tolerance = false;
};

struct CorruptedCorpus {
  std::vector<LabelMask> masks;
  CorruptionReport report;
};

/// Per-mask stream: Rng::stream(seed, noise).derive(id).
Rng mask_stream(std::uint64_t seed, int id);

/// Corrupts every mask with its own stream (keyed by ids[k], or by position
/// when ids is empty) and reports the mean rate against cfg.target_rate. The
/// 60% level passes when the mean is at least target - tol.
CorruptedCorpus calibrate(std::span<const LabelMask> corpus, const NoiseConfig& cfg,
                          std::uint64_t seed, double tol = 0.05, std::span<const int> ids = {});

/// Fills item.noisy for every train-tagged item (all items if untagged),
/// keyed by item id so a mask's corruption does not depend on the split.
CorruptionReport corrupt_dataset(Dataset& ds, int level, std::uint64_t seed);

}  // namespace metadcseg
