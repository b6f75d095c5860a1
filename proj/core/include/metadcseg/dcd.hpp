#pragma once

// Boundary refinement: confidence/edge region decomposition, gamma-weighted
// feature centers, the clipped center-distance score and its softmax weights.

#include <array>
#include <span>
#include <vector>

#include "metadcseg/datakit.hpp"
#include "metadcseg/diffcore.hpp"

namespace metadcseg {

/// Flat pixel indices (y * W + x) of the top `percentile` fraction of Sobel
/// magnitudes (replicate border) of channel 0. At most ceil(percentile * H * W)
/// pixels; zero-magnitude pixels are never selected; ties go to the lower
/// index. Result is sorted ascending.
std::vector<int> detect_edges(const ImagePlane& x, double percentile);

/// Sobel magnitude of channel 0, exposed for testing.
std::vector<double> sobel_magnitude(const ImagePlane& x);

enum Region { kFg = 0, kBg = 1, kBd = 2 };

struct RegionDecomposition {
  std::vector<int> fg, bg, bd, edge;  // sorted flat indices
};

/// fg = {p > tau} minus edges, bg = {p < 1 - tau} minus edges, bd = the rest.
RegionDecomposition decompose_regions(std::span<const double> prob_fg, double tau,
                                      std::span<const int> edges);

struct Centers {
  std::array<std::vector<double>, 3> c;  // indexed by Region
  std::array<bool, 3> used_fallback{};
  int fallbacks() const { return used_fallback[0] + used_fallback[1] + used_fallback[2]; }
};

/// Running mean of the non-fallback centers seen so far, per region. Zero
/// vectors until the first observation.
class CenterTracker {
 public:
  explicit CenterTracker(int dim = 0);
  void observe(const Centers& centers);
  std::vector<double> default_center(int region) const;
  int dim() const { return dim_; }
  long count(int region) const { return count_[static_cast<std::size_t>(region)]; }

 private:
  int dim_;
  std::array<std::vector<double>, 3> mean_;
  std::array<long, 3> count_{};
};

struct CenterOptions {
  int tau_min = 10;
};

/// gamma-weighted mean of the features of each region. A region with fewer
/// than tau_min pixels or zero total gamma takes tracker.default_center().
Centers weighted_centers(std::span<const double> features, int dim, std::span<const double> gamma,
                         const RegionDecomposition& regions, const CenterTracker& tracker,
                         const CenterOptions& opt = {});

struct DcdValues {
  std::vector<double> raw;      // per bd pixel, in regions.bd order
  std::vector<double> clipped;  // min(raw, dcd_max)
};

struct DcdOptions {
  double eps = 1e-8;
  double dcd_max = 100.0;
};

DcdValues dcd_map(std::span<const double> features, int dim, const Centers& centers,
                  std::span<const int> bd, const DcdOptions& opt = {});

/// Max-subtracted softmax of dcd / tau_dcd. Empty input gives empty output.
std::vector<double> boundary_weights(std::span<const double> dcd, double tau_dcd);

/// Largest Euclidean norm among the per-pixel feature vectors.
double max_feature_norm(std::span<const double> features, int dim);

/// Boundary weights as a differentiable function of the feature map {H,W,D}
/// (centers included, fallback centers constant, clipped scores give zero
/// gradient). Output {|bd|}. Used to verify the end-to-end weight gradient.
template <typename Real>
diff::Var boundary_weights_op(diff::Tape<Real>& tape, diff::Var features,
                              std::span<const double> gamma, const RegionDecomposition& regions,
                              const CenterTracker& tracker, double tau_dcd,
                              const CenterOptions& copt = {}, const DcdOptions& dopt = {});

}  // namespace metadcseg
