#pragma once

// Miniature U-Net: `depth` down-sampling levels with additive skips. Level 0
// runs at width base_width, deeper levels at 2 * base_width. The decoder ends
// in a conv producing feature_dim channels (the DCD feature map) followed by a
// per-pixel affine head to class logits.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "metadcseg/datakit.hpp"
#include "metadcseg/diffcore.hpp"

namespace metadcseg {

struct NetConfig {
  int in_channels = 1;
  int classes = 2;
  int base_width = 8;
  int depth = 2;
  int feature_dim = 16;

  /// Throws std::invalid_argument on bad fields; if h/w are positive, also
  /// checks they are divisible by 2^depth.
  void validate(int h = 0, int w = 0) const;
  bool operator==(const NetConfig&) const = default;
};

/// Deterministic segment table for `cfg`.
diff::ParamVector param_layout(const NetConfig& cfg);

/// He-uniform weights (bound sqrt(6 / fan_in)) from Rng stream init; zero biases.
diff::ParamVector init_params(const NetConfig& cfg, std::uint64_t seed);

template <typename Real>
struct NetVars {
  diff::Var logits;    // {H, W, L}
  diff::Var features;  // {H, W, D}
  diff::Var probs;     // {H, W, L}
};

/// Records the network on `tape`. `theta` is a flat variable laid out as
/// `layout`.
template <typename Real>
NetVars<Real> forward(diff::Tape<Real>& tape, diff::Var theta, const diff::ParamVector& layout,
                      const NetConfig& cfg, const ImagePlane& x);

struct ForwardOutput {
  int height = 0;
  int width = 0;
  std::vector<double> logits;    // H*W*L
  std::vector<double> features;  // H*W*D
  std::vector<double> probs;     // H*W*L
};

/// Value-only forward in 64-bit.
ForwardOutput forward(const NetConfig& cfg, const diff::ParamVector& theta, const ImagePlane& x);

/// Per-pixel argmax over the innermost axis; ties go to the lowest class.
LabelMask pseudo_labels(std::span<const double> probs, int height, int width, int classes);

struct Checkpoint {
  NetConfig cfg;
  diff::ParamVector params;
};

/// "MDCP", u32 version (1), u32 in_channels/classes/base_width/depth/feature_dim,
/// then the parameters as f32 LE in layout order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace metadcseg
