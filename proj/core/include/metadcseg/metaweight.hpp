#pragma once

// Per-pixel bootstrapping weights and the one-step online approximation of the
// bi-level weight problem.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "metadcseg/datakit.hpp"
#include "metadcseg/diffcore.hpp"

namespace metadcseg {

/// Per-image (alpha, beta) planes for a whole training set, with the derived
/// rectified and normalized planes. All planes are n_images * H * W, image
/// major.
struct WeightMaps {
  int n_images = 0;
  int height = 0;
  int width = 0;
  std::vector<double> alpha, beta;          // raw
  std::vector<double> alpha_r, beta_r;      // max(., 0)
  std::vector<double> alpha_n, beta_n;      // rectified / Z
  std::vector<double> z;                    // per image
  std::vector<std::uint8_t> was_reset;      // per image, set by the last update touching it

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::span<const double> plane(const std::vector<double>& v, int image) const {
    return {v.data() + static_cast<std::size_t>(image) * pixels(), pixels()};
  }
  std::span<double> plane(std::vector<double>& v, int image) const {
    return {v.data() + static_cast<std::size_t>(image) * pixels(), pixels()};
  }
  bool operator==(const WeightMaps&) const = default;
};

/// alpha = 1, beta = 0 everywhere; normalized planes are 1 / (H W).
WeightMaps init_weight_maps(int n_images, int height, int width);

struct PixelLoss {
  std::vector<double> map;
  double total = 0.0;
};

/// Cross-entropy of a probability map (H*W*L, innermost L) against labels.
std::vector<double> pixel_ce(std::span<const double> probs, int classes, const LabelMask& labels);

/// alpha * CE(p, real) + beta * CE(p, pseudo) per pixel, and its sum.
PixelLoss pixel_loss(std::span<const double> probs, int classes, const LabelMask& real,
                     const LabelMask& pseudo, std::span<const double> alpha,
                     std::span<const double> beta);

/// Graph form: per-pixel map {H, W} built from logits {H, W, L}.
template <typename Real>
diff::Var pixel_loss(diff::Tape<Real>& tape, diff::Var logits, const LabelMask& real,
                     const LabelMask& pseudo, std::span<const double> alpha,
                     std::span<const double> beta);

/// The two per-pixel CE maps of each batch image: f against the observed
/// label, g against the pseudo-label. Both maps have the same element count
/// per image.
struct MetaTerms {
  std::vector<diff::Var> f;
  std::vector<diff::Var> g;
};

template <typename Real>
using TermsFn = std::function<MetaTerms(diff::Tape<Real>&, diff::Var theta)>;

/// Batch weights, one span per batch image, each matching that image's map.
struct BatchWeights {
  std::vector<std::span<const double>> alpha;
  std::vector<std::span<const double>> beta;
};

/// grad_theta sum_i sum_hw (alpha f + beta g) on a tape already holding the
/// terms. Overwrites the tape's gradients.
template <typename Real>
std::vector<double> weighted_grad(diff::Tape<Real>& tape, diff::Var theta, const MetaTerms& terms,
                                  const BatchWeights& w);

/// theta_hat = theta - lambda * weighted gradient. theta is not modified.
template <typename Real>
std::vector<double> inner_step(std::span<const double> theta, const TermsFn<Real>& terms,
                               const BatchWeights& w, double lambda);

struct MetaGrad {
  std::vector<std::vector<double>> d_alpha;  // per batch image
  std::vector<std::vector<double>> d_beta;
};

enum class MetaGradMethod {
  kForwardMode,  // one Jacobian-vector pass along grad L_val(theta_hat)
  kPerPixel,     // one backward pass per pixel term
};

/// Per-pixel -lambda <grad L_val(theta_hat), grad f_hw(theta)> (and g) on a
/// tape holding the terms at theta.
template <typename Real>
MetaGrad meta_grads_on_tape(diff::Tape<Real>& tape, diff::Var theta, const MetaTerms& terms,
                            std::span<const double> val_grad, double lambda,
                            MetaGradMethod method = MetaGradMethod::kForwardMode);

/// Full computation: evaluates grad L_val at theta_hat, then the per-pixel
/// inner products at theta.
template <typename Real>
MetaGrad meta_grads(std::span<const double> theta, std::span<const double> theta_hat,
                    const TermsFn<Real>& terms, const diff::ScalarFn<Real>& val_loss, double lambda,
                    MetaGradMethod method = MetaGradMethod::kForwardMode);

struct RectifiedImage {
  std::vector<double> alpha_r, beta_r, alpha_n, beta_n;
  double z = 0.0;
  bool reset = false;
};

/// Rectify and per-image normalize one image's raw planes. Z = 0 yields the
/// init weights (alpha = 1, beta = 0) with `reset` set.
RectifiedImage rectify_normalize(std::span<const double> alpha, std::span<const double> beta);

struct UpdateReport {
  int resets = 0;
  double min_rectified = 0.0;     // smallest rectified entry among updated images
  double max_norm_dev = 0.0;      // max |sum(alpha_n + beta_n) - 1| among non-reset images
};

/// Gradient step with rate eta on the listed images, then rectify and
/// normalize them. The raw planes are replaced by their rectified values so
/// the next step starts inside the feasible set.
UpdateReport update_rectify_normalize(WeightMaps& maps, std::span<const int> images,
                                      const MetaGrad& grads, double eta);

/// gamma = alpha_r + beta_r for one image.
std::vector<double> gamma_map(const WeightMaps& maps, int image);

/// "MDWM", u32 n_images, u32 H, u32 W, raw alpha planes then raw beta planes
/// as f32 LE.
void save_weight_maps(const std::filesystem::path& path, const WeightMaps& maps);
WeightMaps load_weight_maps(const std::filesystem::path& path);

}  // namespace metadcseg
