#pragma once

#include <span>
#include <vector>

#include "metadcseg/datakit.hpp"
#include "metadcseg/diffcore.hpp"

namespace metadcseg {

inline constexpr double kDiceSmooth = 1.0;

/// 1 - (2 sum p y + s) / (sum p + sum y + s), y binary.
double dice_loss(std::span<const double> prob_fg, const LabelMask& mask, double smooth = kDiceSmooth);

/// Graph form on a probability map {H, W, L}; class 1 is foreground.
template <typename Real>
diff::Var dice_loss(diff::Tape<Real>& tape, diff::Var probs, const LabelMask& mask,
                    double smooth = kDiceSmooth);

struct LossBreakdown {
  double base = 0.0;
  double boundary = 0.0;
  double dice = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

/// total = base + lambda1 * boundary + lambda2 * dice.
LossBreakdown combine(double base, double boundary, double dice, double lambda1, double lambda2);

/// One image's contribution.
struct ImageLossTerms {
  diff::Var base_map;              // per-pixel loss summed into the base term
  diff::Var boundary_map;          // per-pixel loss weighted over bd (may equal base_map)
  std::vector<std::size_t> bd;     // flat indices of boundary pixels
  std::vector<double> bd_weights;  // same length as bd; empty bd -> term is 0
  diff::Var bd_weights_var;        // optional: differentiable weights overriding bd_weights
  diff::Var dice;                  // invalid -> no Dice term
};

struct TotalVars {
  diff::Var base, boundary, dice, total;
};

/// sum_i [sum_hw base + lambda1 sum_bd w * boundary_map] + lambda2 sum_i dice_i.
template <typename Real>
TotalVars total_loss(diff::Tape<Real>& tape, std::span<const ImageLossTerms> images, double lambda1,
                     double lambda2);

template <typename Real>
LossBreakdown breakdown(const diff::Tape<Real>& tape, const TotalVars& v, double lambda1,
                        double lambda2) {
  return LossBreakdown{static_cast<double>(tape.scalar(v.base)),
                       static_cast<double>(tape.scalar(v.boundary)),
                       static_cast<double>(tape.scalar(v.dice)),
                       static_cast<double>(tape.scalar(v.total)), lambda1, lambda2};
}

}  // namespace metadcseg
