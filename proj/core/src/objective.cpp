#include "metadcseg/objective.hpp"

namespace metadcseg {

using diff::Tape;
using diff::Var;

double dice_loss(std::span<const double> prob_fg, const LabelMask& mask, double smooth) {
  if (prob_fg.size() != mask.pixels()) throw diff::ShapeError("dice_loss: size mismatch");
  double py = 0.0, p = 0.0, y = 0.0;
  for (std::size_t i = 0; i < prob_fg.size(); ++i) {
    const double yi = mask.labels[i] ? 1.0 : 0.0;
    py += prob_fg[i] * yi;
    p += prob_fg[i];
    y += yi;
  }
  return 1.0 - (2.0 * py + smooth) / (p + y + smooth);
}

template <typename Real>
Var dice_loss(Tape<Real>& tape, Var probs, const LabelMask& mask, double smooth) {
  const Var p = diff::channel(tape, probs, 1);
  if (tape.value(p).size() != mask.pixels()) throw diff::ShapeError("dice_loss: size mismatch");
  typename Tape<Real>::Buffer yb(mask.pixels());
  double ysum = 0.0;
  for (std::size_t i = 0; i < yb.size(); ++i) {
    yb[i] = mask.labels[i] ? Real(1) : Real(0);
    ysum += static_cast<double>(yb[i]);
  }
  const Var y = tape.constant(tape.shape(p), std::move(yb));
  const Var num = diff::affine(tape, diff::sum(tape, diff::mul(tape, p, y)), 2.0, smooth);
  const Var den = diff::affine(tape, diff::sum(tape, p), 1.0, ysum + smooth);
  return diff::affine(tape, diff::div(tape, num, den), -1.0, 1.0);
}

LossBreakdown combine(double base, double boundary, double dice, double lambda1, double lambda2) {
  LossBreakdown b{base, boundary, dice, 0.0, lambda1, lambda2};
  b.total = base + lambda1 * boundary + lambda2 * dice;
  return b;
}

template <typename Real>
TotalVars total_loss(Tape<Real>& tape, std::span<const ImageLossTerms> images, double lambda1,
                     double lambda2) {
  auto zero = [&] { return tape.constant({1}, {Real(0)}); };
  TotalVars v{zero(), zero(), zero(), {}};
  for (const auto& im : images) {
    v.base = diff::add(tape, v.base, diff::sum(tape, im.base_map));
    if (!im.bd.empty()) {
      const Var picked = diff::gather(tape, im.boundary_map, im.bd);
      Var w;
      if (im.bd_weights_var.valid()) {
        w = im.bd_weights_var;
      } else {
        if (im.bd_weights.size() != im.bd.size()) {
          throw diff::ShapeError("total_loss: boundary weights do not match boundary set");
        }
        w = tape.constant(tape.shape(picked),
                          typename Tape<Real>::Buffer(im.bd_weights.begin(), im.bd_weights.end()));
      }
      v.boundary = diff::add(tape, v.boundary, diff::sum(tape, diff::mul(tape, w, picked)));
    }
    if (im.dice.valid()) v.dice = diff::add(tape, v.dice, im.dice);
  }
  v.total = diff::add(tape,
                      diff::add(tape, v.base, diff::affine(tape, v.boundary, lambda1, 0.0)),
                      diff::affine(tape, v.dice, lambda2, 0.0));
  return v;
}

template Var dice_loss<float>(Tape<float>&, Var, const LabelMask&, double);
template Var dice_loss<double>(Tape<double>&, Var, const LabelMask&, double);
template TotalVars total_loss<float>(Tape<float>&, std::span<const ImageLossTerms>, double, double);
template TotalVars total_loss<double>(Tape<double>&, std::span<const ImageLossTerms>, double, double);

}  // namespace metadcseg
