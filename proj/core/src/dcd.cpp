#include "metadcseg/dcd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace metadcseg {

using diff::Tape;
using diff::Var;

std::vector<double> sobel_magnitude(const ImagePlane& x) {
  const int H = x.height, W = x.width;
  auto px = [&](int y, int xx) {
    y = std::clamp(y, 0, H - 1);
    xx = std::clamp(xx, 0, W - 1);
    return x.at(y, xx, 0);
  };
  std::vector<double> mag(x.pixels());
  for (int y = 0; y < H; ++y) {
    for (int xx = 0; xx < W; ++xx) {
      const double gx = (px(y - 1, xx + 1) + 2 * px(y, xx + 1) + px(y + 1, xx + 1)) -
                        (px(y - 1, xx - 1) + 2 * px(y, xx - 1) + px(y + 1, xx - 1));
      const double gy = (px(y + 1, xx - 1) + 2 * px(y + 1, xx) + px(y + 1, xx + 1)) -
                        (px(y - 1, xx - 1) + 2 * px(y - 1, xx) + px(y - 1, xx + 1));
      mag[static_cast<std::size_t>(y) * W + xx] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return mag;
}

std::vector<int> detect_edges(const ImagePlane& x, double percentile) {
  if (!(percentile > 0.0 && percentile < 1.0)) {
    throw std::invalid_argument("detect_edges: percentile must lie in (0, 1)");
  }
  const auto mag = sobel_magnitude(x);
  const auto k = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(mag.size())));
  std::vector<int> order(mag.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mag[a] > mag[b]; });
  std::vector<int> edges;
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
    if (!(mag[order[i]] > 0.0)) break;
    edges.push_back(order[i]);
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

RegionDecomposition decompose_regions(std::span<const double> prob_fg, double tau,
                                      std::span<const int> edges) {
  if (!(tau > 0.5 && tau < 1.0)) throw std::invalid_argument("decompose_regions: tau must lie in (0.5, 1)");
  std::vector<char> is_edge(prob_fg.size(), 0);
  for (int e : edges) {
    if (e < 0 || static_cast<std::size_t>(e) >= prob_fg.size()) {
      throw std::out_of_range("decompose_regions: edge index out of range");
    }
    is_edge[static_cast<std::size_t>(e)] = 1;
  }
  RegionDecomposition r;
  for (std::size_t p = 0; p < prob_fg.size(); ++p) {
    const int i = static_cast<int>(p);
    if (is_edge[p]) {
      r.edge.push_back(i);
      r.bd.push_back(i);
    } else if (prob_fg[p] > tau) {
      r.fg.push_back(i);
    } else if (prob_fg[p] < 1.0 - tau) {
      r.bg.push_back(i);
    } else {
      r.bd.push_back(i);
    }
  }
  return r;
}

CenterTracker::CenterTracker(int dim) : dim_(dim) {
  for (auto& m : mean_) m.assign(static_cast<std::size_t>(dim), 0.0);
}

void CenterTracker::observe(const Centers& centers) {
  for (std::size_t k = 0; k < 3; ++k) {
    if (centers.used_fallback[k]) continue;
    if (centers.c[k].size() != static_cast<std::size_t>(dim_)) {
      throw diff::ShapeError("CenterTracker: center dimension mismatch");
    }
    ++count_[k];
    const double inv = 1.0 / static_cast<double>(count_[k]);
    for (int d = 0; d < dim_; ++d) mean_[k][d] += (centers.c[k][d] - mean_[k][d]) * inv;
  }
}

std::vector<double> CenterTracker::default_center(int region) const {
  return mean_.at(static_cast<std::size_t>(region));
}

namespace {

const std::vector<int>& region_set(const RegionDecomposition& r, int k) {
  return k == kFg ? r.fg : (k == kBg ? r.bg : r.bd);
}

void check_features(std::span<const double> features, int dim, std::size_t pixels) {
  if (dim <= 0 || features.size() != pixels * static_cast<std::size_t>(dim)) {
    throw diff::ShapeError("feature map size does not match gamma map");
  }
}

}  // namespace

Centers weighted_centers(std::span<const double> features, int dim, std::span<const double> gamma,
                         const RegionDecomposition& regions, const CenterTracker& tracker,
                         const CenterOptions& opt) {
  check_features(features, dim, gamma.size());
  if (tracker.dim() != dim) throw diff::ShapeError("weighted_centers: tracker dimension mismatch");
  Centers out;
  for (int k = 0; k < 3; ++k) {
    const auto& set = region_set(regions, k);
    std::vector<double> c(static_cast<std::size_t>(dim), 0.0);
    double wsum = 0.0;
    for (int p : set) {
      const double g = gamma[static_cast<std::size_t>(p)];
      if (g < 0.0) throw std::invalid_argument("weighted_centers: gamma must be non-negative");
      wsum += g;
      const double* h = features.data() + static_cast<std::size_t>(p) * dim;
      for (int d = 0; d < dim; ++d) c[d] += g * h[d];
    }
    if (static_cast<int>(set.size()) < opt.tau_min || !(wsum > 0.0)) {
      out.c[k] = tracker.default_center(k);
      out.used_fallback[k] = true;
    } else {
      for (double& v : c) v /= wsum;
      out.c[k] = std::move(c);
    }
  }
  return out;
}

namespace {

double dist(const double* h, const std::vector<double>& c, int dim) {
  double s = 0.0;
  for (int d = 0; d < dim; ++d) s += (h[d] - c[d]) * (h[d] - c[d]);
  return std::sqrt(s);
}

}  // namespace

DcdValues dcd_map(std::span<const double> features, int dim, const Centers& centers,
                  std::span<const int> bd, const DcdOptions& opt) {
  if (!(opt.eps > 0.0)) throw std::invalid_argument("dcd_map: eps must be positive");
  DcdValues out;
  out.raw.reserve(bd.size());
  out.clipped.reserve(bd.size());
  for (int p : bd) {
    const std::size_t off = static_cast<std::size_t>(p) * dim;
    if (off + dim > features.size()) throw std::out_of_range("dcd_map: pixel index out of range");
    const double* h = features.data() + off;
    const double v = dist(h, centers.c[kFg], dim) * dist(h, centers.c[kBg], dim) /
                     (dist(h, centers.c[kBd], dim) + opt.eps);
    out.raw.push_back(v);
    out.clipped.push_back(std::min(v, opt.dcd_max));
  }
  return out;
}

std::vector<double> boundary_weights(std::span<const double> dcd, double tau_dcd) {
  if (!(tau_dcd > 0.0)) throw std::invalid_argument("boundary_weights: tau_dcd must be positive");
  std::vector<double> w(dcd.size());
  if (dcd.empty()) return w;
  const double m = *std::max_element(dcd.begin(), dcd.end());
  double s = 0.0;
  for (std::size_t j = 0; j < dcd.size(); ++j) {
    w[j] = std::exp((dcd[j] - m) / tau_dcd);
    s += w[j];
  }
  for (double& v : w) v /= s;
  return w;
}

double max_feature_norm(std::span<const double> features, int dim) {
  double r = 0.0;
  for (std::size_t off = 0; off + dim <= features.size(); off += static_cast<std::size_t>(dim)) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) s += features[off + d] * features[off + d];
    r = std::max(r, std::sqrt(s));
  }
  return r;
}

template <typename Real>
Var boundary_weights_op(Tape<Real>& tape, Var features, std::span<const double> gamma,
                        const RegionDecomposition& regions, const CenterTracker& tracker,
                        double tau_dcd, const CenterOptions& copt, const DcdOptions& dopt) {
  const auto& shape = tape.shape(features);
  if (shape.size() != 3) throw diff::ShapeError("boundary_weights_op: expected {H,W,D} features");
  const int dim = shape[2];
  const std::vector<double> h(tape.value(features).begin(), tape.value(features).end());
  const Centers centers = weighted_centers(h, dim, gamma, regions, tracker, copt);
  const DcdValues dv = dcd_map(h, dim, centers, regions.bd, dopt);
  const std::vector<double> w = boundary_weights(dv.clipped, tau_dcd);

  struct Saved {
    std::vector<double> gamma;
    RegionDecomposition regions;
    Centers centers;
    DcdValues dcd;
    std::vector<double> w;
  };
  auto s = std::make_shared<const Saved>(
      Saved{{gamma.begin(), gamma.end()}, regions, centers, dv, w});

  return tape.record(
      "boundary_weights", {static_cast<int>(w.size())},
      typename Tape<Real>::Buffer(w.begin(), w.end()), {features},
      [=](Tape<Real>& tp, int self) {
        Real* gh = tp.grad_acc(features);
        if (!gh) return;
        const Real* gw = tp.grad_ptr(self);
        const auto& hv = tp.value(features);
        const std::size_t nb = s->w.size();
        double dotw = 0.0;
        for (std::size_t j = 0; j < nb; ++j) dotw += s->w[j] * static_cast<double>(gw[j]);
        std::array<std::vector<double>, 3> gc;
        for (auto& v : gc) v.assign(static_cast<std::size_t>(dim), 0.0);
        std::vector<double> hj(static_cast<std::size_t>(dim));
        for (std::size_t j = 0; j < nb; ++j) {
          if (s->dcd.raw[j] >= dopt.dcd_max) continue;  // clipped: flat
          const double gd = s->w[j] * (static_cast<double>(gw[j]) - dotw) / tau_dcd;
          if (gd == 0.0) continue;
          const std::size_t off = static_cast<std::size_t>(s->regions.bd[j]) * dim;
          for (int d = 0; d < dim; ++d) hj[d] = static_cast<double>(hv[off + d]);
          const double a = dist(hj.data(), s->centers.c[kFg], dim);
          const double b = dist(hj.data(), s->centers.c[kBg], dim);
          const double e = dist(hj.data(), s->centers.c[kBd], dim);
          const double den = e + dopt.eps;
          // dD/dh = (b/den) u_a + (a/den) u_b - (a b / den^2) u_e with unit
          // vectors u_k = (h - c_k)/|h - c_k| (zero at the origin).
          const double ka = a > 0.0 ? (b / den) / a : 0.0;
          const double kb = b > 0.0 ? (a / den) / b : 0.0;
          const double ke = e > 0.0 ? -(a * b / (den * den)) / e : 0.0;
          for (int d = 0; d < dim; ++d) {
            const double ua = hj[d] - s->centers.c[kFg][d];
            const double ub = hj[d] - s->centers.c[kBg][d];
            const double ue = hj[d] - s->centers.c[kBd][d];
            const double dh = ka * ua + kb * ub + ke * ue;
            gh[off + d] += static_cast<Real>(gd * dh);
            gc[kFg][d] -= gd * ka * ua;
            gc[kBg][d] -= gd * kb * ub;
            gc[kBd][d] -= gd * ke * ue;
          }
        }
        for (int k = 0; k < 3; ++k) {
          if (s->centers.used_fallback[k]) continue;
          const auto& set = region_set(s->regions, k);
          double total = 0.0;
          for (int p : set) total += s->gamma[static_cast<std::size_t>(p)];
          for (int p : set) {
            const double f = s->gamma[static_cast<std::size_t>(p)] / total;
            const std::size_t off = static_cast<std::size_t>(p) * dim;
            for (int d = 0; d < dim; ++d) gh[off + d] += static_cast<Real>(f * gc[k][d]);
          }
        }
      },
      nullptr);
}

template Var boundary_weights_op<float>(Tape<float>&, Var, std::span<const double>,
                                        const RegionDecomposition&, const CenterTracker&, double,
                                        const CenterOptions&, const DcdOptions&);
template Var boundary_weights_op<double>(Tape<double>&, Var, std::span<const double>,
                                         const RegionDecomposition&, const CenterTracker&, double,
                                         const CenterOptions&, const DcdOptions&);

}  // namespace metadcseg
