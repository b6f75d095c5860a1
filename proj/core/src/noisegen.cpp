#include "metadcseg/noisegen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace metadcseg {

NoiseConfig NoiseConfig::for_level(int level) {
  NoiseConfig c;
  c.level = level;
  switch (level) {
    case 20:
      c.kernel_sizes = {7, 14, 21, 28, 35};
      c.p_ero = {0.1, 0.2, 0.5, 0.7, 1.0};
      c.target_rate = 0.2;
      break;
    case 40:
    case 60:
      c.kernel_sizes = {7, 11, 13, 17, 21};
      c.p_ero = {0.4, 0.6, 0.8, 0.9, 1.0};
      c.target_rate = level == 40 ? 0.4 : 0.6;
      c.extra_rounds = level == 60 ? 5 : 0;
      break;
    default:
      throw std::invalid_argument("noise level must be 20, 40 or 60, got " + std::to_string(level));
  }
  c.p_dil = c.p_ero;
  return c;
}

void NoiseConfig::validate() const {
  auto check_cdf = [&](const std::vector<double>& p, const char* name) {
    if (p.size() != kernel_sizes.size() || p.empty()) {
      throw std::invalid_argument(std::string("NoiseConfig: ") + name + " length must match kernel_sizes");
    }
    for (std::size_t j = 1; j < p.size(); ++j) {
      if (p[j] < p[j - 1]) throw std::invalid_argument(std::string("NoiseConfig: ") + name + " must be nondecreasing");
    }
    if (p.back() != 1.0) throw std::invalid_argument(std::string("NoiseConfig: ") + name + " must end at 1.0");
  };
  check_cdf(p_ero, "p_ero");
  check_cdf(p_dil, "p_dil");
  for (int k : kernel_sizes) {
    if (k < 1) throw std::invalid_argument("NoiseConfig: kernel sizes must be positive");
  }
  const double t = target_rate;
  if (std::abs(t - 0.2) > 1e-12 && std::abs(t - 0.4) > 1e-12 && std::abs(t - 0.6) > 1e-12) {
    throw std::invalid_argument("NoiseConfig: target rate must be 0.2, 0.4 or 0.6");
  }
  if (extra_rounds < 0) throw std::invalid_argument("NoiseConfig: extra_rounds must be >= 0");
}

LabelMask rotate_mask(const LabelMask& mask, double theta_deg) {
  const double t = theta_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double cx = (mask.width - 1) / 2.0, cy = (mask.height - 1) / 2.0;
  LabelMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const long sx = std::lround(cx + c * dx + s * dy);
      const long sy = std::lround(cy - s * dx + c * dy);
      if (sx < 0 || sy < 0 || sx >= mask.width || sy >= mask.height) continue;
      out.at(y, x) = mask.at(static_cast<int>(sy), static_cast<int>(sx)) ? 1 : 0;
    }
  }
  return out;
}

namespace {

// One axis of the separable pass: out[i] from in[i + lo .. i + hi].
// Erosion: all k in-bounds and set. Dilation: any set.
void pass_1d(const int* in, int* out, int n, std::ptrdiff_t stride, int lo, int k, bool erode) {
  // count of set pixels in [i + lo, i + lo + k - 1], clipped to [0, n)
  int count = 0;
  auto val = [&](int j) { return (j >= 0 && j < n) ? (in[j * stride] != 0) : 0; };
  for (int j = lo; j < lo + k; ++j) count += val(j);
  for (int i = 0; i < n; ++i) {
    out[i * stride] = erode ? (count == k) : (count > 0);
    count -= val(i + lo);
    count += val(i + lo + k);
  }
}

}  // namespace

LabelMask morph(const LabelMask& mask, MorphOp op, int k) {
  if (k < 1) throw std::invalid_argument("morph: kernel size must be positive");
  if (k > mask.height || k > mask.width) {
    throw std::invalid_argument("morph: kernel " + std::to_string(k) + " larger than image " +
                                std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  const bool erode = op == MorphOp::kErode;
  // Erosion window starts at -(k/2); dilation uses the reflected window.
  const int lo = erode ? -(k / 2) : -(k - 1 - k / 2);
  const int H = mask.height, W = mask.width;
  LabelMask tmp(H, W), out(H, W);
  for (int y = 0; y < H; ++y) {
    pass_1d(mask.labels.data() + static_cast<std::size_t>(y) * W, tmp.labels.data() + static_cast<std::size_t>(y) * W,
            W, 1, lo, k, erode);
  }
  for (int x = 0; x < W; ++x) pass_1d(tmp.labels.data() + x, out.labels.data() + x, H, W, lo, k, erode);
  return out;
}

int sample_kernel(const NoiseConfig& cfg, MorphOp op, double u) {
  const auto& p = op == MorphOp::kErode ? cfg.p_ero : cfg.p_dil;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (u < p[j]) return cfg.kernel_sizes[j];
  }
  return cfg.kernel_sizes.back();
}

LabelMask ellipse_replace(const LabelMask& mask) {
  int xmin = mask.width, xmax = -1, ymin = mask.height, ymax = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax < 0) throw std::invalid_argument("ellipse_replace: empty mask");
  const double xc = 0.5 * (xmin + xmax), yc = 0.5 * (ymin + ymax);
  const double rx = 0.5 * (xmax - xmin), ry = 0.5 * (ymax - ymin);
  auto term = [](double d, double r) {
    if (r > 0.0) return (d * d) / (r * r);
    return d == 0.0 ? 0.0 : 2.0;  // zero axis: only the centre line qualifies
  };
  LabelMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      out.at(y, x) = term(y - yc, ry) + term(x - xc, rx) <= 1.0 ? 1 : 0;
    }
  }
  return out;
}

double corruption_rate(const LabelMask& a, const LabelMask& b) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("corruption_rate: shape mismatch");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool x = a.labels[i] != 0, y = b.labels[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 0.0;
  return 1.0 - 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

LabelMask corrupt_mask(const LabelMask& mask, const NoiseConfig& cfg, Rng& rng) {
  cfg.validate();
  const int max_k = *std::max_element(cfg.kernel_sizes.begin(), cfg.kernel_sizes.end());
  if (max_k > mask.height || max_k > mask.width) {
    throw std::invalid_argument("corrupt_mask: level " + std::to_string(cfg.level) + " kernels up to " +
                                std::to_string(max_k) + " do not fit a " + std::to_string(mask.height) +
                                "x" + std::to_string(mask.width) + " mask");
  }
  const double theta = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  const double u_morph = rng.uniform();
  const double u_op = rng.uniform();
  const double u_kernel = rng.uniform();
  const double u_ellipse = rng.uniform();

  LabelMask y = rotate_mask(mask, theta);
  auto morph_stage = [&](LabelMask m, double gate, double opu, double ku) {
    if (!(gate < cfg.p_morph)) return m;
    const MorphOp op = opu < 0.5 ? MorphOp::kErode : MorphOp::kDilate;
    return morph(m, op, sample_kernel(cfg, op, ku));
  };
  y = morph_stage(std::move(y), u_morph, u_op, u_kernel);
  if (u_ellipse < cfg.p_ellipse && static_cast<int>(y.count_positive()) > cfg.area_gate) {
    y = ellipse_replace(y);
  }
  for (int r = 0; r < cfg.extra_rounds && corruption_rate(mask, y) < cfg.target_rate; ++r) {
    const double g = rng.uniform();
    const double o = rng.uniform();
    const double k = rng.uniform();
    y = morph_stage(std::move(y), g, o, k);
  }
  return y;
}

Rng mask_stream(std::uint64_t seed, int id) {
  return Rng::stream(seed, streams::kNoise).derive(static_cast<std::uint64_t>(id));
}

CorruptedCorpus calibrate(std::span<const LabelMask> corpus, const NoiseConfig& cfg, std::uint64_t seed,
                          double tol, std::span<const int> ids) {
  cfg.validate();
  if (!(tol >= 0.0)) throw std::invalid_argument("calibrate: tolerance must be non-negative");
  if (!ids.empty() && ids.size() != corpus.size()) throw std::invalid_argument("calibrate: ids/corpus size mismatch");
  CorruptedCorpus out;
  double sum = 0.0;
  for (const auto& m : corpus) {
    const std::size_t k = out.masks.size();
    Rng rng = mask_stream(seed, ids.empty() ? static_cast<int>(k) : ids[k]);
    out.masks.push_back(corrupt_mask(m, cfg, rng));
    const double r = corruption_rate(m, out.masks.back());
    out.report.rates.push_back(r);
    sum += r;
  }
  auto& rep = out.report;
  rep.mean_rate = corpus.empty() ? 0.0 : sum / static_cast<double>(corpus.size());
  rep.target = cfg.target_rate;
  rep.tolerance = tol;
  rep.within_tolerance = cfg.level == 60 ? rep.mean_rate >= cfg.target_rate - tol
                                         : std::abs(rep.mean_rate - cfg.target_rate) <= tol;
  return out;
}

CorruptionReport corrupt_dataset(Dataset& ds, int level, std::uint64_t seed) {
  const NoiseConfig cfg = NoiseConfig::for_level(level);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    if (ds.tags.empty() || ds.tags[i] == SplitTag::kTrain) idx.push_back(i);
  }
  std::vector<LabelMask> clean;
  std::vector<int> ids;
  for (auto i : idx) {
    clean.push_back(ds.items[i].clean);
    ids.push_back(ds.items[i].id);
  }
  CorruptedCorpus cc = calibrate(clean, cfg, seed, 0.05, ids);
  for (std::size_t k = 0; k < idx.size(); ++k) ds.items[idx[k]].noisy = std::move(cc.masks[k]);
  return cc.report;
}

}  // namespace metadcseg
