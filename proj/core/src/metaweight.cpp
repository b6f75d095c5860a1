#include "metadcseg/metaweight.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "binary_io.hpp"

namespace metadcseg {

using diff::Tape;
using diff::Var;

WeightMaps init_weight_maps(int n_images, int height, int width) {
  if (n_images <= 0 || height <= 0 || width <= 0) {
    throw std::invalid_argument("init_weight_maps: dimensions must be positive");
  }
  WeightMaps m;
  m.n_images = n_images;
  m.height = height;
  m.width = width;
  const std::size_t n = static_cast<std::size_t>(n_images) * m.pixels();
  m.alpha.assign(n, 1.0);
  m.beta.assign(n, 0.0);
  m.alpha_r = m.alpha;
  m.beta_r = m.beta;
  m.alpha_n.assign(n, 1.0 / static_cast<double>(m.pixels()));
  m.beta_n.assign(n, 0.0);
  m.z.assign(static_cast<std::size_t>(n_images), static_cast<double>(m.pixels()));
  m.was_reset.assign(static_cast<std::size_t>(n_images), 0);
  return m;
}

std::vector<double> pixel_ce(std::span<const double> probs, int classes, const LabelMask& labels) {
  const std::size_t n = labels.pixels();
  if (probs.size() != n * static_cast<std::size_t>(classes)) {
    throw diff::ShapeError("pixel_ce: probability map does not match label mask");
  }
  std::vector<double> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    const int y = labels.labels[p];
    if (y < 0 || y >= classes) throw std::out_of_range("pixel_ce: label out of range at pixel " + std::to_string(p));
    out[p] = -std::log(std::max(probs[p * classes + y], std::numeric_limits<double>::min()));
  }
  return out;
}

PixelLoss pixel_loss(std::span<const double> probs, int classes, const LabelMask& real,
                     const LabelMask& pseudo, std::span<const double> alpha,
                     std::span<const double> beta) {
  const std::size_t n = real.pixels();
  if (pseudo.pixels() != n || alpha.size() != n || beta.size() != n) {
    throw diff::ShapeError("pixel_loss: map sizes differ");
  }
  const auto f = pixel_ce(probs, classes, real);
  const auto g = pixel_ce(probs, classes, pseudo);
  PixelLoss out;
  out.map.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    out.map[p] = alpha[p] * f[p] + beta[p] * g[p];
    out.total += out.map[p];
  }
  return out;
}

template <typename Real>
Var pixel_loss(Tape<Real>& tape, Var logits, const LabelMask& real, const LabelMask& pseudo,
               std::span<const double> alpha, std::span<const double> beta) {
  const std::size_t n = real.pixels();
  if (pseudo.pixels() != n || alpha.size() != n || beta.size() != n) {
    throw diff::ShapeError("pixel_loss: map sizes differ");
  }
  const Var f = diff::cross_entropy(tape, logits, std::span<const int>(real.labels));
  const Var g = diff::cross_entropy(tape, logits, std::span<const int>(pseudo.labels));
  const auto& shape = tape.shape(f);
  const Var a = tape.constant(shape, typename Tape<Real>::Buffer(alpha.begin(), alpha.end()));
  const Var b = tape.constant(shape, typename Tape<Real>::Buffer(beta.begin(), beta.end()));
  return diff::add(tape, diff::mul(tape, a, f), diff::mul(tape, b, g));
}

namespace {

void check_terms(const MetaTerms& terms, const BatchWeights& w) {
  if (terms.f.size() != terms.g.size() || w.alpha.size() != terms.f.size() ||
      w.beta.size() != terms.f.size()) {
    throw diff::ShapeError("meta terms and batch weights disagree on batch size");
  }
}

template <typename Real>
typename Tape<Real>::Buffer to_buffer(std::span<const double> v) {
  return typename Tape<Real>::Buffer(v.begin(), v.end());
}

}  // namespace

template <typename Real>
std::vector<double> weighted_grad(Tape<Real>& tape, Var theta, const MetaTerms& terms,
                                  const BatchWeights& w) {
  check_terms(terms, w);
  std::vector<typename Tape<Real>::Seed> seeds;
  for (std::size_t i = 0; i < terms.f.size(); ++i) {
    if (tape.value(terms.f[i]).size() != w.alpha[i].size() ||
        tape.value(terms.g[i]).size() != w.beta[i].size()) {
      throw diff::ShapeError("weight map size does not match loss map of batch image " + std::to_string(i));
    }
    seeds.push_back({terms.f[i], to_buffer<Real>(w.alpha[i])});
    seeds.push_back({terms.g[i], to_buffer<Real>(w.beta[i])});
  }
  tape.backward(seeds);
  const auto g = tape.grad(theta);
  return std::vector<double>(g.begin(), g.end());
}

template <typename Real>
std::vector<double> inner_step(std::span<const double> theta, const TermsFn<Real>& terms,
                               const BatchWeights& w, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("inner_step: lambda must be positive");
  Tape<Real> tape;
  const Var th = tape.variable({static_cast<int>(theta.size())}, to_buffer<Real>(theta));
  const MetaTerms t = terms(tape, th);
  const auto g = weighted_grad(tape, th, t, w);
  std::vector<double> out(theta.begin(), theta.end());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= lambda * g[k];
  return out;
}

template <typename Real>
MetaGrad meta_grads_on_tape(Tape<Real>& tape, Var theta, const MetaTerms& terms,
                            std::span<const double> val_grad, double lambda, MetaGradMethod method) {
  if (terms.f.size() != terms.g.size()) throw diff::ShapeError("meta_grads: f/g batch sizes differ");
  if (val_grad.size() != tape.value(theta).size()) {
    throw diff::ShapeError("meta_grads: validation gradient does not match parameter count");
  }
  MetaGrad out;
  const std::size_t batch = terms.f.size();
  out.d_alpha.resize(batch);
  out.d_beta.resize(batch);

  if (method == MetaGradMethod::kForwardMode) {
    const typename Tape<Real>::Seed seed{theta, to_buffer<Real>(val_grad)};
    tape.forward_tangents(std::span(&seed, 1));
    for (std::size_t i = 0; i < batch; ++i) {
      const auto tf = tape.tangent(terms.f[i]);
      const auto tg = tape.tangent(terms.g[i]);
      out.d_alpha[i].resize(tf.size());
      out.d_beta[i].resize(tg.size());
      for (std::size_t p = 0; p < tf.size(); ++p) out.d_alpha[i][p] = -lambda * static_cast<double>(tf[p]);
      for (std::size_t p = 0; p < tg.size(); ++p) out.d_beta[i][p] = -lambda * static_cast<double>(tg[p]);
    }
    return out;
  }

  // One backward pass per pixel term, then a dot product with val_grad.
  auto per_pixel = [&](Var map, std::vector<double>& dst) {
    const std::size_t n = tape.value(map).size();
    dst.resize(n);
    typename Tape<Real>::Seed seed{map, typename Tape<Real>::Buffer(n, Real(0))};
    for (std::size_t p = 0; p < n; ++p) {
      seed.values[p] = Real(1);
      tape.backward(std::span(&seed, 1));
      seed.values[p] = Real(0);
      const auto g = tape.grad(theta);
      double dot = 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) dot += static_cast<double>(g[k]) * val_grad[k];
      dst[p] = -lambda * dot;
    }
  };
  for (std::size_t i = 0; i < batch; ++i) {
    per_pixel(terms.f[i], out.d_alpha[i]);
    per_pixel(terms.g[i], out.d_beta[i]);
  }
  return out;
}

template <typename Real>
MetaGrad meta_grads(std::span<const double> theta, std::span<const double> theta_hat,
                    const TermsFn<Real>& terms, const diff::ScalarFn<Real>& val_loss, double lambda,
                    MetaGradMethod method) {
  if (theta.size() != theta_hat.size()) throw diff::ShapeError("meta_grads: theta/theta_hat sizes differ");
  const auto vg = diff::value_and_grad<Real>(val_loss, theta_hat);
  Tape<Real> tape;
  const Var th = tape.variable({static_cast<int>(theta.size())}, to_buffer<Real>(theta));
  const MetaTerms t = terms(tape, th);
  return meta_grads_on_tape(tape, th, t, vg.grad, lambda, method);
}

RectifiedImage rectify_normalize(std::span<const double> alpha, std::span<const double> beta) {
  if (alpha.size() != beta.size()) throw diff::ShapeError("rectify_normalize: plane sizes differ");
  const std::size_t n = alpha.size();
  RectifiedImage r;
  r.alpha_r.resize(n);
  r.beta_r.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    r.alpha_r[p] = std::max(alpha[p], 0.0);
    r.beta_r[p] = std::max(beta[p], 0.0);
    r.z += r.alpha_r[p] + r.beta_r[p];
  }
  if (!(r.z > 0.0)) {
    r.reset = true;
    r.alpha_r.assign(n, 1.0);
    r.beta_r.assign(n, 0.0);
    r.z = static_cast<double>(n);
  }
  r.alpha_n.resize(n);
  r.beta_n.resize(n);
  for (std::size_t p = 0; p < n; ++p) {
    r.alpha_n[p] = r.alpha_r[p] / r.z;
    r.beta_n[p] = r.beta_r[p] / r.z;
  }
  return r;
}

UpdateReport update_rectify_normalize(WeightMaps& maps, std::span<const int> images,
                                      const MetaGrad& grads, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("update_rectify_normalize: eta must be positive");
  if (grads.d_alpha.size() != images.size() || grads.d_beta.size() != images.size()) {
    throw diff::ShapeError("update_rectify_normalize: gradient batch does not match image list");
  }
  UpdateReport rep;
  rep.min_rectified = std::numeric_limits<double>::infinity();
  const std::size_t n = maps.pixels();
  for (std::size_t b = 0; b < images.size(); ++b) {
    const int i = images[b];
    if (i < 0 || i >= maps.n_images) throw std::out_of_range("update_rectify_normalize: image index");
    if (grads.d_alpha[b].size() != n || grads.d_beta[b].size() != n) {
      throw diff::ShapeError("update_rectify_normalize: gradient map size mismatch");
    }
    auto a = maps.plane(maps.alpha, i);
    auto be = maps.plane(maps.beta, i);
    for (std::size_t p = 0; p < n; ++p) {
      a[p] -= eta * grads.d_alpha[b][p];
      be[p] -= eta * grads.d_beta[b][p];
    }
    const RectifiedImage r = rectify_normalize(a, be);
    std::copy(r.alpha_r.begin(), r.alpha_r.end(), a.begin());
    std::copy(r.beta_r.begin(), r.beta_r.end(), be.begin());
    std::copy(r.alpha_r.begin(), r.alpha_r.end(), maps.plane(maps.alpha_r, i).begin());
    std::copy(r.beta_r.begin(), r.beta_r.end(), maps.plane(maps.beta_r, i).begin());
    std::copy(r.alpha_n.begin(), r.alpha_n.end(), maps.plane(maps.alpha_n, i).begin());
    std::copy(r.beta_n.begin(), r.beta_n.end(), maps.plane(maps.beta_n, i).begin());
    maps.z[static_cast<std::size_t>(i)] = r.z;
    maps.was_reset[static_cast<std::size_t>(i)] = r.reset ? 1 : 0;
    if (r.reset) ++rep.resets;
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      rep.min_rectified = std::min({rep.min_rectified, r.alpha_r[p], r.beta_r[p]});
      s += r.alpha_n[p] + r.beta_n[p];
    }
    if (!r.reset) rep.max_norm_dev = std::max(rep.max_norm_dev, std::abs(s - 1.0));
  }
  if (images.empty()) rep.min_rectified = 0.0;
  return rep;
}

std::vector<double> gamma_map(const WeightMaps& maps, int image) {
  if (image < 0 || image >= maps.n_images) throw std::out_of_range("gamma_map: image index");
  const auto a = maps.plane(maps.alpha_r, image);
  const auto b = maps.plane(maps.beta_r, image);
  std::vector<double> g(a.size());
  for (std::size_t p = 0; p < g.size(); ++p) g[p] = a[p] + b[p];
  return g;
}

void save_weight_maps(const std::filesystem::path& path, const WeightMaps& maps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::write_magic(os, "MDWM");
  detail::write_u32(os, static_cast<std::uint32_t>(maps.n_images));
  detail::write_u32(os, static_cast<std::uint32_t>(maps.height));
  detail::write_u32(os, static_cast<std::uint32_t>(maps.width));
  for (double v : maps.alpha) detail::write_f32(os, static_cast<float>(v));
  for (double v : maps.beta) detail::write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

WeightMaps load_weight_maps(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  detail::Reader rd(is, "weight maps " + path.string());
  rd.expect_magic("MDWM");
  const auto dims_at = rd.offset();
  const auto n = rd.u32();
  const auto h = rd.u32();
  const auto w = rd.u32();
  if (n == 0 || h == 0 || w == 0 || static_cast<std::uint64_t>(n) * h * w > (1ULL << 30)) {
    throw FormatError(rd.what() + ": implausible dimensions", dims_at);
  }
  WeightMaps m = init_weight_maps(static_cast<int>(n), static_cast<int>(h), static_cast<int>(w));
  for (double& v : m.alpha) v = rd.f32();
  for (double& v : m.beta) v = rd.f32();
  rd.expect_eof();
  for (int i = 0; i < m.n_images; ++i) {
    const RectifiedImage r = rectify_normalize(m.plane(m.alpha, i), m.plane(m.beta, i));
    std::copy(r.alpha_r.begin(), r.alpha_r.end(), m.plane(m.alpha_r, i).begin());
    std::copy(r.beta_r.begin(), r.beta_r.end(), m.plane(m.beta_r, i).begin());
    std::copy(r.alpha_n.begin(), r.alpha_n.end(), m.plane(m.alpha_n, i).begin());
    std::copy(r.beta_n.begin(), r.beta_n.end(), m.plane(m.beta_n, i).begin());
    m.z[static_cast<std::size_t>(i)] = r.z;
  }
  return m;
}

#define METADCSEG_INSTANTIATE(R)                                                                   \
  template Var pixel_loss<R>(Tape<R>&, Var, const LabelMask&, const LabelMask&,                  \
                             std::span<const double>, std::span<const double>);                  \
  template std::vector<double> weighted_grad<R>(Tape<R>&, Var, const MetaTerms&,                 \
                                                const BatchWeights&);                            \
  template std::vector<double> inner_step<R>(std::span<const double>, const TermsFn<R>&,         \
                                             const BatchWeights&, double);                       \
  template MetaGrad meta_grads_on_tape<R>(Tape<R>&, Var, const MetaTerms&,                       \
                                          std::span<const double>, double, MetaGradMethod);      \
  template MetaGrad meta_grads<R>(std::span<const double>, std::span<const double>,              \
                                  const TermsFn<R>&, const diff::ScalarFn<R>&, double,           \
                                  MetaGradMethod);

METADCSEG_INSTANTIATE(float)
METADCSEG_INSTANTIATE(double)

#undef METADCSEG_INSTANTIATE

}  // namespace metadcseg
