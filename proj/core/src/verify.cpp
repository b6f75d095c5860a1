#include "metadcseg/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

#include "metadcseg/dcd.hpp"
#include "metadcseg/metaweight.hpp"
#include "metadcseg/objective.hpp"
#include "metadcseg/segnet.hpp"

namespace metadcseg::check {

using diff::Shape;
using diff::Tape;
using diff::Var;
using nlohmann::json;
using T = Tape<double>;

const char* to_string(Status s) {
  switch (s) {
    case Status::kPass: return "pass";
    case Status::kFail: return "fail";
    case Status::kSkip: return "skip";
  }
  return "?";
}

bool Report::passed() const {
  return std::none_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.status == Status::kFail; });
}

json Report::to_json() const {
  json arr = json::array();
  for (const auto& c : checks) arr.push_back({{"name", c.name}, {"status", to_string(c.status)}, {"measured", c.measured}});
  return json{{"passed", passed()}, {"checks", arr}};
}

namespace {

constexpr double kFdStep = 1e-5;
// Whole networks have ReLU and pooling kinks that a 1e-5 stencil can straddle
// on a few hidden units; 1e-7 keeps f64 rounding far below the tolerance.
constexpr double kNetFdStep = 1e-7;

std::vector<double> normals(Rng& r, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * r.normal();
  return v;
}

std::vector<double> uniforms(Rng& r, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = r.uniform(lo, hi);
  return v;
}

// Values with |x| in [0.1, 1.1] so kinks and poles stay out of the FD stencil.
std::vector<double> away_from_zero(Rng& r, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = (r.uniform() < 0.5 ? -1.0 : 1.0) * r.uniform(0.1, 1.1);
  return v;
}

double grad_error(const diff::ScalarFn<double>& f, const std::vector<double>& theta, double step = kFdStep) {
  const auto vg = diff::value_and_grad<double>(f, theta);
  const auto fd = diff::finite_diff_grad(f, theta, step);
  return diff::relative_error(vg.grad, fd);
}

Var contract(T& t, Var y, Rng& r) {
  const auto n = t.value(y).size();
  return diff::sum(t, diff::mul(t, y, t.constant(t.shape(y), normals(r, n))));
}

struct PrimSpec {
  std::vector<Shape> inputs;
  std::function<std::vector<double>(Rng&, std::size_t)> gen;  // optional per-input generator override
  std::function<Var(T&, const std::vector<Var>&, Rng&)> op;
};

const std::vector<std::string> kPrimitives = {"slice", "conv3x3", "bias_add", "relu",   "downsample2", "upsample2",
                                              "pixel_affine", "softmax", "cross_entropy", "channel", "add", "sub",
                                              "mul", "div", "affine", "sum", "gather", "norm"};

PrimSpec primitive_spec(const std::string& op) {
  using diff::Shape;
  const Shape img{4, 6, 3};
  auto plain = [](Rng& r, std::size_t n) { return normals(r, n); };
  if (op == "slice") return {{{24}}, plain, [](T& t, const auto& x, Rng&) { return diff::slice(t, x[0], 5, {3, 4}); }};
  if (op == "conv3x3")
    return {{img, {3, 3, 3, 2}}, plain, [](T& t, const auto& x, Rng&) { return diff::conv3x3(t, x[0], x[1]); }};
  if (op == "bias_add")
    return {{img, {3}}, plain, [](T& t, const auto& x, Rng&) { return diff::bias_add(t, x[0], x[1]); }};
  if (op == "relu")
    return {{img}, [](Rng& r, std::size_t n) { return away_from_zero(r, n); },
            [](T& t, const auto& x, Rng&) { return diff::relu(t, x[0]); }};
  if (op == "downsample2") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::downsample2(t, x[0]); }};
  if (op == "upsample2") return {{{2, 3, 2}}, plain, [](T& t, const auto& x, Rng&) { return diff::upsample2(t, x[0]); }};
  if (op == "pixel_affine")
    return {{img, {3, 2}, {2}}, plain,
            [](T& t, const auto& x, Rng&) { return diff::pixel_affine(t, x[0], x[1], x[2]); }};
  if (op == "softmax") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::softmax(t, x[0]); }};
  if (op == "cross_entropy")
    return {{img}, plain, [](T& t, const auto& x, Rng& r) {
              std::vector<int> labels(24);
              for (int& l : labels) l = static_cast<int>(r.below(3));
              return diff::cross_entropy(t, x[0], std::span<const int>(labels));
            }};
  if (op == "channel") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::channel(t, x[0], 1); }};
  if (op == "add") return {{img, img}, plain, [](T& t, const auto& x, Rng&) { return diff::add(t, x[0], x[1]); }};
  if (op == "sub") return {{img, img}, plain, [](T& t, const auto& x, Rng&) { return diff::sub(t, x[0], x[1]); }};
  if (op == "mul") return {{img, img}, plain, [](T& t, const auto& x, Rng&) { return diff::mul(t, x[0], x[1]); }};
  if (op == "div")
    return {{img, img}, [](Rng& r, std::size_t n) { return away_from_zero(r, n); },
            [](T& t, const auto& x, Rng&) { return diff::div(t, x[0], x[1]); }};
  if (op == "affine") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::affine(t, x[0], -1.7, 0.3); }};
  if (op == "sum") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::sum(t, x[0]); }};
  if (op == "gather")
    return {{img}, plain, [](T& t, const auto& x, Rng& r) {
              std::vector<std::size_t> idx(30);
              for (auto& i : idx) i = r.below(72);
              return diff::gather(t, x[0], std::move(idx));
            }};
  if (op == "norm") return {{img}, plain, [](T& t, const auto& x, Rng&) { return diff::norm(t, x[0]); }};
  throw std::invalid_argument("unknown primitive '" + op + "'");
}

}  // namespace

const std::vector<std::string>& primitive_names() { return kPrimitives; }

double primitive_grad_error(const std::string& op, std::uint64_t seed) {
  const PrimSpec spec = primitive_spec(op);
  const auto pos = std::find(kPrimitives.begin(), kPrimitives.end(), op) - kPrimitives.begin();
  Rng r = Rng(seed).derive(100 + static_cast<std::uint64_t>(pos));
  std::vector<double> theta;
  std::vector<std::size_t> offsets;
  for (const auto& s : spec.inputs) {
    offsets.push_back(theta.size());
    const auto v = spec.gen(r, diff::numel(s));
    theta.insert(theta.end(), v.begin(), v.end());
  }
  const std::uint64_t op_seed = r.next();
  const std::uint64_t w_seed = r.next();
  diff::ScalarFn<double> f = [&](T& t, Var th) {
    std::vector<Var> xs;
    for (std::size_t k = 0; k < spec.inputs.size(); ++k) xs.push_back(diff::slice(t, th, offsets[k], spec.inputs[k]));
    Rng ro(op_seed), rw(w_seed);
    return contract(t, spec.op(t, xs, ro), rw);
  };
  return grad_error(f, theta);
}

namespace {

LabelMask random_mask(Rng& r, int h, int w, int classes) {
  LabelMask m(h, w);
  for (int& l : m.labels) l = static_cast<int>(r.below(static_cast<std::uint64_t>(classes)));
  return m;
}

ImagePlane random_image(Rng& r, int h, int w) {
  ImagePlane x(h, w);
  for (double& v : x.values) v = r.uniform();
  return x;
}

}  // namespace

GradCase network_grad_case(LossKind kind, std::uint64_t seed) {
  Rng r = Rng(seed).derive(static_cast<std::uint64_t>(kind) + 11);
  NetConfig cfg;
  cfg.depth = 1 + static_cast<int>(r.below(2));
  cfg.base_width = 2 + static_cast<int>(r.below(2));
  cfg.feature_dim = 2 + static_cast<int>(r.below(2));
  cfg.classes = 2 + static_cast<int>(r.below(2));
  const int side = cfg.depth == 1 ? (r.below(2) ? 4 : 6) : 8;
  const diff::ParamVector layout = init_params(cfg, r.next());
  std::vector<double> theta = layout.values();
  for (double& v : theta) v += 0.1 * r.normal();

  constexpr int kImages = 2;
  struct ImageData {
    ImagePlane x;
    LabelMask real, pseudo, fg;
    std::vector<double> alpha, beta;
    std::vector<std::size_t> bd;
    std::vector<double> bd_w;
  };
  std::vector<ImageData> data(kImages);
  const std::size_t px = static_cast<std::size_t>(side) * side;
  for (auto& d : data) {
    d.x = random_image(r, side, side);
    d.real = random_mask(r, side, side, cfg.classes);
    d.pseudo = random_mask(r, side, side, cfg.classes);
    d.fg = random_mask(r, side, side, 2);
    d.alpha = uniforms(r, px, 0.0, 1.0);
    d.beta = uniforms(r, px, 0.0, 1.0);
    for (std::size_t p = 0; p < px; ++p) {
      if (r.uniform() < 0.3) d.bd.push_back(p);
    }
    d.bd_w = boundary_weights(uniforms(r, d.bd.size(), 0.0, 5.0), 0.6);
  }
  const double lambda1 = r.uniform(0.1, 1.0), lambda2 = r.uniform(0.1, 1.0);

  diff::ScalarFn<double> f = [&](T& t, Var th) {
    std::vector<ImageLossTerms> terms;
    Var acc = t.constant({1}, {0.0});
    for (const auto& d : data) {
      const auto net = forward<double>(t, th, layout, cfg, d.x);
      switch (kind) {
        case LossKind::kPixel:
          acc = diff::add(t, acc, diff::sum(t, pixel_loss<double>(t, net.logits, d.real, d.pseudo, d.alpha, d.beta)));
          break;
        case LossKind::kDice:
          acc = diff::add(t, acc, dice_loss<double>(t, net.probs, d.fg));
          break;
        case LossKind::kTotal: {
          ImageLossTerms lt;
          lt.base_map = pixel_loss<double>(t, net.logits, d.real, d.pseudo, d.alpha, d.beta);
          lt.boundary_map = lt.base_map;
          lt.bd = d.bd;
          lt.bd_weights = d.bd_w;
          lt.dice = dice_loss<double>(t, net.probs, d.fg);
          terms.push_back(std::move(lt));
          break;
        }
      }
    }
    if (kind == LossKind::kTotal) return total_loss<double>(t, terms, lambda1, lambda2).total;
    return acc;
  };
  return GradCase{grad_error(f, theta, kNetFdStep), static_cast<int>(theta.size())};
}

namespace {

// 100 parameters: conv3x3 1->5, relu, per-pixel 5->6, relu, per-pixel 6->2.
constexpr int kToyParams = 100;

Var toy_logits(T& t, Var th, const ImagePlane& x) {
  using diff::slice;
  Var in = t.constant({x.height, x.width, 1}, x.values);
  Var h = diff::relu(t, diff::bias_add(t, diff::conv3x3(t, in, slice(t, th, 0, {3, 3, 1, 5})), slice(t, th, 45, {5})));
  h = diff::relu(t, diff::pixel_affine(t, h, slice(t, th, 50, {5, 6}), slice(t, th, 80, {6})));
  return diff::pixel_affine(t, h, slice(t, th, 86, {6, 2}), slice(t, th, 98, {2}));
}

}  // namespace

MetaOracleCase meta_grad_oracle_case(std::uint64_t seed) {
  Rng r = Rng(seed).derive(29);
  constexpr int kSide = 8, kBatch = 2, kVal = 2;
  const std::size_t px = kSide * kSide;
  std::vector<double> theta = normals(r, kToyParams, 0.5);

  std::vector<ImagePlane> xs, vxs;
  std::vector<LabelMask> noisy, vclean, pseudo;
  for (int i = 0; i < kBatch; ++i) {
    xs.push_back(random_image(r, kSide, kSide));
    noisy.push_back(random_mask(r, kSide, kSide, 2));
  }
  for (int i = 0; i < kVal; ++i) {
    vxs.push_back(random_image(r, kSide, kSide));
    vclean.push_back(random_mask(r, kSide, kSide, 2));
  }
  for (const auto& x : xs) {
    T t;
    Var th = t.variable({kToyParams}, theta);
    Var p = diff::softmax(t, toy_logits(t, th, x));
    const auto& pv = t.value(p);
    pseudo.push_back(pseudo_labels(std::vector<double>(pv.begin(), pv.end()), kSide, kSide, 2));
  }

  TermsFn<double> terms = [&](T& t, Var th) {
    MetaTerms m;
    for (int i = 0; i < kBatch; ++i) {
      Var logits = toy_logits(t, th, xs[i]);
      m.f.push_back(diff::cross_entropy(t, logits, std::span<const int>(noisy[i].labels)));
      m.g.push_back(diff::cross_entropy(t, logits, std::span<const int>(pseudo[i].labels)));
    }
    return m;
  };
  diff::ScalarFn<double> val = [&](T& t, Var th) {
    Var acc = t.constant({1}, {0.0});
    for (int i = 0; i < kVal; ++i) {
      acc = diff::add(t, acc, diff::sum(t, diff::cross_entropy(t, toy_logits(t, th, vxs[i]),
                                                                std::span<const int>(vclean[i].labels))));
    }
    return acc;
  };

  // Random feasible weights: rectified, normalized per image.
  std::vector<std::vector<double>> a(kBatch), b(kBatch);
  for (int i = 0; i < kBatch; ++i) {
    a[i] = uniforms(r, px, 0.0, 1.0);
    b[i] = uniforms(r, px, 0.0, 1.0);
    const double z = std::accumulate(a[i].begin(), a[i].end(), 0.0) + std::accumulate(b[i].begin(), b[i].end(), 0.0);
    for (std::size_t p = 0; p < px; ++p) {
      a[i][p] /= z;
      b[i][p] /= z;
    }
  }
  auto weights = [&]() {
    BatchWeights w;
    for (int i = 0; i < kBatch; ++i) {
      w.alpha.emplace_back(a[i]);
      w.beta.emplace_back(b[i]);
    }
    return w;
  };
  const double lambda = r.uniform(0.05, 0.5);
  auto l_val = [&]() { return diff::evaluate<double>(val, inner_step<double>(theta, terms, weights(), lambda)); };

  const auto theta_hat = inner_step<double>(theta, terms, weights(), lambda);
  const MetaGrad mg = meta_grads<double>(theta, theta_hat, terms, val, lambda);

  std::vector<double> analytic, numeric;
  constexpr double eps = 1e-6;
  for (int i = 0; i < kBatch; ++i) {
    for (auto* plane : {&a[i], &b[i]}) {
      const auto& src = plane == &a[i] ? mg.d_alpha[i] : mg.d_beta[i];
      for (std::size_t p = 0; p < px; ++p) {
        const double w0 = (*plane)[p];
        (*plane)[p] = w0 + eps;
        const double up = l_val();
        (*plane)[p] = w0 - eps;
        const double dn = l_val();
        (*plane)[p] = w0;
        numeric.push_back((up - dn) / (2 * eps));
        analytic.push_back(src[p]);
      }
    }
  }
  return MetaOracleCase{diff::relative_error(analytic, numeric), kToyParams};
}

NormalizationStats normalization_sweep(int updates, std::uint64_t seed) {
  Rng r = Rng(seed).derive(31);
  constexpr int kImages = 4, kH = 6, kW = 6;
  WeightMaps maps = init_weight_maps(kImages, kH, kW);
  NormalizationStats st;
  st.min_rectified = 1.0;
  for (int u = 0; u < updates; ++u) {
    std::vector<int> images{static_cast<int>(r.below(kImages))};
    if (r.uniform() < 0.5) {
      const int other = static_cast<int>(r.below(kImages));
      if (other != images[0]) images.push_back(other);
    }
    // Occasionally a large uniform push drives a whole image to zero.
    const bool wipe = r.uniform() < 0.05;
    const double scale = std::pow(10.0, r.uniform(-3.0, 1.0));
    MetaGrad g;
    for (std::size_t k = 0; k < images.size(); ++k) {
      g.d_alpha.push_back(wipe ? std::vector<double>(maps.pixels(), 1e6) : normals(r, maps.pixels(), scale));
      g.d_beta.push_back(wipe ? std::vector<double>(maps.pixels(), 1e6) : normals(r, maps.pixels(), scale));
    }
    update_rectify_normalize(maps, images, g, r.uniform(0.01, 1.0));
    ++st.updates;
    for (int i : images) {
      double s = 0.0;
      for (std::size_t p = 0; p < maps.pixels(); ++p) {
        const std::size_t q = static_cast<std::size_t>(i) * maps.pixels() + p;
        st.min_rectified = std::min({st.min_rectified, maps.alpha_r[q], maps.beta_r[q]});
        s += maps.alpha_n[q] + maps.beta_n[q];
      }
      if (maps.was_reset[static_cast<std::size_t>(i)]) {
        ++st.resets;
      } else {
        st.max_norm_dev = std::max(st.max_norm_dev, std::abs(s - 1.0));
      }
    }
  }
  return st;
}

DcdBoundStats dcd_bound_sweep(int fields, std::uint64_t seed) {
  Rng r = Rng(seed).derive(37);
  DcdBoundStats st;
  const DcdOptions dopt;
  for (int f = 0; f < fields; ++f) {
    const int h = 4 + static_cast<int>(r.below(7));
    const int w = 4 + static_cast<int>(r.below(7));
    const int dim = 1 + static_cast<int>(r.below(8));
    const std::size_t px = static_cast<std::size_t>(h) * w;
    const double scale = std::pow(10.0, r.uniform(-2.0, 2.0));
    const auto feats = normals(r, px * dim, scale);
    // Some fields are confidently split so that region sizes fall below tau_min.
    const double sharp = r.uniform() < 0.3 ? 50.0 : 1.0;
    std::vector<double> prob(px);
    for (double& p : prob) p = 1.0 / (1.0 + std::exp(-sharp * r.normal()));
    std::vector<double> gamma = uniforms(r, px, 0.0, 2.0);
    if (r.uniform() < 0.1) std::fill(gamma.begin(), gamma.end(), 0.0);
    const auto edges = detect_edges(random_image(r, h, w), r.uniform(0.05, 0.4));
    const auto regions = decompose_regions(prob, 0.7, edges);
    CenterTracker tracker(dim);
    const Centers c = weighted_centers(feats, dim, gamma, regions, tracker,
                                       CenterOptions{1 + static_cast<int>(r.below(10))});
    const double R = max_feature_norm(feats, dim);
    for (const auto& ck : c.c) {
      const double n = std::sqrt(std::inner_product(ck.begin(), ck.end(), ck.begin(), 0.0));
      st.max_center_over_r = std::max(st.max_center_over_r, n / R);
      if (n > R * (1 + 1e-12)) ++st.center_violations;
    }
    const DcdValues v = dcd_map(feats, dim, c, regions.bd, dopt);
    const double bound = 4 * R * R / dopt.eps;
    for (std::size_t k = 0; k < v.raw.size(); ++k) {
      st.max_raw_over_bound = std::max(st.max_raw_over_bound, v.raw[k] / bound);
      if (v.raw[k] > bound * (1 + 1e-12)) ++st.pre_clip_violations;
      if (v.clipped[k] > dopt.dcd_max) ++st.post_clip_violations;
    }
    st.bd_pixels += static_cast<int>(v.raw.size());
    ++st.fields;
  }
  return st;
}

LabelMask morph_bruteforce(const LabelMask& mask, MorphOp op, int k) {
  const bool erode = op == MorphOp::kErode;
  const int lo = erode ? -(k / 2) : -(k - 1 - k / 2);
  LabelMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      bool all = true, any = false;
      for (int dy = lo; dy < lo + k; ++dy) {
        for (int dx = lo; dx < lo + k; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool in = yy >= 0 && xx >= 0 && yy < mask.height && xx < mask.width && mask.at(yy, xx) != 0;
          all = all && in;
          any = any || in;
        }
      }
      out.at(y, x) = (erode ? all : any) ? 1 : 0;
    }
  }
  return out;
}

MorphOracleStats morphology_exhaustive(int h, int w, int k) {
  const int bits = h * w;
  if (bits > 24) throw std::invalid_argument("morphology_exhaustive: at most 24 pixels");
  MorphOracleStats st;
  LabelMask m(h, w);
  for (long code = 0; code < (1L << bits); ++code) {
    for (int b = 0; b < bits; ++b) m.labels[static_cast<std::size_t>(b)] = (code >> b) & 1;
    for (MorphOp op : {MorphOp::kErode, MorphOp::kDilate}) {
      if (morph(m, op, k) != morph_bruteforce(m, op, k)) ++st.mismatches;
    }
    ++st.masks;
  }
  return st;
}

DescentToy descent_toy(double lambda_factor, int steps, std::uint64_t seed) {
  Rng r = Rng(seed).derive(41);
  DescentToy toy;
  constexpr int P = 5, N = 8;
  constexpr double s = 1.5;  // validation points are s * e_m
  toy.params = P;
  toy.train_points = N;
  toy.val_points = P;
  toy.eta = 1.0;

  std::vector<std::vector<double>> a(N);
  for (auto& row : a) row = normals(r, P);
  const auto star = normals(r, P);
  std::vector<double> y(N);
  for (int j = 0; j < N; ++j) y[j] = std::inner_product(a[j].begin(), a[j].end(), star.begin(), 0.0);

  auto grad_f = [&](const std::vector<double>& th, int j) {
    const double res = std::inner_product(a[j].begin(), a[j].end(), th.begin(), 0.0) - y[j];
    std::vector<double> g(P);
    for (int k = 0; k < P; ++k) g[k] = res * a[j][k];
    return g;
  };
  auto val_loss = [&](const std::vector<double>& th) {
    double l = 0.0;
    for (int m = 0; m < P; ++m) l += 0.5 * (s * (th[m] - star[m])) * (s * (th[m] - star[m]));
    return l;
  };
  auto val_grad = [&](const std::vector<double>& th) {
    std::vector<double> g(P);
    for (int m = 0; m < P; ++m) g[m] = s * s * (th[m] - star[m]);
    return g;
  };
  auto l2 = [](const std::vector<double>& v) { return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0)); };

  std::vector<double> theta(P, 0.0);
  for (int j = 0; j < N; ++j) toy.sigma = std::max(toy.sigma, l2(grad_f(theta, j)));
  // Lipschitz constant of grad L_val, probed along basis and random directions.
  const auto g0 = val_grad(theta);
  for (int d = 0; d < 2 * P; ++d) {
    std::vector<double> v = d < P ? std::vector<double>(P, 0.0) : normals(r, P);
    if (d < P) v[d] = 1.0;
    std::vector<double> shifted = theta;
    for (int k = 0; k < P; ++k) shifted[k] += v[k];
    const auto g1 = val_grad(shifted);
    std::vector<double> diff(P);
    for (int k = 0; k < P; ++k) diff[k] = g1[k] - g0[k];
    toy.lipschitz = std::max(toy.lipschitz, l2(diff) / l2(v));
  }
  toy.bound = std::sqrt(2.0 / (toy.eta * toy.sigma * toy.sigma * toy.val_points * toy.lipschitz));
  toy.lambda = lambda_factor * toy.bound;
  toy.condition_met = toy.lambda < toy.bound;

  WeightMaps maps = init_weight_maps(1, 1, N);
  toy.val_losses.push_back(val_loss(theta));
  const std::vector<int> image{0};
  for (int t = 0; t < steps; ++t) {
    std::vector<std::vector<double>> gf(N);
    for (int j = 0; j < N; ++j) gf[j] = grad_f(theta, j);
    std::vector<double> hat = theta;
    for (int j = 0; j < N; ++j) {
      for (int k = 0; k < P; ++k) hat[k] -= toy.lambda * maps.alpha_n[j] * gf[j][k];
    }
    const auto gv = val_grad(hat);
    MetaGrad mg;
    mg.d_alpha.emplace_back(N);
    mg.d_beta.emplace_back(N, 0.0);  // the self-prediction term has zero gradient here
    for (int j = 0; j < N; ++j) {
      mg.d_alpha[0][j] = -toy.lambda * std::inner_product(gv.begin(), gv.end(), gf[j].begin(), 0.0);
    }
    update_rectify_normalize(maps, image, mg, toy.eta);
    for (int j = 0; j < N; ++j) {
      for (int k = 0; k < P; ++k) theta[k] -= toy.lambda * maps.alpha_n[j] * gf[j][k];
    }
    toy.val_losses.push_back(val_loss(theta));
    toy.max_increase = std::max(toy.max_increase, toy.val_losses.back() - toy.val_losses[toy.val_losses.size() - 2]);
  }
  return toy;
}

Report run_all(const Options& opt) {
  Report rep;
  auto add = [&](std::string name, bool ok, json measured) {
    rep.checks.push_back({std::move(name), ok ? Status::kPass : Status::kFail, std::move(measured)});
  };

  {
    double worst = 0.0;
    json per_op;
    for (const auto& op : primitive_names()) {
      double e = 0.0;
      for (int c = 0; c < opt.primitive_cases; ++c) {
        e = std::max(e, primitive_grad_error(op, opt.seed + static_cast<std::uint64_t>(c)));
      }
      per_op[op] = e;
      worst = std::max(worst, e);
    }
    add("primitive_gradients", worst <= 1e-6, {{"max_rel_error", worst}, {"tolerance", 1e-6}, {"per_op", per_op}});
  }
  {
    json per_kind;
    double worst = 0.0;
    const std::pair<LossKind, const char*> kinds[] = {
        {LossKind::kPixel, "pixel_loss"}, {LossKind::kDice, "dice_loss"}, {LossKind::kTotal, "total_loss"}};
    for (const auto& [kind, name] : kinds) {
      double e = 0.0;
      for (int c = 0; c < opt.grad_cases; ++c) {
        e = std::max(e, network_grad_case(kind, opt.seed + static_cast<std::uint64_t>(c)).rel_error);
      }
      per_kind[name] = e;
      worst = std::max(worst, e);
    }
    add("network_gradients", worst <= 1e-4,
        {{"cases_per_loss", opt.grad_cases}, {"max_rel_error", worst}, {"tolerance", 1e-4}, {"per_loss", per_kind}});
  }
  {
    double worst = 0.0;
    for (int c = 0; c < opt.meta_cases; ++c) {
      worst = std::max(worst, meta_grad_oracle_case(opt.seed + static_cast<std::uint64_t>(c)).rel_error);
    }
    add("meta_gradient_oracle", worst <= 1e-4,
        {{"cases", opt.meta_cases}, {"params", kToyParams}, {"max_rel_error", worst}, {"tolerance", 1e-4}});
  }
  {
    const auto st = normalization_sweep(opt.normalization_updates, opt.seed);
    add("normalization", st.min_rectified >= 0.0 && st.max_norm_dev <= 1e-6,
        {{"updates", st.updates},
         {"resets", st.resets},
         {"min_rectified", st.min_rectified},
         {"max_norm_dev", st.max_norm_dev}});
  }
  {
    const auto st = dcd_bound_sweep(opt.dcd_fields, opt.seed);
    add("dcd_bounds", st.pre_clip_violations == 0 && st.post_clip_violations == 0,
        {{"fields", st.fields},
         {"bd_pixels", st.bd_pixels},
         {"pre_clip_violations", st.pre_clip_violations},
         {"post_clip_violations", st.post_clip_violations},
         {"max_raw_over_bound", st.max_raw_over_bound}});
    add("center_convexity", st.center_violations == 0,
        {{"violations", st.center_violations}, {"max_center_norm_over_r", st.max_center_over_r}});
  }
  {
    Rng r = Rng(opt.seed).derive(43);
    double sum_dev = 0.0, shift_dev = 0.0, min_w = 1.0;
    for (int c = 0; c < 200; ++c) {
      const auto d = uniforms(r, 1 + r.below(50), 0.0, 100.0);
      const double tau = r.uniform(0.5, 1.0);
      const auto w = boundary_weights(d, tau);
      auto shifted = d;
      const double k = r.uniform(-50.0, 50.0);
      for (double& v : shifted) v += k;
      const auto ws = boundary_weights(shifted, tau);
      sum_dev = std::max(sum_dev, std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0));
      for (std::size_t j = 0; j < w.size(); ++j) {
        shift_dev = std::max(shift_dev, std::abs(w[j] - ws[j]));
        min_w = std::min(min_w, w[j]);
      }
    }
    const auto third = boundary_weights(std::vector<double>{0.0, std::log(2.0) * 0.6}, 0.6);
    const double third_dev = std::max(std::abs(third[0] - 1.0 / 3), std::abs(third[1] - 2.0 / 3));
    add("boundary_softmax", sum_dev <= 1e-12 && shift_dev <= 1e-12 && min_w > 0.0 && third_dev <= 1e-12,
        {{"max_sum_dev", sum_dev}, {"max_shift_dev", shift_dev}, {"min_weight", min_w}, {"one_third_dev", third_dev}});
  }
  {
    // Loss through the differentiable boundary weights stays finite in both
    // reverse mode and central differences.
    Rng r = Rng(opt.seed).derive(47);
    bool finite = true;
    double max_abs = 0.0;
    for (int c = 0; c < 20; ++c) {
      const int side = 6, dim = 3;
      const std::size_t px = side * side;
      const auto feats = normals(r, px * dim);
      std::vector<double> prob = uniforms(r, px, 0.0, 1.0);
      const auto gamma = uniforms(r, px, 0.1, 2.0);
      const auto regions = decompose_regions(prob, 0.7, detect_edges(random_image(r, side, side), 0.2));
      const auto ce = normals(r, px);
      CenterTracker tracker(dim);
      diff::ScalarFn<double> f = [&](T& t, Var th) {
        Var x = diff::slice(t, th, 0, {side, side, dim});
        Var w = boundary_weights_op<double>(t, x, gamma, regions, tracker, 0.6, CenterOptions{3});
        std::vector<std::size_t> bd(regions.bd.begin(), regions.bd.end());
        Var l = diff::gather(t, t.constant({side, side}, ce), bd);
        return diff::sum(t, diff::mul(t, w, l));
      };
      const auto vg = diff::value_and_grad<double>(f, feats);
      const auto fd = diff::finite_diff_grad(f, feats, kFdStep);
      for (std::size_t k = 0; k < fd.size(); ++k) {
        finite = finite && std::isfinite(vg.grad[k]) && std::isfinite(fd[k]);
        max_abs = std::max({max_abs, std::abs(vg.grad[k]), std::abs(fd[k])});
      }
    }
    add("dcd_gradient_finite", finite, {{"cases", 20}, {"max_abs_gradient", max_abs}});
  }
  {
    const int side = opt.exhaustive_morphology ? 4 : 3;
    const auto st = morphology_exhaustive(side, side, 3);
    add("morphology_exhaustive", st.mismatches == 0,
        {{"grid", std::to_string(side) + "x" + std::to_string(side)}, {"k", 3}, {"masks", st.masks},
         {"mismatches", st.mismatches}});
  }
  {
    const auto toy = descent_toy(opt.descent_lambda_factor, 100, opt.seed);
    json m{{"sigma", toy.sigma},         {"lipschitz", toy.lipschitz}, {"eta", toy.eta},
           {"val_points", toy.val_points}, {"bound", toy.bound},         {"lambda", toy.lambda},
           {"initial_val_loss", toy.val_losses.front()}, {"final_val_loss", toy.val_losses.back()},
           {"max_increase", toy.max_increase}};
    CheckResult c{"monotone_descent", Status::kSkip, m};
    if (toy.condition_met) c.status = toy.max_increase <= 1e-10 ? Status::kPass : Status::kFail;
    rep.checks.push_back(std::move(c));
  }
  return rep;
}

}  // namespace metadcseg::check
