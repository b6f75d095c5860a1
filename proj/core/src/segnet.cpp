#include "metadcseg/segnet.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "binary_io.hpp"

namespace metadcseg {

using diff::ParamVector;
using diff::Tape;
using diff::Var;

namespace {

struct ConvSpec {
  std::string name;
  int in = 0;
  int out = 0;
};

int level_width(const NetConfig& cfg, int level) {
  return level == 0 ? cfg.base_width : 2 * cfg.base_width;
}

// Conv stages in execution order. The decoder at level l >= 1 ends by
// narrowing to the width of level l - 1 so the additive skip lines up.
struct Plan {
  std::vector<std::vector<ConvSpec>> encoder;  // levels 0 .. depth-1
  std::vector<ConvSpec> bottleneck;
  std::vector<std::vector<ConvSpec>> decoder;  // index l = level l
};

Plan make_plan(const NetConfig& cfg) {
  Plan p;
  int ch = cfg.in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    const int w = level_width(cfg, l);
    const std::string pre = "enc" + std::to_string(l);
    p.encoder.push_back({{pre + ".conv0", ch, w}, {pre + ".conv1", w, w}});
    ch = w;
  }
  const int wd = level_width(cfg, cfg.depth);
  const int back = level_width(cfg, cfg.depth - 1);
  p.bottleneck = {{"mid.conv0", ch, wd}, {"mid.conv1", wd, back}};
  p.decoder.resize(static_cast<std::size_t>(cfg.depth));
  for (int l = cfg.depth - 1; l >= 1; --l) {
    const int w = level_width(cfg, l);
    const std::string pre = "dec" + std::to_string(l);
    p.decoder[static_cast<std::size_t>(l)] = {{pre + ".conv0", w, w},
                                              {pre + ".conv1", w, level_width(cfg, l - 1)}};
  }
  p.decoder[0] = {{"dec0.conv0", cfg.base_width, cfg.feature_dim}};
  return p;
}

template <typename F>
void for_each_conv(const Plan& p, F&& f) {
  for (const auto& lvl : p.encoder)
    for (const auto& c : lvl) f(c);
  for (const auto& c : p.bottleneck) f(c);
  for (std::size_t l = p.decoder.size(); l-- > 0;)
    for (const auto& c : p.decoder[l]) f(c);
}

template <typename Real>
class Builder {
 public:
  Builder(Tape<Real>& t, Var theta, const ParamVector& layout)
      : t_(t), theta_(theta), layout_(layout) {}

  Var param(const std::string& name) {
    const auto& seg = layout_.segment(name);
    return diff::slice(t_, theta_, seg.offset, seg.shape);
  }

  Var conv_relu(Var x, const ConvSpec& c) {
    Var y = diff::conv3x3(t_, x, param(c.name + ".w"));
    y = diff::bias_add(t_, y, param(c.name + ".b"));
    return diff::relu(t_, y);
  }

  Var stage(Var x, const std::vector<ConvSpec>& convs) {
    for (const auto& c : convs) x = conv_relu(x, c);
    return x;
  }

 private:
  Tape<Real>& t_;
  Var theta_;
  const ParamVector& layout_;
};

}  // namespace

void NetConfig::validate(int h, int w) const {
  if (in_channels < 1) throw std::invalid_argument("NetConfig: in_channels must be >= 1");
  if (classes < 2) throw std::invalid_argument("NetConfig: classes must be >= 2");
  if (feature_dim < 2) throw std::invalid_argument("NetConfig: feature_dim must be >= 2");
  if (base_width < 1) throw std::invalid_argument("NetConfig: base_width must be >= 1");
  if (depth < 1 || depth > 8) throw std::invalid_argument("NetConfig: depth must be in [1, 8]");
  const int m = 1 << depth;
  if ((h > 0 && h % m) || (w > 0 && w % m)) {
    throw std::invalid_argument("NetConfig: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by 2^depth = " + std::to_string(m));
  }
}

ParamVector param_layout(const NetConfig& cfg) {
  cfg.validate();
  ParamVector pv;
  for_each_conv(make_plan(cfg), [&](const ConvSpec& c) {
    pv.add(c.name + ".w", {3, 3, c.in, c.out});
    pv.add(c.name + ".b", {c.out});
  });
  pv.add("head.w", {cfg.feature_dim, cfg.classes});
  pv.add("head.b", {cfg.classes});
  return pv;
}

ParamVector init_params(const NetConfig& cfg, std::uint64_t seed) {
  ParamVector pv = param_layout(cfg);
  Rng rng = Rng::stream(seed, streams::kInit);
  for (const auto& seg : pv.segments()) {
    if (seg.shape.size() == 1) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t i = 0; i + 1 < seg.shape.size(); ++i) fan_in *= static_cast<std::size_t>(seg.shape[i]);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : pv.view(seg)) v = rng.uniform(-bound, bound);
  }
  return pv;
}

template <typename Real>
NetVars<Real> forward(Tape<Real>& tape, Var theta, const ParamVector& layout, const NetConfig& cfg,
                      const ImagePlane& x) {
  cfg.validate(x.height, x.width);
  if (x.channels != cfg.in_channels) {
    throw diff::ShapeError("forward: image has " + std::to_string(x.channels) + " channels, net expects " +
                           std::to_string(cfg.in_channels));
  }
  if (tape.value(theta).size() != layout.size()) {
    throw diff::ShapeError("forward: parameter vector size does not match layout");
  }
  const Plan plan = make_plan(cfg);
  Builder<Real> b(tape, theta, layout);

  Var h = tape.constant({x.height, x.width, x.channels},
                        typename Tape<Real>::Buffer(x.values.begin(), x.values.end()));
  std::vector<Var> skips;
  for (const auto& lvl : plan.encoder) {
    h = b.stage(h, lvl);
    skips.push_back(h);
    h = diff::downsample2(tape, h);
  }
  h = b.stage(h, plan.bottleneck);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    h = diff::upsample2(tape, h);
    h = diff::add(tape, h, skips[static_cast<std::size_t>(l)]);
    h = b.stage(h, plan.decoder[static_cast<std::size_t>(l)]);
  }
  NetVars<Real> out;
  out.features = h;
  out.logits = diff::pixel_affine(tape, h, b.param("head.w"), b.param("head.b"));
  out.probs = diff::softmax(tape, out.logits);
  return out;
}

template NetVars<float> forward<float>(Tape<float>&, Var, const ParamVector&, const NetConfig&,
                                       const ImagePlane&);
template NetVars<double> forward<double>(Tape<double>&, Var, const ParamVector&, const NetConfig&,
                                         const ImagePlane&);

ForwardOutput forward(const NetConfig& cfg, const ParamVector& theta, const ImagePlane& x) {
  Tape<double> tape;
  const Var th = tape.constant({static_cast<int>(theta.size())}, theta.values());
  const auto v = forward<double>(tape, th, theta, cfg, x);
  ForwardOutput out;
  out.height = x.height;
  out.width = x.width;
  out.logits = tape.value(v.logits);
  out.features = tape.value(v.features);
  out.probs = tape.value(v.probs);
  return out;
}

LabelMask pseudo_labels(std::span<const double> probs, int height, int width, int classes) {
  const std::size_t n = static_cast<std::size_t>(height) * width;
  if (classes < 1 || probs.size() != n * static_cast<std::size_t>(classes)) {
    throw diff::ShapeError("pseudo_labels: probability map size mismatch");
  }
  LabelMask m(height, width);
  for (std::size_t p = 0; p < n; ++p) {
    const double* row = probs.data() + p * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    m.labels[p] = best;
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (!ckpt.params.same_layout(param_layout(ckpt.cfg))) {
    throw std::invalid_argument("save_checkpoint: parameters do not match config layout");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  detail::write_magic(os, "MDCP");
  detail::write_u32(os, 1);
  for (int v : {ckpt.cfg.in_channels, ckpt.cfg.classes, ckpt.cfg.base_width, ckpt.cfg.depth,
                ckpt.cfg.feature_dim}) {
    detail::write_u32(os, static_cast<std::uint32_t>(v));
  }
  for (double v : ckpt.params.values()) detail::write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  detail::Reader rd(is, "checkpoint " + path.string());
  rd.expect_magic("MDCP");
  const auto version_at = rd.offset();
  if (rd.u32() != 1) throw FormatError(rd.what() + ": unsupported version", version_at);
  Checkpoint ck;
  const auto cfg_at = rd.offset();
  std::uint32_t f[5];
  for (auto& v : f) {
    v = rd.u32();
    if (v > 4096) throw FormatError(rd.what() + ": implausible config field", cfg_at);
  }
  ck.cfg = NetConfig{static_cast<int>(f[0]), static_cast<int>(f[1]), static_cast<int>(f[2]),
                     static_cast<int>(f[3]), static_cast<int>(f[4])};
  try {
    ck.params = param_layout(ck.cfg);
  } catch (const std::invalid_argument& e) {
    throw FormatError(rd.what() + ": " + e.what(), cfg_at);
  }
  for (double& v : ck.params.values()) v = rd.f32();
  rd.expect_eof();
  return ck;
}

}  // namespace metadcseg
