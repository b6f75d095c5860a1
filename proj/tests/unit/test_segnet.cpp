#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "metadcseg/segnet.hpp"
#include "metadcseg/verify.hpp"

namespace {

using namespace metadcseg;
namespace fs = std::filesystem;

ImagePlane noise_image(int h, int w, std::uint64_t seed) {
  Rng r(seed);
  ImagePlane x(h, w);
  for (double& v : x.values) v = r.uniform();
  return x;
}

TEST(InitParams, DeterministicPerSeed) {
  const NetConfig cfg;
  EXPECT_EQ(init_params(cfg, 3), init_params(cfg, 3));
  EXPECT_NE(init_params(cfg, 3).values(), init_params(cfg, 4).values());
}

TEST(InitParams, BiasesZeroWeightsBounded) {
  const NetConfig cfg;
  const auto p = init_params(cfg, 1);
  for (const auto& seg : p.segments()) {
    const auto v = p.view(seg);
    if (seg.shape.size() == 1) {
      for (double x : v) EXPECT_EQ(x, 0.0) << seg.name;
    } else {
      std::size_t fan_in = 1;
      for (std::size_t i = 0; i + 1 < seg.shape.size(); ++i) fan_in *= seg.shape[i];
      const double bound = std::sqrt(6.0 / fan_in);
      for (double x : v) EXPECT_LE(std::abs(x), bound) << seg.name;
    }
  }
}

TEST(ParamLayout, DefaultsStaySmall) {
  const auto p = param_layout(NetConfig{});
  EXPECT_LE(p.size(), 20000u);
  EXPECT_EQ(p.segments().back().name, "head.b");
  std::size_t off = 0;
  for (const auto& s : p.segments()) {
    EXPECT_EQ(s.offset, off);
    off += s.size;
  }
  EXPECT_EQ(off, p.size());
}

TEST(NetConfig, RejectsBadShapes) {
  NetConfig cfg;
  EXPECT_THROW(cfg.validate(30, 32), std::invalid_argument);
  cfg.classes = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = NetConfig{};
  cfg.feature_dim = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Forward, ZeroWeightsGiveUniformProbs) {
  NetConfig cfg;
  cfg.classes = 3;
  auto p = param_layout(cfg);
  const auto out = forward(cfg, p, ImagePlane(8, 8));
  for (double v : out.probs) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Forward, ShapesAndSoftmaxRows) {
  NetConfig cfg;
  const auto p = init_params(cfg, 2);
  const auto out = forward(cfg, p, noise_image(16, 8, 1));
  EXPECT_EQ(out.height, 16);
  EXPECT_EQ(out.width, 8);
  EXPECT_EQ(out.logits.size(), 16u * 8 * cfg.classes);
  EXPECT_EQ(out.features.size(), 16u * 8 * cfg.feature_dim);
  for (std::size_t px = 0; px < 16 * 8; ++px) {
    EXPECT_NEAR(out.probs[px * 2] + out.probs[px * 2 + 1], 1.0, 1e-12);
  }
}

TEST(Forward, LogitsAreHeadOfFeatures) {
  NetConfig cfg;
  const auto p = init_params(cfg, 5);
  auto q = p;
  Rng r(8);
  for (double& v : q.values()) v += 0.05 * r.normal();
  const auto out = forward(cfg, q, noise_image(8, 8, 2));
  const auto w = q.view(q.segment("head.w"));
  const auto b = q.view(q.segment("head.b"));
  const int D = cfg.feature_dim, L = cfg.classes;
  for (std::size_t px = 0; px < 64; ++px) {
    for (int l = 0; l < L; ++l) {
      double s = b[l];
      for (int d = 0; d < D; ++d) s += out.features[px * D + d] * w[d * L + l];
      EXPECT_NEAR(out.logits[px * L + l], s, 1e-12);
    }
  }
}

TEST(Forward, DeterministicAndShapeChecked) {
  NetConfig cfg;
  const auto p = init_params(cfg, 6);
  const auto x = noise_image(8, 8, 3);
  EXPECT_EQ(forward(cfg, p, x).probs, forward(cfg, p, x).probs);
  EXPECT_THROW(forward(cfg, p, ImagePlane(6, 8)), std::invalid_argument);
  EXPECT_THROW(forward(cfg, p, ImagePlane(8, 8, 2)), std::invalid_argument);
}

TEST(Forward, GradientSpotChecks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LE(check::network_grad_case(check::LossKind::kPixel, seed).rel_error, 1e-4);
  }
}

TEST(PseudoLabels, ArgmaxWithLowIndexTies) {
  const std::vector<double> probs{0.9, 0.1, 0.5, 0.5, 0.2, 0.8};
  const auto m = pseudo_labels(probs, 1, 3, 2);
  EXPECT_EQ(m.labels, (std::vector<int>{0, 0, 1}));
}

TEST(PseudoLabels, MatchesBruteForceScan) {
  Rng r(13);
  std::vector<double> probs(4 * 4 * 3);
  for (double& v : probs) v = std::floor(r.uniform() * 4) / 4;  // frequent ties
  const auto m = pseudo_labels(probs, 4, 4, 3);
  for (int p = 0; p < 16; ++p) {
    int best = 0;
    for (int c = 1; c < 3; ++c) {
      if (probs[p * 3 + c] > probs[p * 3 + best]) best = c;
    }
    EXPECT_EQ(m.labels[p], best);
  }
}

TEST(Checkpoint, RoundTripAndRejectsGarbage) {
  const fs::path dir = fs::temp_directory_path() / "mdcs_ckpt_test";
  fs::create_directories(dir);
  NetConfig cfg;
  cfg.feature_dim = 4;
  Checkpoint ck{cfg, init_params(cfg, 1)};
  for (double& v : ck.params.values()) v = static_cast<float>(v);  // stored as f32
  save_checkpoint(dir / "m.mdcp", ck);
  const auto back = load_checkpoint(dir / "m.mdcp");
  EXPECT_EQ(back.cfg, cfg);
  EXPECT_EQ(back.params, ck.params);

  std::ofstream(dir / "bad.mdcp", std::ios::binary) << "MDCPxx";
  EXPECT_THROW(load_checkpoint(dir / "bad.mdcp"), FormatError);
  fs::remove_all(dir);
}

}  // namespace
