#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "metadcseg/datakit.hpp"

namespace {

using namespace metadcseg;
namespace fs = std::filesystem;

// Reference SplitMix64 written from the published constants.
std::uint64_t splitmix_ref(std::uint64_t& s) {
  s += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mdcs_datakit_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST(Rng, ReferenceVector) {
  EXPECT_EQ(Rng(0).next(), 0xE220A8397B1DCDAFULL);
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xDEADBEEFULL}) {
    Rng r(seed);
    std::uint64_t s = seed;
    for (int i = 0; i < 100; ++i) ASSERT_EQ(r.next(), splitmix_ref(s));
  }
}

TEST(Rng, DeriveXorsNextOutput) {
  Rng a(7);
  Rng child = a.derive(3);
  std::uint64_t s = 7;
  const std::uint64_t seed = splitmix_ref(s) ^ 3;
  EXPECT_EQ(child.state(), seed);
  Rng b = Rng::stream(7, 3);
  EXPECT_EQ(b.state(), seed);
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
  double m = 0, v = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    m += z;
    v += z * z;
  }
  EXPECT_NEAR(m / n, 0.0, 0.05);
  EXPECT_NEAR(v / n, 1.0, 0.05);
}

TEST(GenSynthetic, DeterministicAndNonEmpty) {
  const auto a = gen_synthetic(100, 32, 32, 11);
  const auto b = gen_synthetic(100, 32, 32, 11);
  ASSERT_EQ(a.size(), 100u);
  double area = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.items[i].image, b.items[i].image);
    EXPECT_EQ(a.items[i].clean, b.items[i].clean);
    EXPECT_GE(a.items[i].clean.count_positive(), 1u);
    for (double v : a.items[i].image.values) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      ASSERT_EQ(v * 255.0, std::round(v * 255.0));
    }
    area += static_cast<double>(a.items[i].clean.count_positive()) / 1024.0;
  }
  area /= 100;
  EXPECT_GE(area, 0.05);
  EXPECT_LE(area, 0.5);
  EXPECT_NE(gen_synthetic(10, 32, 32, 12).items[0].image, a.items[0].image);
}

TEST(GenSynthetic, IntensitiesSeparateForeground) {
  const auto ds = gen_synthetic(20, 32, 32, 3);
  double fg = 0, bg = 0;
  std::size_t nf = 0, nb = 0;
  for (const auto& it : ds.items) {
    for (std::size_t p = 0; p < it.clean.pixels(); ++p) {
      (it.clean.labels[p] ? fg : bg) += it.image.values[p];
      ++(it.clean.labels[p] ? nf : nb);
    }
  }
  EXPECT_NEAR(fg / nf, 0.75, 0.02);
  EXPECT_NEAR(bg / nb, 0.25, 0.02);
}

TEST(Split, SizesAndPartition) {
  const auto ds = split(gen_synthetic(100, 16, 16, 1), 0.02, 0.2, 9);
  EXPECT_EQ(ds.indices(SplitTag::kMetaVal).size(), 2u);
  EXPECT_EQ(ds.indices(SplitTag::kTest).size(), 20u);
  EXPECT_EQ(ds.indices(SplitTag::kTrain).size(), 78u);
  std::set<std::size_t> all;
  for (auto t : {SplitTag::kTrain, SplitTag::kMetaVal, SplitTag::kTest}) {
    for (auto i : ds.indices(t)) EXPECT_TRUE(all.insert(i).second);
  }
  EXPECT_EQ(all.size(), 100u);
}

TEST(Split, SeededAndTestSetStable) {
  const auto base = gen_synthetic(50, 16, 16, 2);
  EXPECT_EQ(split(base, 0.04, 0.2, 5).tags, split(base, 0.04, 0.2, 5).tags);
  EXPECT_NE(split(base, 0.04, 0.2, 5).tags, split(base, 0.04, 0.2, 6).tags);
  EXPECT_EQ(split(base, 0.04, 0.2, 5).indices(SplitTag::kTest), split(base, 0.1, 0.2, 5).indices(SplitTag::kTest));
}

TEST(Split, DropsNoisyOutsideTrain) {
  auto base = gen_synthetic(20, 16, 16, 2);
  for (auto& it : base.items) it.noisy = it.clean;
  const auto ds = split(base, 0.1, 0.2, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.items[i].noisy.has_value(), ds.tags[i] == SplitTag::kTrain);
  }
}

TEST(Split, RejectsBadFractions) {
  const auto base = gen_synthetic(20, 16, 16, 2);
  EXPECT_THROW(split(base, 0.01, 0.2, 1), std::invalid_argument);  // metaval rounds to 0
  EXPECT_THROW(split(base, 0.5, 0.5, 1), std::invalid_argument);
  EXPECT_THROW(split(base, 0.0, 0.2, 1), std::invalid_argument);
}

TEST_F(TempDir, PgmRoundTrip) {
  const auto ds = gen_synthetic(10, 16, 24, 4);
  write_pgm(dir_ / "a.pgm", ds.items[0].image);
  EXPECT_EQ(read_pgm(dir_ / "a.pgm"), ds.items[0].image);
  write_mask_pgm(dir_ / "m.pgm", ds.items[0].clean);
  EXPECT_EQ(read_mask_pgm(dir_ / "m.pgm"), ds.items[0].clean);

  std::ifstream in(dir_ / "m.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(bytes.substr(0, 2), "P5");
  for (std::size_t k = bytes.size() - 16 * 24; k < bytes.size(); ++k) {
    const auto b = static_cast<unsigned char>(bytes[k]);
    ASSERT_TRUE(b == 0 || b == 255);
  }
}

TEST_F(TempDir, PgmTruncatedAndMalformed) {
  write_pgm(dir_ / "a.pgm", ImagePlane(8, 8, 1, 0.5));
  fs::resize_file(dir_ / "a.pgm", fs::file_size(dir_ / "a.pgm") - 3);
  EXPECT_THROW(read_pgm(dir_ / "a.pgm"), FormatError);
  std::ofstream(dir_ / "b.pgm", std::ios::binary) << "P2\n8 8\n255\n";
  try {
    read_pgm(dir_ / "b.pgm");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(read_pgm(dir_ / "missing.pgm"), std::runtime_error);
}

TEST_F(TempDir, RawRoundTripAndTruncation) {
  RawArray a{{2, 3, 4}, {}};
  for (int i = 0; i < 24; ++i) a.data.push_back(0.1f * i - 1.0f);
  write_raw_f32(dir_ / "x.raw", a);
  EXPECT_EQ(read_raw_f32(dir_ / "x.raw"), a);
  EXPECT_EQ(fs::file_size(dir_ / "x.raw"), 4u + 4u + 12u + 96u);
  fs::resize_file(dir_ / "x.raw", 50);
  EXPECT_THROW(read_raw_f32(dir_ / "x.raw"), FormatError);
  std::ofstream(dir_ / "y.raw", std::ios::binary) << "MDF2";
  EXPECT_THROW(read_raw_f32(dir_ / "y.raw"), FormatError);
}

TEST_F(TempDir, DatasetRoundTrip) {
  auto ds = split(gen_synthetic(12, 16, 16, 8), 0.1, 0.25, 3);
  for (auto i : ds.indices(SplitTag::kTrain)) ds.items[i].noisy = ds.items[i].clean;
  save_dataset(dir_, ds);
  EXPECT_TRUE(fs::exists(dir_ / "split.json"));
  const auto back = load_dataset(dir_);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.tags, ds.tags);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.items[i].id, ds.items[i].id);
    EXPECT_EQ(back.items[i].image, ds.items[i].image);
    EXPECT_EQ(back.items[i].clean, ds.items[i].clean);
    EXPECT_EQ(back.items[i].noisy, ds.items[i].noisy);
  }
}

}  // namespace
