#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadcseg {

/// Malformed or truncated input file. `offset()` is the byte at which
/// parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// SplitMix64. Every random draw in the library comes from one of these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (consumes two uniforms per call).
  double normal();

  /// Independent stream: Rng(next() ^ stream_id).
  Rng derive(std::uint64_t stream_id);

  /// Rng(seed).derive(stream_id).
  static Rng stream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

/// Documented stream ids.
namespace streams {
inline constexpr std::uint64_t kDatagen = 1;
inline constexpr std::uint64_t kNoise = 2;
inline constexpr std::uint64_t kInit = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kTrain = 5;
}  // namespace streams

/// Row-major H x W x C raster of reals, channels innermost.
struct ImagePlane {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> values;

  ImagePlane() = default;
  ImagePlane(int h, int w, int c = 1, double fill = 0.0);

  double& at(int y, int x, int c = 0) { return values[index(y, x, c)]; }
  double at(int y, int x, int c = 0) const { return values[index(y, x, c)]; }
  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const ImagePlane&) const = default;
};

/// H x W integer class map.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMask() = default;
  LabelMask(int h, int w, int fill = 0);

  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixels() const { return labels.size(); }
  /// Number of pixels with a non-zero label.
  std::size_t count_positive() const;
  bool operator==(const LabelMask&) const = default;
};

enum class SplitTag { kTrain, kMetaVal, kTest };

const char* to_string(SplitTag tag);

struct DataItem {
  int id = 0;
  ImagePlane image;
  LabelMask clean;
  std::optional<LabelMask> noisy;
};

struct Dataset {
  std::vector<DataItem> items;
  std::vector<SplitTag> tags;  // parallel to items; empty until split()

  std::vector<std::size_t> indices(SplitTag tag) const;
  std::size_t size() const { return items.size(); }
};

/// Synthetic shapes corpus: 1-2 filled ellipses or rectangles per image,
/// intensity 0.75 on the shapes and 0.25 elsewhere plus N(0, 0.1) texture,
/// clamped to [0, 1] and quantized to multiples of 1/255 so PGM storage is
/// lossless.
Dataset gen_synthetic(int n, int height, int width, std::uint64_t seed);

/// Seeded shuffle into test / metaval / train (sizes rounded to nearest).
/// Test items come first in the shuffled order, so for a fixed seed the test
/// set does not depend on metaval_frac. Noisy masks on metaval and test items
/// are dropped.
Dataset split(Dataset ds, double metaval_frac, double test_frac, std::uint64_t seed);

// --- file formats -----------------------------------------------------------

/// Binary "P5" PGM with maxval 255. Values are stored as round(255 * v).
void write_pgm(const std::filesystem::path& path, const ImagePlane& image);
ImagePlane read_pgm(const std::filesystem::path& path);
/// Masks use 0 -> 0 and any positive label -> 255.
void write_mask_pgm(const std::filesystem::path& path, const LabelMask& mask);
LabelMask read_mask_pgm(const std::filesystem::path& path);

/// Raw float dump: "MDF1", u32 rank, u32 dims[rank], f32 LE data.
struct RawArray {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
  bool operator==(const RawArray&) const = default;
};
void write_raw_f32(const std::filesystem::path& path, const RawArray& array);
RawArray read_raw_f32(const std::filesystem::path& path);

/// Directory layout: images/%04d.pgm, masks_clean/%04d.pgm,
/// masks_noisy/%04d.pgm (train items only), split.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace metadcseg
