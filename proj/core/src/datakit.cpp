#include "metadcseg/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace metadcseg {

FormatError::FormatError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
      offset_(offset) {}

std::uint64_t Rng::next() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::derive(std::uint64_t stream_id) { return Rng(next() ^ stream_id); }

Rng Rng::stream(std::uint64_t seed, std::uint64_t stream_id) {
  return Rng(seed).derive(stream_id);
}

ImagePlane::ImagePlane(int h, int w, int c, double fill)
    : height(h), width(w), channels(c),
      values(static_cast<std::size_t>(h) * w * c, fill) {}

LabelMask::LabelMask(int h, int w, int fill)
    : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

std::size_t LabelMask::count_positive() const {
  return static_cast<std::size_t>(
      std::count_if(labels.begin(), labels.end(), [](int v) { return v != 0; }));
}

const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kMetaVal: return "metaval";
    case SplitTag::kTest: return "test";
  }
  return "?";
}

std::vector<std::size_t> Dataset::indices(SplitTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] == tag) out.push_back(i);
  }
  return out;
}

namespace {

struct Shape {
  bool ellipse;
  double cy, cx, ry, rx;

  bool contains(int y, int x) const {
    const double dy = y - cy;
    const double dx = x - cx;
    if (ellipse) return (dy * dy) / (ry * ry) + (dx * dx) / (rx * rx) <= 1.0;
    return std::abs(dy) <= ry && std::abs(dx) <= rx;
  }
};

double quantize(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

Dataset gen_synthetic(int n, int height, int width, std::uint64_t seed) {
  if (n < 10) throw std::invalid_argument("gen_synthetic: n must be >= 10");
  if (height <= 0 || width <= 0) throw std::invalid_argument("gen_synthetic: bad dims");

  Rng rng = Rng::stream(seed, streams::kDatagen);
  const double side = std::min(height, width);

  Dataset ds;
  ds.items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Draw order per item: shape count, then per shape (kind, cy, cx, ry, rx),
    // then one normal per pixel in raster order.
    const int shapes = 1 + static_cast<int>(rng.below(2));
    std::vector<Shape> parts;
    for (int s = 0; s < shapes; ++s) {
      Shape sh{};
      sh.ellipse = rng.below(2) == 0;
      sh.cy = rng.uniform(0.25, 0.75) * (height - 1);
      sh.cx = rng.uniform(0.25, 0.75) * (width - 1);
      sh.ry = rng.uniform(0.1, 0.25) * side;
      sh.rx = rng.uniform(0.1, 0.25) * side;
      parts.push_back(sh);
    }

    DataItem item;
    item.id = i;
    item.clean = LabelMask(height, width);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        for (const Shape& sh : parts) {
          if (sh.contains(y, x)) {
            item.clean.at(y, x) = 1;
            break;
          }
        }
      }
    }
    if (item.clean.count_positive() == 0) {
      const Shape& sh = parts.front();
      item.clean.at(static_cast<int>(std::lround(sh.cy)), static_cast<int>(std::lround(sh.cx))) = 1;
    }

    item.image = ImagePlane(height, width, 1);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double base = item.clean.at(y, x) ? 0.75 : 0.25;
        item.image.at(y, x) = quantize(base + 0.1 * rng.normal());
      }
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

Dataset split(Dataset ds, double metaval_frac, double test_frac, std::uint64_t seed) {
  if (!(metaval_frac > 0.0 && metaval_frac < 1.0) || !(test_frac > 0.0 && test_frac < 1.0) ||
      metaval_frac + test_frac >= 1.0) {
    throw std::invalid_argument("split: fractions must lie in (0,1) and sum to < 1");
  }
  const std::size_t n = ds.items.size();
  const auto n_meta = static_cast<std::size_t>(std::llround(metaval_frac * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n)));
  if (n_meta == 0) throw std::invalid_argument("split: metaval split would be empty");
  if (n_meta + n_test >= n) throw std::invalid_argument("split: train split would be empty");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, streams::kShuffle);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(order[i - 1], order[j]);
  }

  ds.tags.assign(n, SplitTag::kTrain);
  for (std::size_t k = 0; k < n_test; ++k) ds.tags[order[k]] = SplitTag::kTest;
  for (std::size_t k = n_test; k < n_test + n_meta; ++k) ds.tags[order[k]] = SplitTag::kMetaVal;
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.tags[i] != SplitTag::kTrain) ds.items[i].noisy.reset();
  }
  return ds;
}

}  // namespace metadcseg
