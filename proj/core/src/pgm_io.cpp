#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <algorithm>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "metadcseg/datakit.hpp"

namespace metadcseg {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  return is;
}

struct PgmRaster {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> bytes;
};

/// Header tokens are whitespace separated; '#' starts a comment line.
class PgmHeaderParser {
 public:
  PgmHeaderParser(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  std::string token() {
    skip_space_and_comments();
    std::string tok;
    while (true) {
      const int c = is_.peek();
      if (c == EOF || std::isspace(c) || c == '#') break;
      tok.push_back(static_cast<char>(is_.get()));
      ++offset_;
    }
    if (tok.empty()) throw FormatError(what_ + ": truncated header", offset_);
    return tok;
  }

  int integer() {
    const std::uint64_t at = offset_;
    const std::string tok = token();
    int v = 0;
    for (char ch : tok) {
      if (!std::isdigit(static_cast<unsigned char>(ch)) || v > 100000000) {
        throw FormatError(what_ + ": bad integer '" + tok + "'", at);
      }
      v = v * 10 + (ch - '0');
    }
    return v;
  }

  /// Exactly one whitespace byte separates maxval from the raster.
  void single_space() {
    const int c = is_.get();
    if (c == EOF || !std::isspace(c)) throw FormatError(what_ + ": missing raster separator", offset_);
    ++offset_;
  }

  std::uint64_t offset() const { return offset_; }

 private:
  void skip_space_and_comments() {
    while (true) {
      const int c = is_.peek();
      if (c == '#') {
        while (is_.peek() != EOF && is_.peek() != '\n') {
          is_.get();
          ++offset_;
        }
      } else if (c != EOF && std::isspace(c)) {
        is_.get();
        ++offset_;
      } else {
        return;
      }
    }
  }

  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

PgmRaster read_raster(const fs::path& path) {
  auto is = open_in(path);
  const std::string what = "PGM " + path.string();
  PgmHeaderParser hdr(is, what);
  const std::string magic = hdr.token();
  if (magic != "P5") throw FormatError(what + ": expected P5 magic", 0);
  PgmRaster r;
  r.width = hdr.integer();
  r.height = hdr.integer();
  const std::uint64_t maxval_at = hdr.offset();
  const int maxval = hdr.integer();
  if (maxval != 255) throw FormatError(what + ": maxval must be 255", maxval_at);
  if (r.width <= 0 || r.height <= 0) throw FormatError(what + ": empty raster", maxval_at);
  hdr.single_space();
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
  r.bytes.resize(n);
  is.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(is.gcount());
  if (got != n) throw FormatError(what + ": truncated raster", hdr.offset() + got);
  if (is.peek() != EOF) throw FormatError(what + ": trailing bytes", hdr.offset() + n);
  return r;
}

void write_raster(const fs::path& path, int width, int height, const std::vector<unsigned char>& bytes) {
  auto os = open_out(path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::string numbered(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d.pgm", id);
  return buf;
}

}  // namespace

void write_pgm(const fs::path& path, const ImagePlane& image) {
  if (image.channels != 1) throw std::invalid_argument("write_pgm: single-channel images only");
  std::vector<unsigned char> bytes(image.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.values[i], 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  write_raster(path, image.width, image.height, bytes);
}

ImagePlane read_pgm(const fs::path& path) {
  const PgmRaster r = read_raster(path);
  ImagePlane img(r.height, r.width, 1);
  for (std::size_t i = 0; i < r.bytes.size(); ++i) img.values[i] = r.bytes[i] / 255.0;
  return img;
}

void write_mask_pgm(const fs::path& path, const LabelMask& mask) {
  std::vector<unsigned char> bytes(mask.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.labels[i] ? 255 : 0;
  write_raster(path, mask.width, mask.height, bytes);
}

LabelMask read_mask_pgm(const fs::path& path) {
  const PgmRaster r = read_raster(path);
  LabelMask m(r.height, r.width);
  for (std::size_t i = 0; i < r.bytes.size(); ++i) {
    if (r.bytes[i] != 0 && r.bytes[i] != 255) {
      // Offset of the offending raster byte.
      throw FormatError("mask PGM " + path.string() + ": values must be 0 or 255",
                        fs::file_size(path) - r.bytes.size() + i);
    }
    m.labels[i] = r.bytes[i] ? 1 : 0;
  }
  return m;
}

void write_raw_f32(const fs::path& path, const RawArray& array) {
  std::size_t n = 1;
  for (auto d : array.dims) n *= d;
  if (n != array.data.size()) throw std::invalid_argument("write_raw_f32: dims do not match data");
  auto os = open_out(path);
  detail::write_magic(os, "MDF1");
  detail::write_u32(os, static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) detail::write_u32(os, d);
  for (float v : array.data) detail::write_f32(os, v);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

RawArray read_raw_f32(const fs::path& path) {
  auto is = open_in(path);
  detail::Reader rd(is, "MDF1 " + path.string());
  rd.expect_magic("MDF1");
  RawArray out;
  const std::uint64_t rank_at = rd.offset();
  const std::uint32_t rank = rd.u32();
  if (rank > 16) throw FormatError(rd.what() + ": implausible rank", rank_at);
  std::uint64_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    out.dims.push_back(rd.u32());
    n *= out.dims.back();
  }
  const auto remaining = fs::file_size(path) - rd.offset();
  if (remaining < n * 4) throw FormatError(rd.what() + ": truncated data", rd.offset() + remaining);
  out.data.resize(n);
  rd.read_bytes(out.data.data(), n * 4);
  rd.expect_eof();
  return out;
}

void save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks_clean");
  bool any_noisy = false;
  for (const auto& it : ds.items) any_noisy = any_noisy || it.noisy.has_value();
  if (any_noisy) fs::create_directories(dir / "masks_noisy");

  nlohmann::json split = {{"train", nlohmann::json::array()},
                          {"metaval", nlohmann::json::array()},
                          {"test", nlohmann::json::array()}};
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const auto& it = ds.items[i];
    write_pgm(dir / "images" / numbered(it.id), it.image);
    write_mask_pgm(dir / "masks_clean" / numbered(it.id), it.clean);
    if (it.noisy) write_mask_pgm(dir / "masks_noisy" / numbered(it.id), *it.noisy);
    const SplitTag tag = ds.tags.empty() ? SplitTag::kTrain : ds.tags[i];
    split[to_string(tag)].push_back(it.id);
  }
  std::ofstream os(dir / "split.json");
  os << split.dump() << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "split.json");
  if (!is) throw std::runtime_error("missing split.json in " + dir.string());
  const nlohmann::json split = nlohmann::json::parse(is);

  std::map<int, SplitTag> tag_of;
  for (auto tag : {SplitTag::kTrain, SplitTag::kMetaVal, SplitTag::kTest}) {
    for (int id : split.at(to_string(tag)).get<std::vector<int>>()) {
      if (!tag_of.emplace(id, tag).second) {
        throw std::runtime_error("split.json lists id " + std::to_string(id) + " twice");
      }
    }
  }

  Dataset ds;
  for (const auto& [id, tag] : tag_of) {
    DataItem it;
    it.id = id;
    it.image = read_pgm(dir / "images" / numbered(id));
    it.clean = read_mask_pgm(dir / "masks_clean" / numbered(id));
    const fs::path noisy = dir / "masks_noisy" / numbered(id);
    if (tag == SplitTag::kTrain && fs::exists(noisy)) it.noisy = read_mask_pgm(noisy);
    ds.items.push_back(std::move(it));
    ds.tags.push_back(tag);
  }
  return ds;
}

}  // namespace metadcseg
