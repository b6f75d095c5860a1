#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "metadcseg/datakit.hpp"

namespace metadcseg::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

/// Sequential reader that reports the byte offset of the first failure.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    std::string got(magic.size(), '\0');
    read_bytes(got.data(), got.size());
    if (got != magic) {
      throw FormatError(what_ + ": bad magic, expected '" + std::string(magic) + "'",
                        offset_ - magic.size());
    }
  }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    read_bytes(&v, sizeof v);
    return v;
  }

  float f32() {
    float v = 0;
    read_bytes(&v, sizeof v);
    return v;
  }

  void read_bytes(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != n) {
      throw FormatError(what_ + ": truncated", offset_ + got);
    }
    offset_ += n;
  }

  void expect_eof() {
    if (is_.peek() != std::char_traits<char>::eof()) {
      throw FormatError(what_ + ": trailing bytes", offset_);
    }
  }

  std::uint64_t offset() const { return offset_; }
  const std::string& what() const { return what_; }

 private:
  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

}  // namespace metadcseg::detail
