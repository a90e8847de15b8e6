#pragma once

// Little-endian primitives for the project's binary file formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cprobe/core/errors.h"

namespace cprobe {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian stores");

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    offset_ += n;
  }
  template <typename T>
  void pod(T value) {
    bytes(&value, sizeof(T));
  }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f32(float v) { pod(v); }
  void f64(double v) { pod(v); }
  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(std::span<const float> values) { bytes(values.data(), values.size_bytes()); }

  std::uint64_t offset() const { return offset_; }

 private:
  std::ostream& out_;
  std::uint64_t offset_ = 0;
};

// Reads from an in-memory image; every read past the end raises a
// FormatError carrying the offset at which the read started.
class BinaryReader {
 public:
  explicit BinaryReader(std::span<const std::uint8_t> image) : image_(image) {}

  std::uint64_t offset() const { return offset_; }
  std::uint64_t remaining() const { return image_.size() - offset_; }

  void bytes(void* dst, std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated file while reading ") + what, offset_);
    }
    std::memcpy(dst, image_.data() + offset_, n);
    offset_ += n;
  }
  template <typename T>
  T pod(const char* what) {
    T v;
    bytes(&v, sizeof(T), what);
    return v;
  }
  std::uint32_t u32(const char* what) { return pod<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return pod<std::uint64_t>(what); }
  float f32(const char* what) { return pod<float>(what); }
  double f64(const char* what) { return pod<double>(what); }
  std::string string(const char* what, std::uint32_t max_len = 1u << 20) {
    const std::uint64_t at = offset_;
    const std::uint32_t n = u32(what);
    if (n > max_len) throw FormatError(std::string("implausible length for ") + what, at);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  void floats(std::span<float> dst, const char* what) { bytes(dst.data(), dst.size_bytes(), what); }

 private:
  std::span<const std::uint8_t> image_;
  std::uint64_t offset_ = 0;
};

// Whole-file helpers. Throw InputError when the file cannot be opened.
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);
void write_file_text(const std::string& path, const std::string& text);

}  // namespace cprobe
