#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "tapf/errors.hpp"

namespace tapf::detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

// Little-endian reader that reports truncation with the defect offset.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& what)
      : bytes_(bytes), what_(what) {}

  std::size_t pos() const { return pos_; }

  const char* take(std::size_t n, const char* field) {
    if (pos_ + n > bytes_.size())
      throw FormatError(what_ + ": truncated reading " + field, pos_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint8_t u8(const char* field) { return std::uint8_t(*take(1, field)); }
  std::uint16_t u16(const char* field) {
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(take(2, field));
    return std::uint16_t(p[0] | (std::uint16_t(p[1]) << 8));
  }
  std::uint32_t u32(const char* field) {
    const unsigned char* p =
        reinterpret_cast<const unsigned char*>(take(4, field));
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
           (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  }
  std::uint64_t u64(const char* field) {
    std::uint64_t lo = u32(field), hi = u32(field);
    return lo | (hi << 32);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open file for writing: " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw Error("short write: " + path);
}

}  // namespace tapf::detail
