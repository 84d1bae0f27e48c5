#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"

namespace bdlab::binio {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  static_assert(sizeof u == sizeof v);
  std::char_traits<char>::copy(reinterpret_cast<char*>(&u), reinterpret_cast<const char*>(&v), 4);
  write_u32(os, u);
}

inline uint32_t read_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated payload reading " + what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline uint16_t read_u16(std::istream& is, const std::string& what) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw IoError("truncated payload reading " + what);
  return static_cast<uint16_t>(static_cast<uint16_t>(b[0]) | (static_cast<uint16_t>(b[1]) << 8));
}

inline float read_f32(std::istream& is, const std::string& what) {
  const uint32_t u = read_u32(is, what);
  float v;
  std::char_traits<char>::copy(reinterpret_cast<char*>(&v), reinterpret_cast<const char*>(&u), 4);
  return v;
}

inline void read_bytes(std::istream& is, std::vector<unsigned char>& buf, size_t n,
                       const std::string& what) {
  buf.resize(n);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    throw IoError("truncated payload reading " + what);
}

inline void expect_magic(std::istream& is, const char* magic, const std::string& what) {
  char got[4];
  if (!is.read(got, 4) || std::string(got, 4) != magic)
    throw IoError("malformed header: bad magic in " + what);
}

}  // namespace bdlab::binio
