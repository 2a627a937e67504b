#pragma once

// Little-endian binary primitives shared by the checkpoint and dataset
// formats. Readers throw FormatError on truncation or bad headers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrn::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class U>
void put_uint(std::ostream& os, U v) {
  std::array<char, sizeof(U)> b{};
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b.data(), b.size());
}

template <class U>
U get_uint(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), b.size()))
    throw FormatError(std::string("truncated file while reading ") + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void put_u32(std::ostream& os, std::uint32_t v) { put_uint(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_uint(os, v); }
inline std::uint32_t get_u32(std::istream& is, const char* what) { return get_uint<std::uint32_t>(is, what); }
inline std::uint64_t get_u64(std::istream& is, const char* what) { return get_uint<std::uint64_t>(is, what); }

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what, std::uint32_t max_len = 1u << 24) {
  const auto n = get_u32(is, what);
  if (n > max_len) throw FormatError(std::string("implausible string length while reading ") + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError(std::string("truncated file while reading ") + what);
  return s;
}

// Scalars are written at their own width (4 bytes for float, 8 for double).
template <class S>
void put_scalars(std::ostream& os, const S* data, std::size_t n) {
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < n; ++i) put_uint(os, std::bit_cast<U>(data[i]));
}

template <class S>
void get_scalars(std::istream& is, S* data, std::size_t n, const char* what) {
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<S>(get_uint<U>(is, what));
}

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& kind) {
  char got[8];
  if (!is.read(got, 8)) throw FormatError(kind + ": truncated file (no header)");
  if (std::memcmp(got, magic, 8) != 0) throw FormatError(kind + ": bad magic, not a " + kind + " file");
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "' for reading");
  return is;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  return os;
}

}  // namespace rrn::io
