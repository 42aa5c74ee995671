#ifndef GRADSIGN_BINIO_HPP
#define GRADSIGN_BINIO_HPP

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradsign::binio {

// Little-endian readers/writers, byte by byte, so the on-disk formats are
// host-independent.

inline void write_u8(std::ostream& out, uint8_t v) {
  out.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_u64(std::ostream& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void write_i32(std::ostream& out, int32_t v) {
  write_u32(out, static_cast<uint32_t>(v));
}

inline void write_f64(std::ostream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(out, bits);
}

inline void write_f64_array(std::ostream& out, const std::vector<double>& v) {
  for (double x : v) write_f64(out, x);
}

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline uint8_t read_u8(std::istream& in, const std::string& what) {
  int c = in.get();
  if (c == EOF) throw ParseError("truncated file while reading " + what);
  return static_cast<uint8_t>(c);
}

inline uint32_t read_u32(std::istream& in, const std::string& what) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(read_u8(in, what)) << (8 * i);
  return v;
}

inline uint64_t read_u64(std::istream& in, const std::string& what) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(read_u8(in, what)) << (8 * i);
  return v;
}

inline int32_t read_i32(std::istream& in, const std::string& what) {
  return static_cast<int32_t>(read_u32(in, what));
}

inline double read_f64(std::istream& in, const std::string& what) {
  uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

inline std::vector<double> read_f64_array(std::istream& in, size_t n,
                                          const std::string& what) {
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = read_f64(in, what);
  return v;
}

inline void expect_magic(std::istream& in, const std::string& magic,
                         const std::string& format_name) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || got != magic) {
    throw ParseError(format_name + ": bad magic (expected \"" + magic + "\")");
  }
}

}  // namespace gradsign::binio

#endif  // GRADSIGN_BINIO_HPP
