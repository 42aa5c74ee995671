#include "gradsign/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace gradsign {

void Image::validate() const {
  size_t expected = static_cast<size_t>(height) * width * channels;
  if (height <= 0 || width <= 0 || (channels != 1 && channels != 3)) {
    throw std::invalid_argument("invalid image shape " + shape_string());
  }
  if (data.size() != expected) {
    throw std::invalid_argument("image data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_string());
  }
  for (double v : data) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("image pixel out of [0,1]: " +
                                  std::to_string(v));
    }
  }
}

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

double linf_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) {
    throw shape_mismatch("linf_distance", a.shape_string(), b.shape_string());
  }
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  }
  return m;
}

bool images_equal(const Image& a, const Image& b) {
  return a.same_shape(b) && a.data == b.data;
}

ShapeError shape_mismatch(const std::string& where,
                          const std::string& expected,
                          const std::string& actual) {
  return ShapeError(where + ": expected shape " + expected + ", got " + actual);
}

namespace {
uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

uint64_t derive_seed(uint64_t base, uint64_t a) {
  return splitmix64(splitmix64(base) ^ splitmix64(a + 0x1234567FULL));
}

uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b) {
  return derive_seed(derive_seed(base, a), b);
}

uint64_t fnv1a(const void* bytes, size_t len, uint64_t seed) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t hash_image(const Image& img) {
  int32_t shape[3] = {img.height, img.width, img.channels};
  uint64_t h = fnv1a(shape, sizeof(shape));
  return fnv1a(img.data.data(), img.data.size() * sizeof(double), h);
}

double Rng::normal(double mean, double stddev) {
  // Avoid log(0); uniform() can return exactly 0.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(2.0 * M_PI * u2);
}

}  // namespace gradsign
