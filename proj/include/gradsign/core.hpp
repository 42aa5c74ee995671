#ifndef GRADSIGN_CORE_HPP
#define GRADSIGN_CORE_HPP

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradsign {

/// H x W x C pixel grid, row-major, channel-interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, fill) {}

  size_t size() const { return data.size(); }

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& other) const {
    return height == other.height && width == other.width &&
           channels == other.channels;
  }

  std::string shape_string() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" +
           std::to_string(channels);
  }

  /// Checks the type invariants: data length matches the declared shape and
  /// every element lies in [0, 1].
  void validate() const;
};

double clamp01(double v);

/// max_i |a_i - b_i| over all pixels; shapes must match.
double linf_distance(const Image& a, const Image& b);

bool images_equal(const Image& a, const Image& b);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

ShapeError shape_mismatch(const std::string& where, const std::string& expected,
                          const std::string& actual);

/// Mixes a base seed with stream indices so every worker, image and transform
/// stream owns an independent deterministic RNG stream.
uint64_t derive_seed(uint64_t base, uint64_t a);
uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b);

/// FNV-1a over raw bytes. Used for image hashes in query logs and for config
/// hashes in reports.
uint64_t fnv1a(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t hash_image(const Image& img);

/// Deterministic RNG. Distributions are implemented here rather than with
/// std::*_distribution so pinned test values do not depend on the standard
/// library version.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return (engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection-free modulo is biased for huge n; all uses here have n far
    // below 2^32 so the bias is below 2^-32.
    return engine_() % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Box-Muller; consumes exactly two uniforms per call.
  double normal(double mean = 0.0, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
};

/// Runs fn(i) for i in [0, count) on `workers` threads; results are collected
/// by index so parallel and serial runs produce identical output.
template <typename T, typename Fn>
std::vector<T> parallel_map(size_t count, int workers, Fn fn);

}  // namespace gradsign

#include <atomic>
#include <mutex>
#include <thread>

namespace gradsign {

template <typename T, typename Fn>
std::vector<T> parallel_map(size_t count, int workers, Fn fn) {
  std::vector<T> results(count);
  if (workers <= 1 || count <= 1) {
    for (size_t i = 0; i < count; ++i) results[i] = fn(i);
    return results;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        results[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  int n = std::min<int>(workers, static_cast<int>(count));
  threads.reserve(n);
  for (int t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return results;
}

}  // namespace gradsign

#endif  // GRADSIGN_CORE_HPP
