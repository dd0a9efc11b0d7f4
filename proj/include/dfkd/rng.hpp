#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "dfkd/tensor.hpp"

namespace dfkd {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xCBF29CE484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

// Counter-based random stream. One master seed derives a named stream per
// component, so components draw independently and ablations differ only where
// intended. The (key, counter) pair serializes into run state, which makes
// interrupted runs resumable mid-sequence.
class RngStream {
 public:
  RngStream() = default;
  RngStream(uint64_t key, uint64_t counter) : key_(key), counter_(counter) {}

  static RngStream derive(uint64_t master_seed, std::string_view name) {
    return RngStream(splitmix64(splitmix64(master_seed) ^ fnv1a64(name)), 0);
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

  uint64_t next_u64() { return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * counter_++); }

  // Uniform in [0, 1).
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; two uniforms per draw, no cached spare,
  // so the consumed counter count per call is fixed.
  double next_normal() {
    double u1 = 1.0 - next_uniform();  // (0, 1]
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n), rejection sampled.
  int64_t next_below(int64_t n) {
    if (n <= 0) throw ValueError("next_below: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return static_cast<int64_t>(v % un);
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, T mean = T(0), T stddev = T(1)) {
    for (auto& v : t.data) v = mean + stddev * static_cast<T>(next_normal());
  }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = last - first;
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = next_below(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace dfkd
