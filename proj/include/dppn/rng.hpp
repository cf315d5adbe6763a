#pragma once
// Counter-based splittable RNG. Every consumer of randomness in this codebase
// derives a named stream from (seed, name), so runs are reproducible and
// streams never alias across modules (dataset noise vs. init vs. gumbel etc.).

#include <cstdint>
#include <cmath>
#include <string_view>
#include <utility>
#include <vector>

namespace dppn {

namespace detail {

// SplitMix64 finalizer. Bijective on 64-bit words.
inline uint64_t mix64(uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a(uint64_t h, const void* data, size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

// One independent random stream. Counter mode: output i is a pure function of
// (key, i), so identical (seed, name) pairs give identical sequences on every
// platform.
class RngStream {
 public:
  explicit RngStream(uint64_t key) : key_(key) {}

  static RngStream from(uint64_t seed, std::string_view name) {
    uint64_t h = 0xCBF29CE484222325ull;
    h = detail::fnv1a(h, &seed, sizeof(seed));
    h = detail::fnv1a(h, name.data(), name.size());
    return RngStream(detail::mix64(h));
  }

  // Child stream; independent of the parent's consumption position.
  RngStream derive(std::string_view name) const {
    uint64_t h = key_;
    h = detail::fnv1a(h, name.data(), name.size());
    return RngStream(detail::mix64(h));
  }

  RngStream derive(std::string_view name, uint64_t index) const {
    uint64_t h = key_;
    h = detail::fnv1a(h, name.data(), name.size());
    h = detail::fnv1a(h, &index, sizeof(index));
    return RngStream(detail::mix64(h));
  }

  uint64_t next_u64() { return detail::mix64(key_ + 0x9E3779B97F4A7C15ull * ++ctr_); }

  // Uniform in [0, 1). 24 explicit mantissa bits, exact as float.
  float next_float() {
    return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
  }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller; second value of each pair is cached.
  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    float u1 = next_float();
    float u2 = next_float();
    if (u1 < 1e-12f) u1 = 1e-12f;
    float r = std::sqrt(-2.0f * std::log(u1));
    float a = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  float normal(float mean, float stddev) { return mean + stddev * normal(); }

  // Gumbel(0,1) noise. Computed in double: the clamp endpoints [1e-9, 1-1e-9]
  // are not representable around 1.0 in float, which would leave the upper
  // clamp a no-op and -log(-log(u)) one rounding away from inf.
  float gumbel() {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    if (u < 1e-9) u = 1e-9;
    if (u > 1.0 - 1e-9) u = 1.0 - 1e-9;
    return static_cast<float>(-std::log(-std::log(u)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = next_u64() % i;
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t key_;
  uint64_t ctr_ = 0;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace dppn
