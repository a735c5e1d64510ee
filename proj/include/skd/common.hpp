#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace skd {

// 2-D grayscale image, row-major, values expected in [0,1].
struct Image {
  int h = 0;
  int w = 0;
  std::vector<float> v;

  Image() = default;
  Image(int h_, int w_, float fill = 0.f) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  float& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  float at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
  size_t size() const { return v.size(); }

  bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
  bool operator==(const Image& o) const { return h == o.h && w == o.w && v == o.v; }
};

inline float clamp01(float x) { return std::min(1.f, std::max(0.f, x)); }

// Snap a value to the 8-bit grid used by the on-disk PGM format.
inline float quantize8(float x) { return std::round(clamp01(x) * 255.f) / 255.f; }

inline void quantize8(Image& img) {
  for (auto& x : img.v) x = quantize8(x);
}

// --- deterministic RNG -----------------------------------------------------
//
// splitmix64-based generator. Bit-stable across platforms, unlike the
// standard library distributions.

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // decorrelate nearby seeds
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  int range_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Box-Muller; always consumes exactly two uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (size_t i = xs.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(xs[i - 1], xs[j]);
    }
  }

 private:
  uint64_t state_;
};

// --- hashing ---------------------------------------------------------------

inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

// Stable seed derivation for independent substreams.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t ordinal = 0) {
  uint64_t h = fnv1a(tag);
  h = fnv1a(&base, sizeof(base), h);
  h = fnv1a(&ordinal, sizeof(ordinal), h);
  return h;
}

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace skd
