#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace fgl {

/// Seeded random stream. All stochastic operations in the library take an
/// Rng explicitly; nothing touches global state.
///
/// The helpers below are written out instead of using <random>
/// distributions so that draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  /// Independent child stream; advances this stream by one draw.
  Rng split() { return Rng(mix(engine_())); }

  std::string state() const;
  void set_state(const std::string& s);

  /// splitmix64 finalizer, used to derive seeds from (seed, index) pairs.
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
    return mix(seed ^ mix(index + 1));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fgl
