#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace capsule {

/// Deterministic generator whose output depends only on the seed.
///
/// The standard <random> distributions are implementation-defined, so the
/// uniform helpers here map raw 64-bit draws to values explicitly. That keeps
/// synthetic datasets and augmented images byte-identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] (inclusive).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
};

/// FNV-1a over bytes, folded through splitmix so nearby inputs decorrelate.
class SeedHasher {
 public:
  explicit SeedHasher(std::uint64_t seed) { add(seed); }

  SeedHasher& add(std::uint64_t value) {
    for (int i = 0; i < 8; ++i) {
      byte(static_cast<unsigned char>(value >> (8 * i)));
    }
    return *this;
  }

  SeedHasher& add(std::string_view text) {
    for (char c : text) byte(static_cast<unsigned char>(c));
    add(static_cast<std::uint64_t>(text.size()));
    return *this;
  }

  std::uint64_t digest() const { return Rng(hash_).next(); }

 private:
  void byte(unsigned char b) {
    hash_ ^= b;
    hash_ *= 0x100000001B3ULL;
  }

  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
  SeedHasher h(seed);
  for (auto p : parts) h.add(p);
  return h.digest();
}

}  // namespace capsule
