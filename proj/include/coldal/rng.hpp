#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace coldal {

// All randomness in the project is counter-based: a 64-bit key names a
// stream and a counter indexes into it. Streams for different purposes are
// derived with derive_key, so skipping a branch (e.g. the unlabeled term
// when beta == 0) never shifts anyone else's draws, and resuming a run
// needs no RNG state beyond the keys.

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t id) {
  return mix64(key ^ mix64(id + 0x632be59bd9b4e019ULL));
}

template <class... Ids>
constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t id,
                                   Ids... rest) {
  return derive_key(derive_key(key, id), static_cast<std::uint64_t>(rest)...);
}

// FNV-1a, for deriving streams from parameter/stage names.
constexpr std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Top 53 bits -> [0, 1).
constexpr double unit_from(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_ + ++counter_); }

  double unit() { return unit_from(next_u64()); }  // [0, 1)

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  double normal() {  // Box-Muller, one variate per call
    double u1;
    do {
      u1 = unit();
    } while (u1 == 0.0);
    const double u2 = unit();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform in [0, n), rejection sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  bool bernoulli(std::uint64_t num, std::uint64_t den) {
    return below(den) < num;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Stateless element access into a keyed stream (used by dropout masks).
constexpr double unit_at(std::uint64_t key, std::uint64_t index) {
  return unit_from(mix64(key + index + 1));
}

}  // namespace coldal
