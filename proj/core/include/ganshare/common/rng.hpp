#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace ganshare {

// splitmix64; used to derive independent sub-stream seeds from (seed, tag).
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_str(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic RNG wrapper. Every stochastic routine takes one of these
// explicitly; there is no hidden global state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_(seed), engine_(splitmix64(seed)) {}

  // Independent stream for a named sub-task, e.g. per-image extraction.
  Rng fork(const std::string& tag) const {
    return Rng(splitmix64(base_ ^ hash_str(tag)));
  }
  Rng fork(uint64_t tag) const { return Rng(splitmix64(base_ ^ splitmix64(tag))); }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
    return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  std::mt19937_64& engine() { return engine_; }
  uint64_t seed() const { return base_; }

 private:
  uint64_t base_;
  std::mt19937_64 engine_;
};

}  // namespace ganshare
