#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace rdetect {

using Rng = std::mt19937_64;

/// Deterministic generator keyed by a tuple of integers, e.g. (seed, epoch).
/// Every call site that needs randomness derives its own stream this way so
/// no global generator state exists.
inline Rng keyed_rng(std::initializer_list<std::uint64_t> key) {
  // seed_seq consumes 32-bit words; split each key into two halves.
  std::vector<std::uint32_t> words;
  words.reserve(key.size() * 2);
  for (auto k : key) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

}  // namespace rdetect
