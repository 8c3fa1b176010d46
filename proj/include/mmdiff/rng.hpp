#pragma once

#include <cstdint>
#include <random>

namespace mmdiff {

// Seedable random stream. Streams derived with split() are decorrelated from
// the parent and from each other, so chains and workers can each own one.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  // Index in [0, n).
  std::size_t below(std::size_t n);

  Rng split(std::uint64_t stream) const;
  std::uint64_t seed() const { return seed_; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace mmdiff
