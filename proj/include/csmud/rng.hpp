#pragma once

#include <cstdint>
#include <random>

namespace csmud {

// splitmix64 finalizer (Steele, Lea, Flood 2014). Used to derive
// per-sample seeds from a master seed so that dataset generation is
// reproducible under any parallel schedule.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seed for work item `index` under `master`. Two mixing rounds decorrelate
// adjacent indices; documented so datasets can be regenerated elsewhere.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 1));
}

// Thin wrapper around mt19937_64 with the draw helpers the generators need.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on {+1, -1}.
  double pm_one() { return (engine_() & 1ull) ? 1.0 : -1.0; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
    return d(engine_);
  }

  double normal(double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    return d(engine_);
  }

  double uniform01() {
    std::uniform_real_distribution<double> d(0.0, 1.0);
    return d(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace csmud
