#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace kd {

// splitmix64 finalizer; used to derive independent stream seeds from a run
// seed plus a salt so that shuffling, init and augmentation never share draws.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return splitmix64(mix_seed(a, b) ^ splitmix64(c));
}

// Thin wrapper over a seeded engine. Deterministic for a fixed seed within
// one build (distribution algorithms are implementation-defined across
// standard libraries, which is all the determinism contract requires).
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double normal(double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    return d(gen_);
  }
  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }
  bool bernoulli(double p) {
    std::bernoulli_distribution d(p);
    return d(gen_);
  }
  int64_t below(int64_t n) {
    std::uniform_int_distribution<int64_t> d(0, n - 1);
    return d(gen_);
  }

  std::mt19937_64& engine() { return gen_; }

  std::string serialize() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace kd
