#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stpnet {

// Ground-truth candidate index per text category (infection, count, left, right).
using CategoryLabels = std::array<int, 4>;

// Error taxonomy shared with the C API (codes must stay in sync with stpnet.h).
enum class Status : int {
  Ok = 0,
  InvalidArgument = 1,
  Io = 2,
  Integrity = 3,
  Version = 4,
  Numeric = 5,
  Contract = 6,
  Internal = 7,
};

class Error : public std::runtime_error {
 public:
  Error(Status code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
  Status code() const { return code_; }

 private:
  Status code_;
};

[[noreturn]] inline void fail(Status code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Status code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// SplitMix64: tiny, seedable, and identical on every platform. std:: distributions
// are not bit-stable across library implementations, so everything random in this
// project flows through this generator.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // inclusive range, unbiased enough for desk-scale use
  int uniform_int(int lo, int hi) {
    return lo + int(next_u64() % uint64_t(hi - lo + 1));
  }

  // Box-Muller; second value of each pair is cached so the stream stays cheap.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = next_unit(), u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace stpnet
