#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace cmkd::rng {

// splitmix64 finalizer; the basis of all randomness in the project.
inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based stream: state advances through the splitmix64 sequence.
// Streams derived from distinct (seed, tags...) tuples are independent, so
// generation keyed by (seed, sample_index) is order- and thread-independent.
struct Stream {
  std::uint64_t state = 0;
  bool has_spare = false;
  double spare = 0.0;

  std::uint64_t next_u64() {
    std::uint64_t out = mix(state);
    state += 0x9e3779b97f4a7c15ULL;
    return out;
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  int next_int(int lo, int hi) { // inclusive range
    return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller.
  double next_normal() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare = r * std::sin(a);
    has_spare = true;
    return r * std::cos(a);
  }
};

inline Stream derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t k = mix(seed);
  k = mix(k ^ a);
  k = mix(k ^ b);
  k = mix(k ^ c);
  return Stream{k};
}

template <typename I>
void shuffle(std::vector<I>& v, Stream& s) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(s.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

} // namespace cmkd::rng
