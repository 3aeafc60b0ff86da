#include "pfsm/rng.hpp"

#include <cmath>

namespace pfsm {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  return splitmix64(splitmix64(root) ^ fnv1a64(label));
}

Pcg32::Pcg32(std::uint64_t init_state, std::uint64_t init_seq) {
  state_ = 0;
  inc_ = (init_seq << 1u) | 1u;
  next_u32();
  state_ += init_state;
  next_u32();
}

std::uint32_t Pcg32::next_u32() {
  std::uint64_t old = state_;
  state_ = old * 6364136223846793005ull + inc_;
  std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
  std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
  return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
}

std::uint32_t Pcg32::next_below(std::uint32_t bound) {
  // Rejection sampling to stay unbiased.
  std::uint32_t threshold = (-bound) % bound;
  for (;;) {
    std::uint32_t r = next_u32();
    if (r >= threshold) return r % bound;
  }
}

double Pcg32::next_double() {
  std::uint64_t hi = next_u32() >> 5;   // 27 bits
  std::uint64_t lo = next_u32() >> 6;   // 26 bits
  return static_cast<double>((hi << 26) | lo) * (1.0 / 9007199254740992.0);
}

double Pcg32::uniform(double lo, double hi) {
  return lo + (hi - lo) * next_double();
}

double Pcg32::normal(double mean, double stddev) {
  if (has_spare_) {
    has_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1 = next_double();
  double u2 = next_double();
  while (u1 <= 1e-300) u1 = next_double();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return mean + stddev * r * std::cos(theta);
}

Pcg32 make_stream(std::uint64_t root, std::string_view label) {
  std::uint64_t state = derive_seed(root, label);
  std::uint64_t seq = splitmix64(state ^ 0xda3e39cb94b95bdbull);
  return Pcg32(state, seq);
}

}  // namespace pfsm
