#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace pfsm {

// Every random draw in the system comes from a Pcg32 stream derived from a
// root seed plus a textual label such as "init/block0.attn.q.weight" or
// "shuffle/clientA/p/r3/e0". Streams are independent of draw order elsewhere,
// so serial and parallel schedules see identical values.
//
// Generator: PCG-XSH-RR 32/64. Label hashing: FNV-1a 64 mixed with the root
// seed through two rounds of splitmix64. Uniform doubles use 53 bits.

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

// Seed material for the stream identified by (root, label).
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

class Pcg32 {
 public:
  Pcg32(std::uint64_t init_state, std::uint64_t init_seq);

  std::uint32_t next_u32();
  // Unbiased integer in [0, bound).
  std::uint32_t next_below(std::uint32_t bound);
  // 53-bit uniform in [0, 1).
  double next_double();
  double uniform(double lo, double hi);
  // Box-Muller; the paired draw is cached.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_below(static_cast<std::uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Pcg32 make_stream(std::uint64_t root, std::string_view label);

}  // namespace pfsm
