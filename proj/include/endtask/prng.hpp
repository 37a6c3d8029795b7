#pragma once

// Portable pseudo-random streams.
//
// Generator: xoshiro256** (Blackman & Vigna), state filled by SplitMix64.
// Substreams are keyed by (root seed, label, index):
//
//   key   = splitmix64(root ^ fnv1a64(label)) + index * 0x9E3779B97F4A7C15
//   state = four successive splitmix64 outputs starting from splitmix64(key)
//
// Integer and uniform draws are bit-identical on every platform. Normal draws
// go through std::log/std::cos and inherit the platform libm.

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace endtask {

inline constexpr std::string_view kPrngAlgorithm = "xoshiro256starstar-splitmix64";

enum class Stream { init, data, masking, meta_head, permutation };

std::string_view stream_label(Stream s);

std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t fnv1a64(std::string_view text);

// Stable child seed for a (seed, index) pair; used to hand distinct seeds to
// heads and auxiliary datasets.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng substream(std::uint64_t root_seed, Stream label, std::uint64_t index);

  std::uint64_t next_u64();
  // 53-bit uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Unbiased integer in [0, n), rejection sampling on the top of the range.
  std::uint64_t below(std::uint64_t n);
  // Box-Muller; consumes two uniforms per call.
  double normal();
  bool bernoulli(double p);

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t s_[4];
};

}  // namespace endtask
