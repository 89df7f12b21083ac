#ifndef CBM_RNG_HPP
#define CBM_RNG_HPP

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace cbm {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Hashes an ordered tuple of counters into one 64-bit word.
constexpr std::uint64_t counter_hash(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k));
  return h;
}

// Maps 53 random bits to the open interval (0,1); never returns 0 or 1.
constexpr double bits_to_open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

// Stream tags keep independent uses of one seed from colliding.
enum class Stream : std::uint64_t {
  kGateNoise = 1,
  kInit = 2,
  kShuffle = 3,
  kSplit = 4,
  kSynthetic = 5,
};

// Counter-based uniform draw in (0,1), keyed by (seed, stream, a, b, c, d).
// Reproducible regardless of evaluation order.
inline double counter_uniform(std::uint64_t seed, Stream stream, std::uint64_t a,
                              std::uint64_t b = 0, std::uint64_t c = 0,
                              std::uint64_t d = 0) {
  return bits_to_open_unit(
      counter_hash({seed, static_cast<std::uint64_t>(stream), a, b, c, d}));
}

// Sequential generator over the same counter construction. Used where a
// running stream is more natural (shuffles, initialization).
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, Stream stream, std::uint64_t substream = 0)
      : seed_(seed), stream_(stream), substream_(substream) {}

  std::uint64_t next_u64() {
    return counter_hash({seed_, static_cast<std::uint64_t>(stream_), substream_, counter_++});
  }

  double uniform() { return bits_to_open_unit(next_u64()); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Box-Muller; consumes two uniforms per call.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t seed_;
  Stream stream_;
  std::uint64_t substream_;
  std::uint64_t counter_ = 0;
};

// Fisher-Yates with the counter stream; identical output on every platform.
template <typename Container>
void deterministic_shuffle(Container& items, CounterRng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace cbm

#endif  // CBM_RNG_HPP
