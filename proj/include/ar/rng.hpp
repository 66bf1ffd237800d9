#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

namespace ar {

// splitmix64 step; used for seeding and stream derivation.
uint64_t splitmix64(uint64_t& state);

// Deterministic xoshiro256** stream. The state is four 64-bit words, so it
// serializes bitwise into checkpoints. All floating-point draws are built
// from raw 64-bit outputs with fixed arithmetic, never from
// implementation-defined std distributions.
class RngStream {
 public:
  RngStream();
  explicit RngStream(uint64_t seed);

  uint64_t next_u64();

  // [0, 1) with 53 significant bits.
  double uniform();
  double uniform_range(double lo, double hi);

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();

  // [0, n) without modulo bias.
  int64_t uniform_int(int64_t n);

  std::array<uint64_t, 4> state() const;
  void set_state(const std::array<uint64_t, 4>& s, bool have_spare, double spare);
  bool have_spare() const { return have_spare_; }
  double spare() const { return spare_; }

 private:
  std::array<uint64_t, 4> s_{};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Root generator. Child streams are derived from (seed, purpose, index), so
// every consumer (init, dropout, sampling, shuffling, ...) gets an
// independent stream and enabling/disabling one consumer never shifts
// another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}
  uint64_t seed() const { return seed_; }

  RngStream stream(std::string_view purpose) const;
  RngStream stream(std::string_view purpose, uint64_t index) const;

 private:
  uint64_t seed_;
};

// Fisher-Yates shuffle driven by a stream.
template <typename T>
void shuffle(std::vector<T>& v, RngStream& rng) {
  for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
    int64_t j = rng.uniform_int(i + 1);
    std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
  }
}

}  // namespace ar
