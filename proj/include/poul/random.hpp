#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace poul {

// splitmix64 finalizer; used to derive independent child seeds from one run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Seeded random source. Every distribution is implemented here on top of the
// raw engine bits so trajectories do not depend on the standard library's
// unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  double exponential();
  // Gamma(shape, 1) via Marsaglia-Tsang.
  double gamma(double shape);
  // Uniform integer on [0, n).
  std::size_t index(std::size_t n);

  std::vector<double> dirichlet(std::size_t k, double concentration);

  template <class T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[index(i)]);
    }
  }

  // Child generator on an independent stream.
  Rng split(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace poul
