#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mtl {

uint64_t fnv1a(const void* p, size_t n, uint64_t h = 14695981039346656037ull);
uint64_t fnv1a_str(std::string_view s, uint64_t h = 14695981039346656037ull);
uint64_t mix_seed(uint64_t a, uint64_t b);

// Deterministic RNG. The engine (mt19937_64) is fully specified by the
// standard; the distribution transforms are hand-rolled because
// std::uniform_real_distribution et al. differ between standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Irwin-Hall(12) approximation of N(0,1); uses only exactly rounded ops
  // so streams match bitwise across conforming platforms.
  double normal() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += uniform();
    return s - 6.0;
  }
  double normal(double mean, double sd) { return mean + sd * normal(); }

  int64_t below(int64_t n);  // [0, n)

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = below(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

std::vector<int> shuffled_indices(int n, uint64_t seed);

// Polynomial sin/cos with explicit range reduction; bit-stable across libms.
double stable_sin(double x);
double stable_cos(double x);

}  // namespace mtl
