#include "mtl/rng.hpp"

#include <cmath>
#include <numeric>

namespace mtl {

uint64_t fnv1a(const void* p, size_t n, uint64_t h) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a_str(std::string_view s, uint64_t h) { return fnv1a(s.data(), s.size(), h); }

uint64_t mix_seed(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the pair
  uint64_t z = a + 0x9e3779b97f4a7c15ull + (b << 1 | b >> 63);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

int64_t Rng::below(int64_t n) {
  if (n <= 0) return 0;
  return static_cast<int64_t>(next() % static_cast<uint64_t>(n));
}

std::vector<int> shuffled_indices(int n, uint64_t seed) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  return idx;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// sin on [-pi/2, pi/2], Taylor through x^13
double sin_core(double r) {
  double r2 = r * r;
  double s = 1.0 / 6227020800.0;  // 1/13!
  s = s * r2 - 1.0 / 39916800.0;
  s = s * r2 + 1.0 / 362880.0;
  s = s * r2 - 1.0 / 5040.0;
  s = s * r2 + 1.0 / 120.0;
  s = s * r2 - 1.0 / 6.0;
  s = s * r2 + 1.0;
  return r * s;
}

}  // namespace

double stable_sin(double x) {
  double k = std::floor(x / kPi + 0.5);
  double r = x - k * kPi;
  double s = sin_core(r);
  long long ki = static_cast<long long>(k);
  return (ki % 2 == 0) ? s : -s;
}

double stable_cos(double x) { return stable_sin(x + kPi / 2.0); }

}  // namespace mtl
