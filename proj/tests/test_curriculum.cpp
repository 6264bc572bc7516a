#include <cmath>

#include "doctest.h"
#include "mtl/curriculum.hpp"
#include "support/fdcheck.hpp"

using namespace mtl;
using namespace mtl::curriculum;
using testsupport::fd_check;
using testsupport::random_tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;

// independent zero-padded depthwise convolution
Tensor conv_oracle(const Tensor& x, const Tensor& k) {
  int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  int64_t ks = k.size(0), r = ks / 2;
  Tensor out({n, c, h, w});
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          double acc = 0.0;
          for (int64_t u = 0; u < ks; ++u)
            for (int64_t v = 0; v < ks; ++v) {
              int64_t ii = i + u - r, jj = j + v - r;
              if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
              acc += x[((in * c + ic) * h + ii) * w + jj] * k[u * ks + v];
            }
          out[((in * c + ic) * h + i) * w + j] = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("LoG point values") {
  CHECK(log_point(0, 0, 1.0) == doctest::Approx(-1.0 / kPi).epsilon(1e-12));
  CHECK(std::fabs(log_point(1, 1, 1.0)) < 1e-15);  // zero crossing at x^2+y^2 = 2 sigma^2
  CHECK(log_point(0, 0, 2.0) == doctest::Approx(-1.0 / (kPi * 16.0)).epsilon(1e-12));
}

TEST_CASE("LoG kernel zero-sum and symmetry over parameter grid") {
  for (double sigma : {0.3, 0.5, 1.0, 1.7, 2.4, 3.0}) {
    for (int radius : {1, 2, 3, 4, 5}) {
      auto k = log_kernel(sigma, radius);
      int n = 2 * radius + 1;
      double sum = 0.0;
      for (int64_t i = 0; i < k.weights.numel(); ++i) sum += k.weights[i];
      CHECK(std::fabs(sum) < 1e-12);
      // point symmetry and transpose symmetry, exact
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          CHECK(k.weights[i * n + j] == k.weights[(n - 1 - i) * n + (n - 1 - j)]);
          CHECK(k.weights[i * n + j] == k.weights[j * n + i]);
        }
      CHECK(k.weights[radius * n + radius] < 0.0);
    }
  }
  CHECK_THROWS(log_kernel(0.0, 2));
  CHECK_THROWS(log_kernel(1.0, 0));
}

TEST_CASE("sigma schedule") {
  CurriculumSchedule s;
  s.sigma0 = 1.0;
  s.decay_factor = 0.9;
  s.interval_epochs = 5;
  s.sigma_min = 0.4;
  CHECK(schedule_sigma(s, 0) == doctest::Approx(1.0));
  CHECK(schedule_sigma(s, 12) == doctest::Approx(0.81).epsilon(1e-12));
  double prev = 1e9;
  int jumps = 0;
  for (int e = 0; e < 100; ++e) {
    double v = schedule_sigma(s, e);
    CHECK(v <= prev + 1e-15);
    CHECK(v >= s.sigma_min);
    if (e > 0 && v != prev) {
      CHECK(e % s.interval_epochs == 0);  // jumps only at interval boundaries
      ++jumps;
    }
    prev = v;
  }
  CHECK(jumps > 0);
  CHECK_THROWS(schedule_sigma(s, -1));
}

TEST_CASE("curriculum_active") {
  CurriculumSchedule s;
  s.sigma0 = 1.0;
  s.sigma_min = 0.4;
  CHECK(curriculum_active(s, 0));
  CHECK_FALSE(curriculum_active(s, 500));
  CurriculumSchedule flat = s;
  flat.sigma0 = 0.4;
  for (int e : {0, 3, 17}) CHECK_FALSE(curriculum_active(flat, e));
  CurriculumSchedule off = s;
  off.enabled = false;
  CHECK_FALSE(curriculum_active(off, 0));
}

TEST_CASE("apply_curriculum identity mode") {
  auto x = leaf(random_tensor({2, 3, 8, 8}, 42));
  auto y = apply_curriculum(x, CurriculumFilter::off());
  CHECK(y.get() == x.get());
}

TEST_CASE("zero-sum kernel annihilates constant maps in the interior") {
  CurriculumSchedule s;
  auto f = filter_for_epoch(s, 0);
  REQUIRE_FALSE(f.identity);
  int r = s.radius;
  auto x = leaf(Tensor({1, 2, 12, 12}, 3.7));
  auto y = apply_curriculum(x, f);
  for (int64_t c = 0; c < 2; ++c)
    for (int i = r; i < 12 - r; ++i)
      for (int j = r; j < 12 - r; ++j) CHECK(std::fabs(y->val[(c * 12 + i) * 12 + j]) < 1e-12);
}

TEST_CASE("apply_curriculum matches nested-loop convolution oracle") {
  CurriculumFilter f;
  f.identity = false;
  f.sigma = 1.0;
  f.kernel = log_kernel(1.0, 2).weights;
  Tensor ramp({1, 1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) ramp[i * 8 + j] = 0.1 * i + 0.03 * j;
  auto y = apply_curriculum(leaf(ramp), f);
  Tensor want = conv_oracle(ramp, f.kernel);
  CHECK(max_abs_diff(y->val, want) < 1e-10);

  Tensor rnd = random_tensor({2, 3, 9, 7}, 5);
  auto y2 = apply_curriculum(leaf(rnd), f);
  CHECK(max_abs_diff(y2->val, conv_oracle(rnd, f.kernel)) < 1e-10);
}

TEST_CASE("apply_curriculum is linear") {
  CurriculumFilter f;
  f.identity = false;
  f.kernel = log_kernel(0.8, 2).weights;
  Tensor a = random_tensor({1, 2, 8, 8}, 6), b = random_tensor({1, 2, 8, 8}, 7);
  double ca = 1.7, cb = -0.4;
  Tensor mix(a.shape());
  for (int64_t i = 0; i < mix.numel(); ++i) mix[i] = ca * a[i] + cb * b[i];
  auto fa = apply_curriculum(leaf(a), f)->val;
  auto fb = apply_curriculum(leaf(b), f)->val;
  auto fm = apply_curriculum(leaf(mix), f)->val;
  for (int64_t i = 0; i < mix.numel(); ++i)
    CHECK(std::fabs(fm[i] - (ca * fa[i] + cb * fb[i])) < 1e-8);
}

TEST_CASE("apply_curriculum gradient matches finite differences") {
  CurriculumFilter f;
  f.identity = false;
  f.kernel = log_kernel(1.0, 2).weights;
  auto x = leaf(random_tensor({1, 2, 7, 7}, 8), true);
  double err = fd_check([&] { return mean_all(mul(apply_curriculum(x, f), apply_curriculum(x, f))); }, {x}, 32);
  CHECK(err < 1e-4);
  CHECK(err < 1e-7);
}

TEST_CASE("apply_curriculum rejects maps smaller than the kernel") {
  CurriculumFilter f;
  f.identity = false;
  f.kernel = log_kernel(1.0, 3).weights;  // 7x7
  auto x = leaf(random_tensor({1, 1, 5, 5}, 9));
  CHECK_THROWS(apply_curriculum(x, f));
}

TEST_CASE("apply_curriculum_rows round-trips the reshape") {
  CurriculumFilter f;
  f.identity = false;
  f.kernel = log_kernel(1.0, 2).weights;
  Tensor rows = random_tensor({3, 64}, 10);
  auto y = apply_curriculum_rows(leaf(rows), f);
  CHECK(y->val.shape() == Shape{3, 64});
  Tensor maps = rows.reshaped({3, 1, 8, 8});
  Tensor want = conv_oracle(maps, f.kernel);
  CHECK(max_abs_diff(y->val, want.reshaped({3, 64})) < 1e-12);
  CHECK_THROWS(apply_curriculum_rows(leaf(random_tensor({3, 60}, 11)), f));
}
