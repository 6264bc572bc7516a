#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/rng.hpp"

namespace testsupport {

// Central-difference check of d(loss)/d(leaf) against the analytic gradient.
// Probes up to `max_coords` coordinates per leaf; returns the worst relative
// error, with rel = |a - f| / max(1, |a|, |f|).
inline double fd_check(const std::function<mtl::VarPtr()>& make_loss,
                       const std::vector<mtl::VarPtr>& leaves, int max_coords = 24,
                       double eps = 1e-6, uint64_t seed = 99) {
  for (auto& l : leaves) l->zero_grad();
  auto loss = make_loss();
  mtl::backward(loss);

  mtl::Rng rng(seed);
  double worst = 0.0;
  for (auto& l : leaves) {
    int64_t n = l->val.numel();
    int probes = static_cast<int>(std::min<int64_t>(n, max_coords));
    for (int p = 0; p < probes; ++p) {
      int64_t i = (n <= max_coords) ? p : rng.below(n);
      double keep = l->val[i];
      l->val[i] = keep + eps;
      double up = make_loss()->val[0];
      l->val[i] = keep - eps;
      double dn = make_loss()->val[0];
      l->val[i] = keep;
      double fd = (up - dn) / (2.0 * eps);
      double an = l->grad[i];
      double rel = std::fabs(an - fd) / std::max({1.0, std::fabs(an), std::fabs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline mtl::Tensor random_tensor(mtl::Shape s, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  mtl::Tensor t(std::move(s));
  mtl::Rng rng(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace testsupport
