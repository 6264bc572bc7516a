#include "mtl/curriculum.hpp"

#include <cmath>
#include <stdexcept>

namespace mtl::curriculum {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

double log_point(double x, double y, double sigma) {
  double r2 = x * x + y * y;
  double s2 = sigma * sigma;
  return -(1.0 / (kPi * s2 * s2)) * (1.0 - r2 / (2.0 * s2)) * std::exp(-r2 / (2.0 * s2));
}

LoGKernel log_kernel(double sigma, int radius) {
  if (sigma <= 0.0) throw std::invalid_argument("log_kernel: sigma must be positive");
  if (radius < 1) throw std::invalid_argument("log_kernel: radius must be >= 1");
  int k = 2 * radius + 1;
  LoGKernel out;
  out.sigma = sigma;
  out.radius = radius;
  out.weights = Tensor({k, k});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      out.weights[i * k + j] = log_point(i - radius, j - radius, sigma);
  double mean = 0.0;
  for (int64_t i = 0; i < out.weights.numel(); ++i) mean += out.weights[i];
  mean /= static_cast<double>(out.weights.numel());
  for (int64_t i = 0; i < out.weights.numel(); ++i) out.weights[i] -= mean;
  return out;
}

void CurriculumSchedule::validate() const {
  if (sigma0 <= 0.0 || sigma_min <= 0.0) throw std::invalid_argument("curriculum: sigma values must be positive");
  if (sigma0 < sigma_min) throw std::invalid_argument("curriculum: sigma0 must be >= sigma_min");
  if (decay_factor <= 0.0 || decay_factor >= 1.0)
    throw std::invalid_argument("curriculum: decay_factor must be in (0,1)");
  if (interval_epochs < 1) throw std::invalid_argument("curriculum: interval_epochs must be >= 1");
  if (radius < 1) throw std::invalid_argument("curriculum: radius must be >= 1");
}

double schedule_sigma(const CurriculumSchedule& s, int epoch) {
  if (epoch < 0) throw std::invalid_argument("schedule_sigma: epoch must be >= 0");
  double v = s.sigma0 * std::pow(s.decay_factor, static_cast<double>(epoch / s.interval_epochs));
  return std::max(s.sigma_min, v);
}

bool curriculum_active(const CurriculumSchedule& s, int epoch) {
  if (!s.enabled) return false;
  return schedule_sigma(s, epoch) > s.sigma_min;
}

CurriculumFilter filter_for_epoch(const CurriculumSchedule& s, int epoch) {
  CurriculumFilter f;
  if (!curriculum_active(s, epoch)) return f;
  f.identity = false;
  f.sigma = schedule_sigma(s, epoch);
  f.kernel = log_kernel(f.sigma, s.radius).weights;
  return f;
}

VarPtr apply_curriculum(const VarPtr& feature_map, const CurriculumFilter& f) {
  if (f.identity) return feature_map;
  return depthwise_conv_const(feature_map, f.kernel);
}

VarPtr apply_curriculum_rows(const VarPtr& rows, const CurriculumFilter& f) {
  if (f.identity) return rows;
  const auto& s = rows->val.shape();
  int64_t d = s.back();
  auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(d))));
  if (side * side != d)
    throw std::invalid_argument("apply_curriculum_rows: feature width is not a perfect square");
  int64_t n = rows->val.numel() / d;
  auto maps = reshape(rows, {n, 1, side, side});
  auto filtered = depthwise_conv_const(maps, f.kernel);
  return reshape(filtered, s);
}

}  // namespace mtl::curriculum
