#pragma once

#include "mtl/autodiff.hpp"
#include "mtl/tensor.hpp"

namespace mtl::curriculum {

// Laplacian-of-Gaussian point value at real offset (x, y).
double log_point(double x, double y, double sigma);

// Discrete LoG kernel sampled at integer offsets, mean-subtracted so the
// weights sum to zero exactly.
struct LoGKernel {
  double sigma = 0.0;
  int radius = 0;
  Tensor weights;  // (2r+1) x (2r+1)
};

LoGKernel log_kernel(double sigma, int radius);

struct CurriculumSchedule {
  double sigma0 = 1.0;
  double decay_factor = 0.9;
  int interval_epochs = 5;
  double sigma_min = 0.4;
  int radius = 3;
  bool enabled = true;

  void validate() const;
};

double schedule_sigma(const CurriculumSchedule& s, int epoch);
bool curriculum_active(const CurriculumSchedule& s, int epoch);

// Per-epoch filter state handed to model forward passes. Identity when the
// schedule has run out (or the curriculum is disabled / in eval).
struct CurriculumFilter {
  bool identity = true;
  double sigma = 0.0;
  Tensor kernel;

  static CurriculumFilter off() { return {}; }
};

CurriculumFilter filter_for_epoch(const CurriculumSchedule& s, int epoch);

// Depthwise zero-padded convolution with the kernel; identity mode returns
// the input node unchanged. Participates in backprop.
VarPtr apply_curriculum(const VarPtr& feature_map, const CurriculumFilter& f);

// Same filter applied to row vectors of width d by viewing each row as a
// sqrt(d) x sqrt(d) single-channel map. Requires d to be a perfect square.
VarPtr apply_curriculum_rows(const VarPtr& rows, const CurriculumFilter& f);

}  // namespace mtl::curriculum
