#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mla {

struct GradCheckEntry {
  std::string op;
  double max_error = 0.0;  // worst relative error over seeds and inputs
  int seeds = 0;
};

// Finite-difference checks (h = 1e-5, f64) of every differentiable op and
// attention stage, each on `seeds` random instances.
std::vector<GradCheckEntry> run_gradient_suite(int seeds = 5);

inline constexpr double kGradCheckTolerance = 1e-4;

}  // namespace mla
