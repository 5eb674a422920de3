#pragma once

#include <functional>

#include "mla/tensor.hpp"

namespace mla {

// Compares the tape gradient of scalar-valued `f` at `x` against central
// differences (f(x+he) - f(x-he)) / 2h, coordinate by coordinate. Returns
// max |analytic - numeric| / max(1, |analytic|, |numeric|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-5);

}  // namespace mla
