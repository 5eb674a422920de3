#pragma once

#include <random>
#include <string>

#include "mla/ops.hpp"
#include "mla/tensor.hpp"

namespace mla {

using Rng = std::mt19937_64;

// Kaiming-normal convolution kernel [kh, kw, c_in, c_out], std = sqrt(2 / fan_in).
Tensor kaiming_kernel(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out, Rng& rng);
Tensor standard_normal(Shape shape, Rng& rng);

inline Tensor conv1x1(const Tensor& x, const Tensor& kernel) { return ops::conv2d(x, kernel, std::nullopt, 1, 0); }

// Batch norm over the channel (last) axis with learnable affine and running stats.
struct Norm {
  Tensor gamma;
  Tensor beta;
  ops::BatchNormStats stats;

  static Norm make(std::size_t channels);
  Tensor operator()(const Tensor& x, bool training) { return ops::batch_norm(x, gamma, beta, stats, training); }
  void collect(ParameterList& params, ParameterList& buffers, const std::string& prefix) const;
};

}  // namespace mla
