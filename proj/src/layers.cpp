#include "mla/layers.hpp"

#include <cmath>

namespace mla {

Tensor kaiming_kernel(std::size_t kh, std::size_t kw, std::size_t c_in, std::size_t c_out, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(kh * kw * c_in));
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<double> v(kh * kw * c_in * c_out);
  for (auto& x : v) x = dist(rng);
  return Tensor::from({kh, kw, c_in, c_out}, std::move(v), true);
}

Tensor standard_normal(Shape shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Norm Norm::make(std::size_t channels) {
  return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), ops::BatchNormStats::fresh(channels)};
}

void Norm::collect(ParameterList& params, ParameterList& buffers, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
  buffers.add(prefix + ".running_mean", stats.mean);
  buffers.add(prefix + ".running_var", stats.var);
}

}  // namespace mla
