#include "mla/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mla/errors.hpp"

namespace mla {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0)) throw ContractError("finite_diff_check step must be positive");
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  {
    Tensor y = f(leaf);
    y.backward();
  }
  const std::vector<double> analytic = leaf.grad();

  NoGradGuard no_grad;
  auto values = leaf.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f(leaf).item();
    values[i] = saved - step;
    const double down = f(leaf).item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace mla
