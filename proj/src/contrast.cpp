#include "mla/contrast.hpp"

#include <cmath>
#include <random>

#include "mla/errors.hpp"
#include "mla/ops.hpp"

namespace mla {

MemoryDictionary init_memory(const Tensor& features, const PseudoLabels& labels, std::uint64_t seed, double tau,
                             double mu) {
  if (labels.num_clusters == 0) throw EmptyClusteringError("clustering produced no clusters");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.labels.size() != n) {
    throw DimensionError("labels cover " + std::to_string(labels.labels.size()) + " samples, features " +
                         std::to_string(n));
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(labels.num_clusters));
  for (std::size_t i = 0; i < n; ++i)
    if (labels.labels[i] != kNoise) members.at(static_cast<std::size_t>(labels.labels[i])).push_back(i);

  std::seed_seq seq{seed};
  std::mt19937_64 rng(seq);
  const auto f = features.data();
  std::vector<double> c;
  c.reserve(members.size() * d);
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (members[k].empty()) throw ContractError("cluster " + std::to_string(k) + " has no members");
    std::uniform_int_distribution<std::size_t> pick(0, members[k].size() - 1);
    const std::size_t row = members[k][pick(rng)];
    c.insert(c.end(), f.begin() + static_cast<std::ptrdiff_t>(row * d),
             f.begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
  }
  return {Tensor::from({members.size(), d}, std::move(c)), tau, mu};
}

Tensor cluster_nce_loss(const Tensor& x, std::span<const int> targets, const MemoryDictionary& mem) {
  if (x.rank() != 2 || x.dim(1) != mem.centroids.dim(1)) {
    throw DimensionError("features " + shape_str(x.shape()) + " do not match centroids " +
                         shape_str(mem.centroids.shape()));
  }
  Tensor logits = ops::scale(ops::matmul(x, ops::transpose(mem.centroids.detach(), 0, 1)), 1.0 / mem.tau);
  return ops::cross_entropy(logits, targets);
}

void batch_hard_update(MemoryDictionary& mem, const Tensor& batch_features, std::span<const int> batch_targets) {
  const std::size_t b = batch_features.dim(0), d = batch_features.dim(1);
  const std::size_t K = mem.size();
  if (batch_targets.size() != b) throw DimensionError("batch targets do not match batch rows");
  const auto f = batch_features.data();
  auto c = mem.centroids.mutable_data();

  std::vector<std::ptrdiff_t> hardest(K, -1);
  std::vector<double> lowest(K, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    const int t = batch_targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= K) throw ContractError("target " + std::to_string(t) + " out of range");
    const std::size_t k = static_cast<std::size_t>(t);
    double sim = 0.0;
    for (std::size_t j = 0; j < d; ++j) sim += f[i * d + j] * c[k * d + j];
    if (hardest[k] < 0 || sim < lowest[k]) {
      hardest[k] = static_cast<std::ptrdiff_t>(i);
      lowest[k] = sim;
    }
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (hardest[k] < 0) continue;
    const std::size_t row = static_cast<std::size_t>(hardest[k]);
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double& v = c[k * d + j];
      v = mem.mu * v + (1.0 - mem.mu) * f[row * d + j];
      sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t j = 0; j < d; ++j) c[k * d + j] *= inv;
  }
}

}  // namespace mla
