#pragma once

#include <cstdint>
#include <span>

#include "mla/clustering.hpp"
#include "mla/tensor.hpp"

namespace mla {

// One unit-norm representative per cluster, used as fixed classifier weights.
struct MemoryDictionary {
  Tensor centroids;  // [K, d], no gradient
  double tau = 0.05;
  double mu = 0.1;

  std::size_t size() const { return centroids.defined() ? centroids.dim(0) : 0; }
};

// Centroid i is the feature of one uniformly drawn member of cluster i.
// Throws EmptyClusteringError when K == 0.
MemoryDictionary init_memory(const Tensor& features, const PseudoLabels& labels, std::uint64_t seed,
                             double tau = 0.05, double mu = 0.1);

// Mean over rows of -log softmax((x . C_k) / tau)[target].
Tensor cluster_nce_loss(const Tensor& x, std::span<const int> targets, const MemoryDictionary& mem);

// For each cluster in the batch, C <- mu C + (1 - mu) f* with f* its member
// least similar to C, then C is renormalized. Ties keep the earlier row.
void batch_hard_update(MemoryDictionary& mem, const Tensor& batch_features, std::span<const int> batch_targets);

}  // namespace mla
