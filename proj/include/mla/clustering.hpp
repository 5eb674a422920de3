#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "mla/tensor.hpp"

namespace mla {

// Symmetric n x n distances with a zero diagonal, row-major.
struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> d;

  double operator()(std::size_t i, std::size_t j) const { return d[i * n + j]; }
};

inline constexpr int kNoise = -1;

struct PseudoLabels {
  std::vector<int> labels;  // -1 noise, otherwise [0, K)
  int num_clusters = 0;
};

// d(i, j) = 1 - f_i . f_j clamped to [0, 2]. Throws ContractError on non-finite input.
DistanceMatrix pairwise_cosine_distance(const Tensor& features);

// k-reciprocal Jaccard distance on unit features: neighbour sets from
// mutual k1-nearest lists (expanded by their k1/2 sets), soft membership
// weights exp(-d), query expansion over k2 neighbours, then
// 1 - sum(min) / sum(max). Values in [0, 1], zero diagonal.
DistanceMatrix jaccard_distance(const Tensor& features, int k1 = 20, int k2 = 6);

using DistanceFn = std::function<DistanceMatrix(const Tensor&)>;

// Core points have at least min_pts points (themselves included) within eps.
// Clusters are seeded in index order; a border point keeps the first cluster
// that reaches it, which is the one seeded by the lowest-index core point.
PseudoLabels dbscan(const DistanceMatrix& dist, double eps, int min_pts);

struct ClusterSummary {
  int num_clusters = 0;
  std::vector<std::size_t> sizes;
  std::size_t noise = 0;
  double noise_fraction = 0.0;
};
ClusterSummary cluster_summary(const PseudoLabels& labels);

// Relabels clusters by order of first occurrence; noise stays -1.
PseudoLabels canonical_relabel(const PseudoLabels& labels);

// `index,label` rows.
void write_labels_csv(const std::filesystem::path& path, const PseudoLabels& labels);

}  // namespace mla
