#include "mla/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "mla/errors.hpp"

namespace mla {

DistanceMatrix pairwise_cosine_distance(const Tensor& features) {
  if (features.rank() != 2) throw DimensionError("features must be [n, d], got " + shape_str(features.shape()));
  const std::size_t n = features.dim(0), dim = features.dim(1);
  const auto f = features.data();
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (!std::isfinite(f[i])) {
      throw ContractError("non-finite feature value in row " + std::to_string(i / dim));
    }
  }
  DistanceMatrix out{n, std::vector<double>(n * n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += f[i * dim + k] * f[j * dim + k];
      const double v = std::clamp(1.0 - dot, 0.0, 2.0);
      out.d[i * n + j] = v;
      out.d[j * n + i] = v;
    }
  }
  return out;
}

DistanceMatrix jaccard_distance(const Tensor& features, int k1, int k2) {
  if (k1 < 1 || k2 < 1) throw ContractError("k-reciprocal neighbourhood sizes must be positive");
  const DistanceMatrix cosine = pairwise_cosine_distance(features);
  const std::size_t n = cosine.n;
  DistanceMatrix out{n, std::vector<double>(n * n, 0.0)};
  if (n == 0) return out;
  // Squared Euclidean distance between unit rows.
  std::vector<double> d(n * n);
  for (std::size_t i = 0; i < n * n; ++i) d[i] = 2.0 * cosine.d[i];

  std::vector<std::vector<std::size_t>> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    rank[i].resize(n);
    for (std::size_t j = 0; j < n; ++j) rank[i][j] = j;
    std::stable_sort(rank[i].begin(), rank[i].end(), [&](std::size_t a, std::size_t b) {
      if (a == i || b == i) return a == i && b != i;
      return d[i * n + a] < d[i * n + b];
    });
  }
  auto reciprocal = [&](std::size_t i, std::size_t k) {
    const std::size_t top = std::min(n, k + 1);
    std::vector<std::size_t> out_set;
    for (std::size_t r = 0; r < top; ++r) {
      const std::size_t j = rank[i][r];
      const auto& back = rank[j];
      if (std::find(back.begin(), back.begin() + static_cast<std::ptrdiff_t>(top), i) !=
          back.begin() + static_cast<std::ptrdiff_t>(top)) {
        out_set.push_back(j);
      }
    }
    return out_set;
  };

  const std::size_t K1 = static_cast<std::size_t>(k1);
  const std::size_t half = static_cast<std::size_t>(std::lround(k1 / 2.0));
  std::vector<double> V(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> base = reciprocal(i, K1);
    std::vector<std::size_t> expanded = base;
    for (std::size_t c : base) {
      const auto cand = reciprocal(c, half);
      std::size_t overlap = 0;
      for (std::size_t j : cand)
        if (std::find(base.begin(), base.end(), j) != base.end()) ++overlap;
      if (3 * overlap > 2 * cand.size()) expanded.insert(expanded.end(), cand.begin(), cand.end());
    }
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()), expanded.end());
    double total = 0.0;
    for (std::size_t j : expanded) total += std::exp(-d[i * n + j]);
    for (std::size_t j : expanded) V[i * n + j] = std::exp(-d[i * n + j]) / total;
  }
  if (k2 > 1) {
    const std::size_t K2 = std::min(n, static_cast<std::size_t>(k2));
    std::vector<double> q(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < K2; ++r) {
        const std::size_t j = rank[i][r];
        for (std::size_t k = 0; k < n; ++k) q[i * n + k] += V[j * n + k];
      }
      for (std::size_t k = 0; k < n; ++k) q[i * n + k] /= static_cast<double>(K2);
    }
    V.swap(q);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double lo = 0.0, hi = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        lo += std::min(V[i * n + k], V[j * n + k]);
        hi += std::max(V[i * n + k], V[j * n + k]);
      }
      const double v = hi > 0.0 ? 1.0 - lo / hi : 1.0;
      out.d[i * n + j] = out.d[j * n + i] = v;
    }
  return out;
}

PseudoLabels dbscan(const DistanceMatrix& dist, double eps, int min_pts) {
  if (!(eps > 0.0)) throw ContractError("dbscan eps must be positive");
  if (min_pts < 1) throw ContractError("dbscan min_pts must be at least 1");
  const std::size_t n = dist.n;
  std::vector<std::vector<std::size_t>> neighbours(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (dist(i, j) <= eps) neighbours[i].push_back(j);

  std::vector<bool> core(n);
  for (std::size_t i = 0; i < n; ++i) core[i] = neighbours[i].size() >= static_cast<std::size_t>(min_pts);

  PseudoLabels out{std::vector<int>(n, kNoise), 0};
  std::vector<std::size_t> frontier;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (!core[seed] || out.labels[seed] != kNoise) continue;
    const int id = out.num_clusters++;
    out.labels[seed] = id;
    frontier.assign(1, seed);
    while (!frontier.empty()) {
      const std::size_t p = frontier.back();
      frontier.pop_back();
      for (std::size_t q : neighbours[p]) {
        if (out.labels[q] != kNoise) continue;
        out.labels[q] = id;
        if (core[q]) frontier.push_back(q);
      }
    }
  }
  return out;
}

ClusterSummary cluster_summary(const PseudoLabels& labels) {
  ClusterSummary s;
  s.num_clusters = labels.num_clusters;
  s.sizes.assign(static_cast<std::size_t>(std::max(labels.num_clusters, 0)), 0);
  for (int l : labels.labels) {
    if (l == kNoise) {
      ++s.noise;
    } else if (l < 0 || l >= labels.num_clusters) {
      throw ContractError("label " + std::to_string(l) + " outside [-1, " + std::to_string(labels.num_clusters) + ")");
    } else {
      ++s.sizes[static_cast<std::size_t>(l)];
    }
  }
  s.noise_fraction = labels.labels.empty() ? 0.0 : static_cast<double>(s.noise) / labels.labels.size();
  return s;
}

PseudoLabels canonical_relabel(const PseudoLabels& labels) {
  std::unordered_map<int, int> remap;
  PseudoLabels out{std::vector<int>(labels.labels.size(), kNoise), 0};
  for (std::size_t i = 0; i < labels.labels.size(); ++i) {
    const int l = labels.labels[i];
    if (l == kNoise) continue;
    auto [it, inserted] = remap.try_emplace(l, out.num_clusters);
    if (inserted) ++out.num_clusters;
    out.labels[i] = it->second;
  }
  return out;
}

void write_labels_csv(const std::filesystem::path& path, const PseudoLabels& labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,label\n";
  for (std::size_t i = 0; i < labels.labels.size(); ++i) out << i << ',' << labels.labels[i] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace mla
