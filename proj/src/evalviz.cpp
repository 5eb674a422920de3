#include "mla/evalviz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mla/dataio.hpp"
#include "mla/errors.hpp"
#include "mla/ops.hpp"

namespace mla {

namespace {

void check_labeled(const LabeledFeatures& s, const char* what) {
  if (s.features.rank() != 2 || s.pids.size() != s.features.dim(0) || s.camids.size() != s.features.dim(0)) {
    throw DimensionError(std::string(what) + " features and labels disagree in length");
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RetrievalMetrics evaluate(const LabeledFeatures& query, const LabeledFeatures& gallery) {
  check_labeled(query, "query");
  check_labeled(gallery, "gallery");
  const std::size_t nq = query.features.dim(0), ng = gallery.features.dim(0), d = query.features.dim(1);
  if (gallery.features.dim(1) != d) throw DimensionError("query and gallery feature widths differ");
  const auto q = query.features.data();
  const auto g = gallery.features.data();

  const int ranks[] = {1, 5, 10};
  RetrievalMetrics m;
  std::map<int, std::size_t> hits;
  double ap_sum = 0.0;
  std::vector<double> sim(ng);
  std::vector<std::size_t> order(ng);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += q[i * d + k] * g[j * d + k];
      sim[j] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });

    std::size_t rank = 0, found = 0, first_hit = 0;
    double precision_sum = 0.0;
    for (std::size_t j : order) {
      const bool same_pid = gallery.pids[j] == query.pids[i];
      if (same_pid && gallery.camids[j] == query.camids[i]) continue;
      ++rank;
      if (same_pid) {
        ++found;
        if (found == 1) first_hit = rank;
        precision_sum += static_cast<double>(found) / static_cast<double>(rank);
      }
    }
    if (found == 0) {
      ++m.excluded_queries;
      continue;
    }
    ++m.valid_queries;
    ap_sum += precision_sum / static_cast<double>(found);
    for (int k : ranks)
      if (first_hit <= static_cast<std::size_t>(k)) ++hits[k];
  }
  const double nv = static_cast<double>(m.valid_queries);
  m.mAP = m.valid_queries ? ap_sum / nv : 0.0;
  for (int k : ranks) m.cmc[k] = m.valid_queries ? static_cast<double>(hits[k]) / nv : 0.0;
  return m;
}

std::string metrics_csv(const RetrievalMetrics& m) {
  std::string s = "metric,value\n";
  s += "mAP," + fmt(m.mAP) + "\n";
  for (const auto& [k, v] : m.cmc) s += "cmc" + std::to_string(k) + "," + fmt(v) + "\n";
  s += "valid_queries," + std::to_string(m.valid_queries) + "\n";
  s += "excluded_queries," + std::to_string(m.excluded_queries) + "\n";
  return s;
}

void write_metrics_csv(const std::filesystem::path& path, const RetrievalMetrics& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << metrics_csv(m);
  if (!out) throw IoError("failed writing " + path.string());
}

Heatmap grad_cam_combine(const Tensor& activations, std::span<const double> grad) {
  if (activations.rank() != 3 || grad.size() != activations.numel()) {
    throw DimensionError("activations must be [h, w, c] with a matching gradient");
  }
  const std::size_t h = activations.dim(0), w = activations.dim(1), c = activations.dim(2), hw = h * w;
  const auto a = activations.data();
  std::vector<double> weight(c, 0.0);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t k = 0; k < c; ++k) weight[k] += grad[p * c + k];
  for (auto& v : weight) v /= static_cast<double>(hw);

  Heatmap hm;
  hm.height = h;
  hm.width = w;
  hm.grid.assign(hw, 0.0);
  double peak = 0.0;
  for (std::size_t p = 0; p < hw; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += weight[k] * a[p * c + k];
    hm.grid[p] = std::max(0.0, s);
    peak = std::max(peak, hm.grid[p]);
  }
  if (peak > 0.0)
    for (auto& v : hm.grid) v /= peak;
  return hm;
}

Heatmap grad_cam_heatmap(const Tensor& image, BackboneParams& params, const CamTarget& target,
                         const std::string& source) {
  if (image.rank() != 3) throw DimensionError("heatmap image must be [h, w, 3], got " + shape_str(image.shape()));
  if (target.cluster) {
    if (!target.memory || !target.memory->centroids.defined()) {
      throw ContractError("a cluster target needs a memory dictionary");
    }
    if (*target.cluster < 0 || static_cast<std::size_t>(*target.cluster) >= target.memory->size()) {
      throw ContractError("cluster id " + std::to_string(*target.cluster) + " outside [0, " +
                          std::to_string(target.memory->size()) + ")");
    }
  }
  Tensor batch = Tensor::from({1, image.dim(0), image.dim(1), image.dim(2)},
                              std::vector<double>(image.data().begin(), image.data().end()));
  Tensor fmap;
  {
    NoGradGuard no_grad;
    fmap = forward_to_featuremap(batch, params, false);
  }
  Tensor leaf = fmap.detach();
  leaf.set_requires_grad(true);
  const Embedding emb = embed_featuremap(leaf, params, false);
  Tensor score;
  std::string description;
  if (target.cluster) {
    const MemoryDictionary& mem = *target.memory;
    const std::size_t d = mem.centroids.dim(1);
    const auto c = mem.centroids.data();
    Tensor centroid = Tensor::from({d, 1}, std::vector<double>(c.begin() + static_cast<std::ptrdiff_t>(*target.cluster * d),
                                                               c.begin() + static_cast<std::ptrdiff_t>((*target.cluster + 1) * d)));
    score = ops::sum(ops::scale(ops::matmul(emb.unit, centroid), 1.0 / mem.tau));
    description = "cluster " + std::to_string(*target.cluster) + " logit";
  } else {
    score = ops::sum(ops::square(emb.raw));
    description = "embedding squared norm";
  }
  score.backward();
  for (const auto& p : params.parameters()) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  const std::vector<double> g = leaf.grad();
  Tensor a = Tensor::from({fmap.dim(1), fmap.dim(2), fmap.dim(3)},
                          std::vector<double>(fmap.data().begin(), fmap.data().end()));
  Heatmap hm = grad_cam_combine(a, g);
  hm.source = source;
  hm.target = description;
  return hm;
}

std::vector<double> bilinear_upsample(std::span<const double> grid, std::size_t h, std::size_t w, std::size_t out_h,
                                      std::size_t out_w) {
  if (grid.size() != h * w || h == 0 || w == 0) throw DimensionError("grid does not match its extent");
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  std::vector<double> out(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const std::size_t y0 = static_cast<std::size_t>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const std::size_t x0 = static_cast<std::size_t>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * grid[y0 * w + x0] + fx * grid[y0 * w + x1];
      const double bottom = (1 - fx) * grid[y1 * w + x0] + fx * grid[y1 * w + x1];
      out[y * out_w + x] = (1 - fy) * top + fy * bottom;
    }
  }
  return out;
}

void export_heatmap(const Heatmap& hm, const Tensor& image, const std::filesystem::path& stem) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("overlay image must be [h, w, 3]");
  const std::filesystem::path csv = stem.string() + ".csv", ppm = stem.string() + ".ppm";
  {
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv.string());
    for (std::size_t y = 0; y < hm.height; ++y) {
      for (std::size_t x = 0; x < hm.width; ++x) out << (x ? "," : "") << fmt(hm.grid[y * hm.width + x]);
      out << '\n';
    }
    if (!out) throw IoError("failed writing " + csv.string());
  }
  write_ppm(ppm, to_ppm(overlay_heatmap(hm, image), image.dim(0), image.dim(1)));
}

std::vector<double> overlay_heatmap(const Heatmap& hm, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("overlay image must be [h, w, 3]");
  const std::size_t H = image.dim(0), W = image.dim(1);
  const auto up = bilinear_upsample(hm.grid, hm.height, hm.width, H, W);
  const auto px = image.data();
  std::vector<double> blend(H * W * 3);
  for (std::size_t i = 0; i < H * W; ++i) {
    const double v = std::clamp(up[i], 0.0, 1.0);
    const double ramp[3] = {v, 0.0, 1.0 - v};
    for (int c = 0; c < 3; ++c) blend[i * 3 + c] = 0.5 * px[i * 3 + c] + 0.5 * ramp[c];
  }
  return blend;
}

LabeledFeatures labeled_features(const std::vector<ImageRecord>& records, BackboneParams& params,
                                 std::size_t batch_size) {
  LabeledFeatures out;
  out.features = extract_features_batched(stack_pixels(records), params, batch_size);
  for (const auto& r : records) {
    out.pids.push_back(r.pid);
    out.camids.push_back(r.camid);
  }
  return out;
}

RetrievalMetrics evaluate_model(BackboneParams& params, const std::vector<ImageRecord>& records,
                                std::size_t batch_size) {
  const auto train = unlabeled_view(records, Split::kTrain);
  if (train.size() > 0) recalibrate_norm_stats(train.pixels, params, batch_size);
  const auto query = select_split(records, Split::kQuery), gallery = select_split(records, Split::kGallery);
  if (query.empty() || gallery.empty()) throw ContractError("evaluation needs query and gallery images");
  return evaluate(labeled_features(query, params, batch_size), labeled_features(gallery, params, batch_size));
}

Heatmap read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Heatmap hm;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        hm.grid.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("bad heatmap value '" + cell + "' in " + path.string());
      }
      ++cols;
    }
    if (hm.height == 0) hm.width = cols;
    if (cols != hm.width) throw FormatError("ragged heatmap row in " + path.string());
    ++hm.height;
  }
  hm.source = path.string();
  return hm;
}

}  // namespace mla
