#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mla/backbone.hpp"
#include "mla/contrast.hpp"
#include "mla/dataio.hpp"
#include "mla/tensor.hpp"

namespace mla {

// Unit-norm features with their ground-truth labels.
struct LabeledFeatures {
  Tensor features;  // [n, d]
  std::vector<int> pids;
  std::vector<int> camids;
};

struct RetrievalMetrics {
  double mAP = 0.0;
  std::map<int, double> cmc;  // rank k -> accuracy, k in {1, 5, 10}
  std::size_t valid_queries = 0;
  std::size_t excluded_queries = 0;  // no valid positive in the gallery
};

// Cross-camera protocol: gallery entries sharing both pid and camid with
// the query are dropped; ranking by descending cosine similarity, ties by
// gallery index.
RetrievalMetrics evaluate(const LabeledFeatures& query, const LabeledFeatures& gallery);

LabeledFeatures labeled_features(const std::vector<ImageRecord>& records, BackboneParams& params,
                                 std::size_t batch_size);

// Re-estimates norm statistics on the train split (pixels only), then
// evaluates query against gallery.
RetrievalMetrics evaluate_model(BackboneParams& params, const std::vector<ImageRecord>& records,
                                std::size_t batch_size);

// `metric,value` rows: mAP, cmc1, cmc5, cmc10, valid_queries, excluded_queries.
std::string metrics_csv(const RetrievalMetrics& m);
void write_metrics_csv(const std::filesystem::path& path, const RetrievalMetrics& m);

struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> grid;  // row-major, values in [0, 1]
  std::string source;
  std::string target;
};

// ReLU(sum_c mean_hw(grad_c) * A_c), divided by its max unless all zero.
// `activations` and `grad` are [h, w, c].
Heatmap grad_cam_combine(const Tensor& activations, std::span<const double> grad);

// Score: (x . C_target) / tau for a cluster of `memory`, or the squared norm
// of the embedding before L2 normalization when no cluster is given.
struct CamTarget {
  std::optional<int> cluster;
  const MemoryDictionary* memory = nullptr;
};

// `image` is [h, w, 3]; the network runs in eval mode.
Heatmap grad_cam_heatmap(const Tensor& image, BackboneParams& params, const CamTarget& target,
                         const std::string& source = "");

// Half-pixel-centred bilinear resize of a single-channel grid.
std::vector<double> bilinear_upsample(std::span<const double> grid, std::size_t h, std::size_t w,
                                      std::size_t out_h, std::size_t out_w);

// Writes <stem>.csv (the grid) and <stem>.ppm (blue-to-red ramp blended at
// 0.5 over `image`, [H, W, 3]).
void export_heatmap(const Heatmap& hm, const Tensor& image, const std::filesystem::path& stem);
// The blended overlay as [H, W, 3] pixels in [0, 1].
std::vector<double> overlay_heatmap(const Heatmap& hm, const Tensor& image);
Heatmap read_heatmap_csv(const std::filesystem::path& path);

}  // namespace mla
