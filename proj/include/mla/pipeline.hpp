#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mla/backbone.hpp"
#include "mla/clustering.hpp"
#include "mla/contrast.hpp"
#include "mla/dataio.hpp"

namespace mla {

struct TrainConfig {
  int clustering_iterations = 50;
  int epochs_per_iteration = 1;
  int batch_p = 8;  // pseudo-identities per batch
  int batch_k = 8;  // images per pseudo-identity
  double lr0 = 1.6e-4;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 20;  // epochs
  double eps = 0.4;
  int min_pts = 4;
  std::string distance = "cosine";  // cosine | jaccard
  int k1 = 20;                      // jaccard neighbourhood
  int k2 = 6;                       // jaccard query expansion
  double tau = 0.05;
  double mu = 0.1;
  std::uint64_t seed = 0;
  AttentionMode attention_mode = AttentionMode::kAll;
  bool augment = false;  // seeded horizontal flip + 2px shift crop
  std::size_t eval_batch = 64;

  std::size_t input_height = 64;
  std::size_t input_width = 32;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2};
  std::size_t embed_dim = 64;
  std::size_t heads = 4;

  void validate() const;  // throws ConfigError
  BackboneConfig backbone() const;
  // Overrides a field from its textual form; throws ConfigError on unknown
  // keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  // Every field as `key = value`, in a fixed order, readable by parse_config.
  std::string to_text() const;
};

// Desk-scale preset: 10 clustering iterations of 4 epochs, 4x4 batches,
// lr 1e-3, Jaccard distance with k1 = 10.
TrainConfig desk_config();

// Flat `key = value` lines; blank lines and `#` comments are skipped.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

// The clustering distance selected by cfg.distance.
DistanceMatrix cluster_distance(const Tensor& features, const TrainConfig& cfg);

using Batch = std::vector<std::size_t>;

// One epoch of P x K_img batches over the non-noise samples. Every cluster
// appears in at least one batch; small clusters are drawn with replacement.
// Returns no batches when fewer than P clusters exist.
std::vector<Batch> pk_sampler(const PseudoLabels& labels, int p, int k_img, std::uint64_t seed);

double lr_at(int epoch, const TrainConfig& cfg);

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  std::int64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam on every tensor of `params`, reading each tensor's grad.
void adam_step(const ParameterList& params, double lr, AdamState& state, const AdamHyper& hyper = {});

struct EpochReport {
  int iteration = 0;
  int num_clusters = 0;
  double noise_fraction = 0.0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  bool skipped = false;
};

struct TrainState {
  TrainConfig config;
  BackboneParams backbone;
  AdamState adam;
  MemoryDictionary memory;  // from the latest completed iteration
  int next_iteration = 0;  // epochs before it: next_iteration * epochs_per_iteration

  static TrainState fresh(const TrainConfig& cfg);
  // Parameters, norm buffers, Adam moments, memory and counters.
  ParameterList checkpoint_tensors() const;
};

// Raised when a loss turns non-finite; a diagnostic dump has been written.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct IterationOptions {
  std::optional<std::filesystem::path> dump_dir;  // where divergence dumps go
};

// One cluster-then-train round. Clustering uses eval-mode features after the
// norm statistics are re-estimated on the training images.
EpochReport train_iteration(TrainState& state, const UnlabeledImages& data, const IterationOptions& options = {});

struct RunResult {
  TrainState state;
  std::vector<EpochReport> reports;
};

// Runs the remaining clustering iterations, writing config.txt,
// checkpoint.bin (after every iteration) and report.csv under run_dir.
// With resume set and a checkpoint present, continues from it.
// `on_report` sees every iteration's report as it is written.
RunResult run_training(const TrainConfig& cfg, const UnlabeledImages& data, const std::filesystem::path& run_dir,
                       bool resume = false, const std::function<void(const EpochReport&)>& on_report = {});

// Restores a state saved by run_training; the config is taken from `cfg`.
TrainState load_train_state(const TrainConfig& cfg, const std::filesystem::path& checkpoint);

std::string report_csv_header();
std::string report_csv_row(const EpochReport& r);

}  // namespace mla
