#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mla/attention.hpp"
#include "mla/layers.hpp"
#include "mla/tensor.hpp"

namespace mla {

struct BackboneConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 32;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2};
  std::size_t embed_dim = 64;
  AttentionMode attention_mode = AttentionMode::kAll;
  std::size_t heads = 4;
  std::size_t mla_mid_channels = 0;  // 0 selects last stage channels / 2
  std::size_t dla_slots = 0;         // 0 selects mid channels / 2

  // Spatial extent of the final feature map; throws ConfigError on invalid
  // configurations (mismatched lists, maps below 2x2).
  std::pair<std::size_t, std::size_t> feature_map_hw() const;
  void validate() const;
};

// Two 3x3 convs with a residual shortcut (1x1 projection when the shape changes).
struct BasicBlock {
  std::size_t stride = 1;
  Tensor conv1;
  Norm norm1;
  Tensor conv2;
  Norm norm2;
  std::optional<Tensor> shortcut;
  std::optional<Norm> shortcut_norm;
};

struct BackboneParams {
  BackboneConfig config;
  Tensor stem;  // [3, 3, 3, c0], stride 2
  Norm stem_norm;
  std::vector<BasicBlock> blocks;  // every residual block except the last
  MlaBlockParams mla;              // the last residual block
  Tensor head_weight;              // [c_last, embed_dim]
  Tensor head_bias;                // [embed_dim]
  Norm embed_norm;                 // centres embeddings before L2 normalization

  // Trainable tensors (`backbone.*`, `mla.*`).
  ParameterList parameters() const;
  // Batch-norm running statistics.
  ParameterList buffers() const;
};

// Deterministic in `seed`. The MLA block draws from its own stream so
// earlier layers do not depend on the attention mode.
BackboneParams build_backbone(const BackboneConfig& cfg, std::uint64_t seed);

// Everything before the MLA block.
Tensor forward_trunk(const Tensor& images, BackboneParams& params, bool training);
// Post-MLA feature map [n, h', w', c] before pooling.
Tensor forward_to_featuremap(const Tensor& images, BackboneParams& params, bool training);

struct Embedding {
  Tensor raw;   // after the linear head and embedding norm
  Tensor unit;  // L2-normalized rows
};
Embedding embed_featuremap(const Tensor& featuremap, BackboneParams& params, bool training);

// [n, embed_dim] unit-norm rows.
Tensor extract_features(const Tensor& images, BackboneParams& params, bool training);

// Runs `images` through in no-grad mode with batch statistics and replaces
// every running mean/variance by the average batch moments over all
// batches (cumulative average of per-batch moments).
void recalibrate_norm_stats(const Tensor& images, BackboneParams& params, std::size_t batch_size);

// Rows [begin, begin + count) of an [n, ...] tensor, no tape.
Tensor take_rows(const Tensor& t, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows);

// Feature extraction in eval mode over chunks, no tape.
Tensor extract_features_batched(const Tensor& images, BackboneParams& params, std::size_t batch_size);

}  // namespace mla
