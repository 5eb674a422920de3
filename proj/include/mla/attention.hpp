#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "mla/layers.hpp"
#include "mla/tensor.hpp"

namespace mla {

// Which attention operators replace the 3x3 convolution of the last
// residual block. Names follow the ablation rows: baseline, pla, hla,
// pla+hla, dla, all.
enum class AttentionMode { kBaseline, kPla, kHla, kPlaHla, kDla, kAll };

AttentionMode parse_attention_mode(std::string_view name);  // throws ConfigError
std::string attention_mode_name(AttentionMode mode);
bool uses_pla(AttentionMode mode);
bool uses_hla(AttentionMode mode);
bool uses_dla(AttentionMode mode);
inline constexpr AttentionMode kAllAttentionModes[] = {AttentionMode::kBaseline, AttentionMode::kHla,
                                                       AttentionMode::kPla,      AttentionMode::kPlaHla,
                                                       AttentionMode::kDla,      AttentionMode::kAll};

// Pixel-level gate: x * sigmoid(conv3x3_pad1(x) + bias).
struct PlaParams {
  Tensor kernel;  // [3, 3, c, c]
  Tensor bias;    // [c]

  static PlaParams init(std::size_t channels, Rng& rng);
  std::size_t channels() const { return bias.numel(); }
  void collect(ParameterList& params, const std::string& prefix) const;
};

// Multi-head self-attention with a learnable factorized position encoding
// pos(i, j) = r_h[i] + r_w[j] per head.
struct HlaParams {
  Tensor w_q, w_k, w_v;  // [1, 1, c, c], bias-free
  Tensor r_h;            // [heads, h_max, d_head]
  Tensor r_w;            // [heads, w_max, d_head]
  std::size_t heads = 1;

  static HlaParams init(std::size_t channels, std::size_t heads, std::size_t h_max, std::size_t w_max, Rng& rng);
  std::size_t channels() const { return w_q.dim(3); }
  std::size_t head_dim() const { return channels() / heads; }
  void collect(ParameterList& params, const std::string& prefix) const;
};

// Dataset-level memory attention: k_D and v_D are bias-free 1x1 convs acting
// as c_k learned slots; v_D starts as the transpose of k_D.
struct DlaParams {
  Tensor w_q;  // [1, 1, c, c]
  Tensor k_d;  // [1, 1, c, c_k]
  Tensor v_d;  // [1, 1, c_k, c]

  static DlaParams init(std::size_t channels, std::size_t slots, Rng& rng);
  std::size_t channels() const { return w_q.dim(3); }
  std::size_t slots() const { return k_d.dim(3); }
  void collect(ParameterList& params, const std::string& prefix) const;
};

Tensor pla_forward(const Tensor& x, const PlaParams& p);
Tensor hla_forward(const Tensor& x, const HlaParams& p);
// Per-head attention rows [n, heads, hw, hw] (softmax over the last axis).
Tensor hla_attention(const Tensor& x, const HlaParams& p);
Tensor dla_forward(const Tensor& x, const DlaParams& p);

struct MlaBlockConfig {
  std::size_t c_in = 64;
  std::size_t c_mid = 32;
  std::size_t c_out = 64;
  std::size_t heads = 4;
  std::size_t slots = 0;  // 0 selects c_mid / 2
  std::size_t h_max = 8;
  std::size_t w_max = 4;
};

// Bottleneck residual block whose middle stage is the attention stack
// (PLA -> HLA -> DLA, each optional) or a plain 3x3 conv for baseline.
struct MlaBlockParams {
  AttentionMode mode = AttentionMode::kAll;
  Tensor reduce;  // [1, 1, c_in, c_mid]
  Norm reduce_norm;
  std::optional<Tensor> mid_conv;  // baseline only, [3, 3, c_mid, c_mid]
  std::optional<PlaParams> pla;
  std::optional<HlaParams> hla;
  std::optional<DlaParams> dla;
  Norm mid_norm;
  Tensor expand;  // [1, 1, c_mid, c_out]
  Norm expand_norm;
  std::optional<Tensor> shortcut;  // 1x1 projection when c_in != c_out
  std::optional<Norm> shortcut_norm;

  static MlaBlockParams init(const MlaBlockConfig& cfg, AttentionMode mode, Rng& rng);
  void collect(ParameterList& params, ParameterList& buffers, const std::string& prefix) const;
};

// Throws ConfigError when `mode` needs sub-parameters that were not built.
Tensor mla_block_forward(const Tensor& x, MlaBlockParams& p, AttentionMode mode, bool training);

}  // namespace mla
