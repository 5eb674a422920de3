#include "mla/attention.hpp"

#include "mla/errors.hpp"
#include "mla/ops.hpp"

namespace mla {

AttentionMode parse_attention_mode(std::string_view name) {
  if (name == "baseline") return AttentionMode::kBaseline;
  if (name == "pla") return AttentionMode::kPla;
  if (name == "hla") return AttentionMode::kHla;
  if (name == "pla+hla") return AttentionMode::kPlaHla;
  if (name == "dla") return AttentionMode::kDla;
  if (name == "all") return AttentionMode::kAll;
  throw ConfigError("unknown attention mode '" + std::string(name) +
                    "' (expected baseline, pla, hla, pla+hla, dla, all)");
}

std::string attention_mode_name(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kBaseline: return "baseline";
    case AttentionMode::kPla: return "pla";
    case AttentionMode::kHla: return "hla";
    case AttentionMode::kPlaHla: return "pla+hla";
    case AttentionMode::kDla: return "dla";
    case AttentionMode::kAll: return "all";
  }
  throw ConfigError("unknown attention mode");
}

bool uses_pla(AttentionMode m) {
  return m == AttentionMode::kPla || m == AttentionMode::kPlaHla || m == AttentionMode::kAll;
}
bool uses_hla(AttentionMode m) {
  return m == AttentionMode::kHla || m == AttentionMode::kPlaHla || m == AttentionMode::kAll;
}
bool uses_dla(AttentionMode m) { return m == AttentionMode::kDla || m == AttentionMode::kAll; }

PlaParams PlaParams::init(std::size_t channels, Rng& rng) {
  return {kaiming_kernel(3, 3, channels, channels, rng), Tensor::zeros({channels}, true)};
}

void PlaParams::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".kernel", kernel);
  params.add(prefix + ".bias", bias);
}

HlaParams HlaParams::init(std::size_t channels, std::size_t heads, std::size_t h_max, std::size_t w_max, Rng& rng) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("HLA channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
  }
  HlaParams p;
  p.heads = heads;
  p.w_q = kaiming_kernel(1, 1, channels, channels, rng);
  p.w_k = kaiming_kernel(1, 1, channels, channels, rng);
  p.w_v = kaiming_kernel(1, 1, channels, channels, rng);
  const std::size_t d = channels / heads;
  p.r_h = standard_normal({heads, h_max, d}, rng);
  p.r_w = standard_normal({heads, w_max, d}, rng);
  return p;
}

void HlaParams::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".w_q", w_q);
  params.add(prefix + ".w_k", w_k);
  params.add(prefix + ".w_v", w_v);
  params.add(prefix + ".r_h", r_h);
  params.add(prefix + ".r_w", r_w);
}

DlaParams DlaParams::init(std::size_t channels, std::size_t slots, Rng& rng) {
  if (slots == 0) throw ConfigError("DLA needs at least one memory slot");
  DlaParams p;
  p.w_q = kaiming_kernel(1, 1, channels, channels, rng);
  p.k_d = kaiming_kernel(1, 1, channels, slots, rng);
  std::vector<double> vt(slots * channels);
  const auto k = p.k_d.data();
  for (std::size_t i = 0; i < channels; ++i)
    for (std::size_t j = 0; j < slots; ++j) vt[j * channels + i] = k[i * slots + j];
  p.v_d = Tensor::from({1, 1, slots, channels}, std::move(vt), true);
  return p;
}

void DlaParams::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".w_q", w_q);
  params.add(prefix + ".k_d", k_d);
  params.add(prefix + ".v_d", v_d);
}

namespace {

void require_channels(const Tensor& x, std::size_t c, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + " expects [n,h,w,c], got " + shape_str(x.shape()));
  if (x.dim(3) != c) {
    throw DimensionError(std::string(op) + ": channel axis 3 is " + std::to_string(x.dim(3)) + ", parameters expect " +
                         std::to_string(c));
  }
}

// [n, h, w, c] -> [n, heads, hw, d]
Tensor split_heads(const Tensor& t, std::size_t heads) {
  const std::size_t n = t.dim(0), hw = t.dim(1) * t.dim(2), d = t.dim(3) / heads;
  return ops::permute(ops::reshape(t, {n, hw, heads, d}), {0, 2, 1, 3});
}

}  // namespace

Tensor pla_forward(const Tensor& x, const PlaParams& p) {
  require_channels(x, p.channels(), "pla_forward");
  return ops::mul(x, ops::sigmoid(ops::conv2d(x, p.kernel, p.bias, 1, 1)));
}

Tensor hla_attention(const Tensor& x, const HlaParams& p) {
  require_channels(x, p.channels(), "hla_forward");
  const std::size_t h = x.dim(1), w = x.dim(2);
  if (h > p.r_h.dim(1) || w > p.r_w.dim(1)) {
    throw ConfigError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                      " exceeds position-encoding capacity " + std::to_string(p.r_h.dim(1)) + "x" +
                      std::to_string(p.r_w.dim(1)));
  }
  const std::size_t d = p.head_dim();
  Tensor q = split_heads(conv1x1(x, p.w_q), p.heads);
  Tensor k = split_heads(conv1x1(x, p.w_k), p.heads);
  Tensor content = ops::matmul(q, ops::transpose(k, -1, -2));

  Tensor rows = ops::reshape(ops::slice(p.r_h, 1, 0, h), {p.heads, h, 1, d});
  Tensor cols = ops::reshape(ops::slice(p.r_w, 1, 0, w), {p.heads, 1, w, d});
  Tensor pos = ops::reshape(ops::add(rows, cols), {p.heads, h * w, d});
  Tensor position = ops::matmul(q, ops::transpose(pos, -1, -2));

  return ops::softmax(ops::add(content, position), -1);
}

Tensor hla_forward(const Tensor& x, const HlaParams& p) {
  Tensor attn = hla_attention(x, p);
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor v = split_heads(conv1x1(x, p.w_v), p.heads);
  Tensor out = ops::permute(ops::matmul(attn, v), {0, 2, 1, 3});
  return ops::reshape(out, {n, h, w, c});
}

Tensor dla_forward(const Tensor& x, const DlaParams& p) {
  require_channels(x, p.channels(), "dla_forward");
  if (p.v_d.dim(2) != p.slots() || p.v_d.dim(3) != p.channels()) {
    throw DimensionError("dla_forward: v_D must be [1,1,c_k,c]");
  }
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ck = p.slots();
  Tensor q = conv1x1(x, p.w_q);
  // Softmax over memory slots per pixel, then L1 over pixels per slot.
  Tensor attn = ops::softmax(conv1x1(q, p.k_d), -1);
  Tensor normed = ops::l1_normalize(ops::reshape(attn, {n, h * w, ck}), 1);
  return ops::add(x, conv1x1(ops::reshape(normed, {n, h, w, ck}), p.v_d));
}

MlaBlockParams MlaBlockParams::init(const MlaBlockConfig& cfg, AttentionMode mode, Rng& rng) {
  MlaBlockParams p;
  p.mode = mode;
  p.reduce = kaiming_kernel(1, 1, cfg.c_in, cfg.c_mid, rng);
  p.reduce_norm = Norm::make(cfg.c_mid);
  if (mode == AttentionMode::kBaseline) p.mid_conv = kaiming_kernel(3, 3, cfg.c_mid, cfg.c_mid, rng);
  if (uses_pla(mode)) p.pla = PlaParams::init(cfg.c_mid, rng);
  if (uses_hla(mode)) p.hla = HlaParams::init(cfg.c_mid, cfg.heads, cfg.h_max, cfg.w_max, rng);
  if (uses_dla(mode)) p.dla = DlaParams::init(cfg.c_mid, cfg.slots ? cfg.slots : std::max<std::size_t>(1, cfg.c_mid / 2), rng);
  p.mid_norm = Norm::make(cfg.c_mid);
  p.expand = kaiming_kernel(1, 1, cfg.c_mid, cfg.c_out, rng);
  p.expand_norm = Norm::make(cfg.c_out);
  if (cfg.c_in != cfg.c_out) {
    p.shortcut = kaiming_kernel(1, 1, cfg.c_in, cfg.c_out, rng);
    p.shortcut_norm = Norm::make(cfg.c_out);
  }
  return p;
}

void MlaBlockParams::collect(ParameterList& params, ParameterList& buffers, const std::string& prefix) const {
  params.add(prefix + ".reduce", reduce);
  reduce_norm.collect(params, buffers, prefix + ".reduce_norm");
  if (mid_conv) params.add(prefix + ".mid_conv", *mid_conv);
  if (pla) pla->collect(params, prefix + ".pla");
  if (hla) hla->collect(params, prefix + ".hla");
  if (dla) dla->collect(params, prefix + ".dla");
  mid_norm.collect(params, buffers, prefix + ".mid_norm");
  params.add(prefix + ".expand", expand);
  expand_norm.collect(params, buffers, prefix + ".expand_norm");
  if (shortcut) {
    params.add(prefix + ".shortcut", *shortcut);
    shortcut_norm->collect(params, buffers, prefix + ".shortcut_norm");
  }
}

Tensor mla_block_forward(const Tensor& x, MlaBlockParams& p, AttentionMode mode, bool training) {
  const bool baseline = mode == AttentionMode::kBaseline;
  if ((baseline && !p.mid_conv) || (uses_pla(mode) && !p.pla) || (uses_hla(mode) && !p.hla) ||
      (uses_dla(mode) && !p.dla)) {
    throw ConfigError("MLA block was built without the parameters mode '" + attention_mode_name(mode) + "' needs");
  }
  Tensor y = ops::relu(p.reduce_norm(conv1x1(x, p.reduce), training));
  if (baseline) {
    y = ops::conv2d(y, *p.mid_conv, std::nullopt, 1, 1);
  } else {
    if (uses_pla(mode)) y = pla_forward(y, *p.pla);
    if (uses_hla(mode)) y = hla_forward(y, *p.hla);
    if (uses_dla(mode)) y = dla_forward(y, *p.dla);
  }
  y = ops::relu(p.mid_norm(y, training));
  y = p.expand_norm(conv1x1(y, p.expand), training);
  Tensor shortcut = p.shortcut ? (*p.shortcut_norm)(conv1x1(x, *p.shortcut), training) : x;
  return ops::relu(ops::add(y, shortcut));
}

}  // namespace mla
