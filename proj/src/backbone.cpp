#include "mla/backbone.hpp"

#include <algorithm>

#include "mla/errors.hpp"
#include "mla/ops.hpp"

namespace mla {

namespace {

std::size_t halve(std::size_t extent) { return (extent + 1) / 2; }  // 3x3, pad 1, stride 2

std::size_t mid_channels(const BackboneConfig& cfg) {
  return cfg.mla_mid_channels ? cfg.mla_mid_channels : std::max<std::size_t>(1, cfg.stage_channels.back() / 2);
}

Tensor basic_block_forward(const Tensor& x, BasicBlock& b, bool training) {
  Tensor y = ops::relu(b.norm1(ops::conv2d(x, b.conv1, std::nullopt, b.stride, 1), training));
  y = b.norm2(ops::conv2d(y, b.conv2, std::nullopt, 1, 1), training);
  Tensor sc = x;
  if (b.shortcut) {
    const Tensor pooled = b.stride == 2 ? ops::avg_pool2x2(x) : x;
    sc = (*b.shortcut_norm)(conv1x1(pooled, *b.shortcut), training);
  }
  return ops::relu(ops::add(y, sc));
}

template <typename Fn>
void for_each_norm(BackboneParams& p, Fn&& fn) {
  fn(p.stem_norm);
  for (auto& b : p.blocks) {
    fn(b.norm1);
    fn(b.norm2);
    if (b.shortcut_norm) fn(*b.shortcut_norm);
  }
  fn(p.mla.reduce_norm);
  fn(p.mla.mid_norm);
  fn(p.mla.expand_norm);
  if (p.mla.shortcut_norm) fn(*p.mla.shortcut_norm);
  fn(p.embed_norm);
}

}  // namespace

std::pair<std::size_t, std::size_t> BackboneConfig::feature_map_hw() const {
  validate();
  std::size_t h = halve(input_height), w = halve(input_width);
  for (std::size_t s = 1; s < stage_channels.size(); ++s) {
    h = halve(h);
    w = halve(w);
  }
  return {h, w};
}

void BackboneConfig::validate() const {
  if (stage_channels.empty() || stage_channels.size() != blocks_per_stage.size()) {
    throw ConfigError("stage_channels and blocks_per_stage must be non-empty lists of equal length");
  }
  for (auto c : stage_channels)
    if (c == 0) throw ConfigError("stage channels must be positive");
  for (auto b : blocks_per_stage)
    if (b == 0) throw ConfigError("every stage needs at least one block");
  if (stage_channels.size() > 1 && blocks_per_stage.back() < 2) {
    throw ConfigError("the last stage needs two blocks: a strided block and the MLA block");
  }
  if (embed_dim == 0 || input_height == 0 || input_width == 0) throw ConfigError("dimensions must be positive");
  std::size_t h = halve(input_height), w = halve(input_width);
  for (std::size_t s = 1; s < stage_channels.size(); ++s) {
    h = halve(h);
    w = halve(w);
  }
  if (h < 2 || w < 2) {
    throw ConfigError("final feature map " + std::to_string(h) + "x" + std::to_string(w) +
                      " is below 2x2; attention needs several positions");
  }
  const std::size_t mid = mla_mid_channels ? mla_mid_channels : std::max<std::size_t>(1, stage_channels.back() / 2);
  if (uses_hla(attention_mode) && (heads == 0 || mid % heads != 0)) {
    throw ConfigError("MLA width " + std::to_string(mid) + " is not divisible by heads " + std::to_string(heads));
  }
}

ParameterList BackboneParams::parameters() const {
  ParameterList params, buffers;
  params.add("backbone.stem.kernel", stem);
  stem_norm.collect(params, buffers, "backbone.stem.norm");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto prefix = "backbone.block" + std::to_string(i);
    const auto& b = blocks[i];
    params.add(prefix + ".conv1", b.conv1);
    b.norm1.collect(params, buffers, prefix + ".norm1");
    params.add(prefix + ".conv2", b.conv2);
    b.norm2.collect(params, buffers, prefix + ".norm2");
    if (b.shortcut) {
      params.add(prefix + ".shortcut", *b.shortcut);
      b.shortcut_norm->collect(params, buffers, prefix + ".shortcut_norm");
    }
  }
  mla.collect(params, buffers, "mla");
  params.add("backbone.head.weight", head_weight);
  params.add("backbone.head.bias", head_bias);
  embed_norm.collect(params, buffers, "backbone.embed_norm");
  return params;
}

ParameterList BackboneParams::buffers() const {
  ParameterList params, buffers;
  stem_norm.collect(params, buffers, "backbone.stem.norm");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto prefix = "backbone.block" + std::to_string(i);
    const auto& b = blocks[i];
    b.norm1.collect(params, buffers, prefix + ".norm1");
    b.norm2.collect(params, buffers, prefix + ".norm2");
    if (b.shortcut) b.shortcut_norm->collect(params, buffers, prefix + ".shortcut_norm");
  }
  ParameterList mla_params;
  mla.collect(mla_params, buffers, "mla");
  embed_norm.collect(params, buffers, "backbone.embed_norm");
  return buffers;
}

BackboneParams build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  const auto [fh, fw] = cfg.feature_map_hw();
  std::seed_seq trunk_seq{seed, std::uint64_t{0}};
  std::seed_seq mla_seq{seed, std::uint64_t{1}};
  Rng rng(trunk_seq);
  Rng mla_rng(mla_seq);

  BackboneParams p;
  p.config = cfg;
  p.stem = kaiming_kernel(3, 3, 3, cfg.stage_channels[0], rng);
  p.stem_norm = Norm::make(cfg.stage_channels[0]);
  std::size_t c_prev = cfg.stage_channels[0];
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    const bool last_stage = s + 1 == cfg.stage_channels.size();
    const std::size_t count = last_stage ? cfg.blocks_per_stage[s] - 1 : cfg.blocks_per_stage[s];
    for (std::size_t i = 0; i < count; ++i) {
      BasicBlock b;
      b.stride = (s > 0 && i == 0) ? 2 : 1;
      b.conv1 = kaiming_kernel(3, 3, c_prev, c, rng);
      b.norm1 = Norm::make(c);
      b.conv2 = kaiming_kernel(3, 3, c, c, rng);
      b.norm2 = Norm::make(c);
      for (auto& g : b.norm2.gamma.mutable_data()) g = 0.0;  // residual branch starts silent
      if (b.stride != 1 || c_prev != c) {
        b.shortcut = kaiming_kernel(1, 1, c_prev, c, rng);
        b.shortcut_norm = Norm::make(c);
      }
      p.blocks.push_back(std::move(b));
      c_prev = c;
    }
  }
  const std::size_t c_last = cfg.stage_channels.back();
  std::normal_distribution<double> head_dist(0.0, std::sqrt(1.0 / static_cast<double>(c_last)));
  std::vector<double> hw(c_last * cfg.embed_dim);
  for (auto& v : hw) v = head_dist(rng);
  p.head_weight = Tensor::from({c_last, cfg.embed_dim}, std::move(hw), true);
  p.head_bias = Tensor::zeros({cfg.embed_dim}, true);
  p.embed_norm = Norm::make(cfg.embed_dim);

  MlaBlockConfig mcfg;
  mcfg.c_in = c_prev;
  mcfg.c_mid = mid_channels(cfg);
  mcfg.c_out = c_last;
  mcfg.heads = cfg.heads;
  mcfg.slots = cfg.dla_slots;
  mcfg.h_max = fh;
  mcfg.w_max = fw;
  p.mla = MlaBlockParams::init(mcfg, cfg.attention_mode, mla_rng);
  for (auto& g : p.mla.expand_norm.gamma.mutable_data()) g = 0.0;
  return p;
}

Tensor forward_trunk(const Tensor& images, BackboneParams& params, bool training) {
  const auto& cfg = params.config;
  if (images.rank() != 4 || images.dim(1) != cfg.input_height || images.dim(2) != cfg.input_width ||
      images.dim(3) != 3) {
    throw DimensionError("backbone expects images [n," + std::to_string(cfg.input_height) + "," +
                         std::to_string(cfg.input_width) + ",3], got " + shape_str(images.shape()));
  }
  Tensor x = ops::relu(params.stem_norm(ops::conv2d(images, params.stem, std::nullopt, 2, 1), training));
  for (auto& b : params.blocks) x = basic_block_forward(x, b, training);
  return x;
}

Tensor forward_to_featuremap(const Tensor& images, BackboneParams& params, bool training) {
  Tensor x = forward_trunk(images, params, training);
  return mla_block_forward(x, params.mla, params.config.attention_mode, training);
}

Embedding embed_featuremap(const Tensor& featuremap, BackboneParams& params, bool training) {
  Tensor pooled = ops::global_avg_pool(featuremap);
  Tensor raw = ops::add(ops::matmul(pooled, params.head_weight), params.head_bias);
  raw = params.embed_norm(raw, training);
  return {raw, ops::l2_normalize(raw, 1)};
}

Tensor extract_features(const Tensor& images, BackboneParams& params, bool training) {
  return embed_featuremap(forward_to_featuremap(images, params, training), params, training).unit;
}

Tensor take_rows(const Tensor& t, std::size_t begin, std::size_t count) {
  const std::size_t row = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = count;
  std::vector<double> v(t.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                        t.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * row));
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t row = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = rows.size();
  std::vector<double> v;
  v.reserve(rows.size() * row);
  for (auto r : rows) {
    if (r >= t.dim(0)) throw ContractError("row index " + std::to_string(r) + " out of range");
    v.insert(v.end(), t.data().begin() + static_cast<std::ptrdiff_t>(r * row),
             t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * row));
  }
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor extract_features_batched(const Tensor& images, BackboneParams& params, std::size_t batch_size) {
  NoGradGuard no_grad;
  const std::size_t n = images.dim(0);
  std::vector<double> out;
  out.reserve(n * params.config.embed_dim);
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t count = std::min(batch_size, n - b);
    Tensor f = extract_features(take_rows(images, b, count), params, false);
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor::from({n, params.config.embed_dim}, std::move(out));
}

void recalibrate_norm_stats(const Tensor& images, BackboneParams& params, std::size_t batch_size) {
  NoGradGuard no_grad;
  // Cumulative averaging: batch k enters with momentum 1 / (k + 1).
  std::vector<double> saved;
  for_each_norm(params, [&](Norm& n) {
    saved.push_back(n.stats.momentum);
    for (auto& v : n.stats.mean.mutable_data()) v = 0.0;
    for (auto& v : n.stats.var.mutable_data()) v = 0.0;
  });
  const std::size_t n = images.dim(0);
  std::size_t k = 0;
  for (std::size_t b = 0; b < n; b += batch_size, ++k) {
    const double momentum = 1.0 / static_cast<double>(k + 1);
    for_each_norm(params, [&](Norm& nm) { nm.stats.momentum = momentum; });
    extract_features(take_rows(images, b, std::min(batch_size, n - b)), params, true);
  }
  std::size_t i = 0;
  for_each_norm(params, [&](Norm& nm) { nm.stats.momentum = saved[i++]; });
}

}  // namespace mla
