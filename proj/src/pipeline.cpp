#include "mla/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "mla/checkpoint.hpp"
#include "mla/errors.hpp"

namespace fs = std::filesystem;

namespace mla {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) throw ConfigError("bad number for " + key + ": '" + value + "'");
  return v;
}

long long parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != value.size()) throw ConfigError("bad integer for " + key + ": '" + value + "'");
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  const long long v = parse_int(key, value);
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad boolean for " + key + ": '" + value + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  if (out.empty()) throw ConfigError(key + " must be a non-empty list");
  return out;
}

std::string list_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;
struct Field {
  const char* key;
  Setter set;
  Getter get;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"clustering_iterations", [](TrainConfig& c, auto& k, auto& v) { c.clustering_iterations = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.clustering_iterations); }},
      {"epochs_per_iteration", [](TrainConfig& c, auto& k, auto& v) { c.epochs_per_iteration = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.epochs_per_iteration); }},
      {"batch_p", [](TrainConfig& c, auto& k, auto& v) { c.batch_p = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.batch_p); }},
      {"batch_k", [](TrainConfig& c, auto& k, auto& v) { c.batch_k = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.batch_k); }},
      {"lr0", [](TrainConfig& c, auto& k, auto& v) { c.lr0 = parse_double(k, v); },
       [](const TrainConfig& c) { return fmt_double(c.lr0); }},
      {"lr_decay_factor", [](TrainConfig& c, auto& k, auto& v) { c.lr_decay_factor = parse_double(k, v); },
       [](const TrainConfig& c) { return fmt_double(c.lr_decay_factor); }},
      {"lr_decay_every", [](TrainConfig& c, auto& k, auto& v) { c.lr_decay_every = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.lr_decay_every); }},
      {"eps", [](TrainConfig& c, auto& k, auto& v) { c.eps = parse_double(k, v); },
       [](const TrainConfig& c) { return fmt_double(c.eps); }},
      {"min_pts", [](TrainConfig& c, auto& k, auto& v) { c.min_pts = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.min_pts); }},
      {"distance", [](TrainConfig& c, auto&, auto& v) { c.distance = v; },
       [](const TrainConfig& c) { return c.distance; }},
      {"k1", [](TrainConfig& c, auto& k, auto& v) { c.k1 = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.k1); }},
      {"k2", [](TrainConfig& c, auto& k, auto& v) { c.k2 = static_cast<int>(parse_int(k, v)); },
       [](const TrainConfig& c) { return std::to_string(c.k2); }},
      {"tau", [](TrainConfig& c, auto& k, auto& v) { c.tau = parse_double(k, v); },
       [](const TrainConfig& c) { return fmt_double(c.tau); }},
      {"mu", [](TrainConfig& c, auto& k, auto& v) { c.mu = parse_double(k, v); },
       [](const TrainConfig& c) { return fmt_double(c.mu); }},
      {"seed", [](TrainConfig& c, auto& k, auto& v) { c.seed = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.seed); }},
      {"attention_mode", [](TrainConfig& c, auto&, auto& v) { c.attention_mode = parse_attention_mode(v); },
       [](const TrainConfig& c) { return attention_mode_name(c.attention_mode); }},
      {"augment", [](TrainConfig& c, auto& k, auto& v) { c.augment = parse_bool(k, v); },
       [](const TrainConfig& c) { return std::string(c.augment ? "true" : "false"); }},
      {"eval_batch", [](TrainConfig& c, auto& k, auto& v) { c.eval_batch = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.eval_batch); }},
      {"input_height", [](TrainConfig& c, auto& k, auto& v) { c.input_height = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.input_height); }},
      {"input_width", [](TrainConfig& c, auto& k, auto& v) { c.input_width = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.input_width); }},
      {"stage_channels", [](TrainConfig& c, auto& k, auto& v) { c.stage_channels = parse_list(k, v); },
       [](const TrainConfig& c) { return list_text(c.stage_channels); }},
      {"blocks_per_stage", [](TrainConfig& c, auto& k, auto& v) { c.blocks_per_stage = parse_list(k, v); },
       [](const TrainConfig& c) { return list_text(c.blocks_per_stage); }},
      {"embed_dim", [](TrainConfig& c, auto& k, auto& v) { c.embed_dim = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.embed_dim); }},
      {"heads", [](TrainConfig& c, auto& k, auto& v) { c.heads = parse_size(k, v); },
       [](const TrainConfig& c) { return std::to_string(c.heads); }},
  };
  return table;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::seed_seq seq{seed, a, b, c};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

enum Stream : std::uint64_t { kMemoryStream = 1, kSamplerStream = 2, kAugmentStream = 3 };

// Horizontal flip with probability 1/2, then a shift of up to 2 px per axis
// with zero fill. Operates on [n, h, w, 3] in place.
void augment_batch(Tensor& images, std::mt19937_64& rng) {
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  auto px = images.mutable_data();
  std::vector<double> src;
  std::uniform_int_distribution<int> coin(0, 1), shift(-2, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const bool flip = coin(rng) == 1;
    const int dy = shift(rng), dx = shift(rng);
    double* img = &px[i * h * w * c];
    src.assign(img, img + h * w * c);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = static_cast<long>(y) - dy;
        long sx = static_cast<long>(x) - dx;
        double* dst = img + (y * w + x) * c;
        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) {
          std::fill(dst, dst + c, 0.0);
          continue;
        }
        if (flip) sx = static_cast<long>(w) - 1 - sx;
        const double* s = &src[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c];
        std::copy(s, s + c, dst);
      }
  }
}

void write_dump(const fs::path& dir, const Tensor& features, const PseudoLabels& labels, double lr, int iteration,
                std::size_t batch) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  write_labels_csv(dir / "labels.csv", labels);
  std::ofstream f(dir / "features.csv", std::ios::trunc);
  const std::size_t d = features.dim(1);
  for (std::size_t i = 0; i < features.dim(0); ++i) {
    for (std::size_t j = 0; j < d; ++j) f << (j ? "," : "") << fmt_double(features.data()[i * d + j]);
    f << '\n';
  }
  std::ofstream info(dir / "info.txt", std::ios::trunc);
  info << "iteration = " << iteration << "\nbatch = " << batch << "\nlr = " << fmt_double(lr) << '\n';
}

void copy_values(const Tensor& from, Tensor& to, const std::string& name) {
  if (from.shape() != to.shape()) {
    throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(from.shape()) + ", expected " +
                      shape_str(to.shape()));
  }
  std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

DistanceMatrix cluster_distance(const Tensor& features, const TrainConfig& cfg) {
  return cfg.distance == "jaccard" ? jaccard_distance(features, cfg.k1, cfg.k2) : pairwise_cosine_distance(features);
}

void TrainConfig::validate() const {
  if (clustering_iterations < 0) throw ConfigError("clustering_iterations must be non-negative");
  if (epochs_per_iteration < 1) throw ConfigError("epochs_per_iteration must be at least 1");
  if (batch_p < 1 || batch_k < 1 || batch_p * batch_k < 2) throw ConfigError("batch_p * batch_k must exceed 1");
  if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1)) throw ConfigError("lr_decay_factor must be in (0, 1]");
  if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be at least 1");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
  if (min_pts < 1) throw ConfigError("min_pts must be at least 1");
  if (distance != "cosine" && distance != "jaccard") throw ConfigError("distance must be cosine or jaccard");
  if (k1 < 1 || k2 < 1) throw ConfigError("k1 and k2 must be positive");
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  if (!(mu >= 0 && mu <= 1)) throw ConfigError("mu must be in [0, 1]");
  if (eval_batch < 1) throw ConfigError("eval_batch must be at least 1");
  backbone().validate();
}

BackboneConfig TrainConfig::backbone() const {
  BackboneConfig b;
  b.input_height = input_height;
  b.input_width = input_width;
  b.stage_channels = stage_channels;
  b.blocks_per_stage = blocks_per_stage;
  b.embed_dim = embed_dim;
  b.attention_mode = attention_mode;
  b.heads = heads;
  return b;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

TrainConfig desk_config() {
  TrainConfig c;
  c.clustering_iterations = 10;
  c.epochs_per_iteration = 4;
  c.batch_p = 4;
  c.batch_k = 4;
  c.lr0 = 1e-3;
  c.distance = "jaccard";
  c.k1 = 10;
  return c;
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

TrainConfig load_config(const fs::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::vector<Batch> pk_sampler(const PseudoLabels& labels, int p, int k_img, std::uint64_t seed) {
  if (p < 1 || k_img < 1) throw ContractError("batch_p and batch_k must be positive");
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(labels.num_clusters));
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    if (labels.labels[i] != kNoise) members[static_cast<std::size_t>(labels.labels[i])].push_back(i);
  const std::size_t num = members.size(), P = static_cast<std::size_t>(p), K = static_cast<std::size_t>(k_img);
  if (num < P) return {};

  std::seed_seq seq{seed};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(num);
  for (std::size_t i = 0; i < num; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < num; start += P) {
    std::vector<std::size_t> chosen(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(num, start + P)));
    if (chosen.size() < P) {
      std::vector<std::size_t> fill(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(start));
      std::shuffle(fill.begin(), fill.end(), rng);
      for (std::size_t c : fill) {
        if (chosen.size() == P) break;
        chosen.push_back(c);
      }
    }
    Batch batch;
    batch.reserve(P * K);
    for (std::size_t c : chosen) {
      std::vector<std::size_t> m = members[c];
      if (m.size() >= K) {
        std::shuffle(m.begin(), m.end(), rng);
        batch.insert(batch.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(K));
      } else {
        batch.insert(batch.end(), m.begin(), m.end());
        std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
        for (std::size_t extra = m.size(); extra < K; ++extra) batch.push_back(m[pick(rng)]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ContractError("epoch must be non-negative");
  return cfg.lr0 * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

void adam_step(const ParameterList& params, double lr, AdamState& state, const AdamHyper& hyper) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const std::vector<double> g = t.grad();
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    if (m.size() != g.size()) throw DimensionError("Adam state for " + p.name + " does not match its parameter");
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

TrainState TrainState::fresh(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.config = cfg;
  s.backbone = build_backbone(cfg.backbone(), cfg.seed);
  return s;
}

ParameterList TrainState::checkpoint_tensors() const {
  ParameterList out = backbone.parameters();
  out.append(backbone.buffers());
  for (const auto& p : backbone.parameters()) {
    const auto m = adam.m.find(p.name);
    if (m == adam.m.end()) continue;
    out.add("optim.m." + p.name, Tensor::from(p.tensor.shape(), m->second));
    out.add("optim.v." + p.name, Tensor::from(p.tensor.shape(), adam.v.at(p.name)));
  }
  out.add("optim.step", Tensor::scalar(static_cast<double>(adam.step)));
  if (memory.centroids.defined()) out.add("memory.centroids", memory.centroids);
  out.add("train.iteration", Tensor::scalar(next_iteration));
  return out;
}

TrainState load_train_state(const TrainConfig& cfg, const fs::path& checkpoint) {
  TrainState s = TrainState::fresh(cfg);
  const ParameterList saved = read_checkpoint(checkpoint);
  auto need = [&](const std::string& name) -> const Tensor& {
    const Parameter* p = saved.find(name);
    if (!p) throw FormatError("checkpoint " + checkpoint.string() + " lacks tensor " + name);
    return p->tensor;
  };
  ParameterList state_tensors = s.backbone.parameters();
  state_tensors.append(s.backbone.buffers());
  for (const auto& p : state_tensors) {
    Tensor dst = p.tensor;
    copy_values(need(p.name), dst, p.name);
  }
  for (const auto& p : s.backbone.parameters()) {
    const Parameter* m = saved.find("optim.m." + p.name);
    const Parameter* v = saved.find("optim.v." + p.name);
    if (!m || !v) continue;
    s.adam.m[p.name].assign(m->tensor.data().begin(), m->tensor.data().end());
    s.adam.v[p.name].assign(v->tensor.data().begin(), v->tensor.data().end());
  }
  if (const Parameter* step = saved.find("optim.step")) s.adam.step = static_cast<std::int64_t>(step->tensor.item());
  if (const Parameter* mem = saved.find("memory.centroids")) {
    s.memory = {mem->tensor.clone(), cfg.tau, cfg.mu};
  }
  s.next_iteration = static_cast<int>(need("train.iteration").item());
  return s;
}

EpochReport train_iteration(TrainState& state, const UnlabeledImages& data, const IterationOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& cfg = state.config;
  if (data.size() == 0) throw ContractError("no training images");
  const int iteration = state.next_iteration;
  const auto iter_key = static_cast<std::uint64_t>(iteration);

  recalibrate_norm_stats(data.pixels, state.backbone, cfg.eval_batch);
  const Tensor features = extract_features_batched(data.pixels, state.backbone, cfg.eval_batch);
  const PseudoLabels labels = dbscan(cluster_distance(features, cfg), cfg.eps, cfg.min_pts);
  const ClusterSummary summary = cluster_summary(labels);

  EpochReport report;
  report.iteration = iteration;
  report.num_clusters = summary.num_clusters;
  report.noise_fraction = summary.noise_fraction;
  report.lr = lr_at(iteration * cfg.epochs_per_iteration, cfg);

  if (summary.num_clusters == 0 || summary.num_clusters < cfg.batch_p) {
    report.skipped = true;
  } else {
    state.memory = init_memory(features, labels, derive_seed(cfg.seed, kMemoryStream, iter_key), cfg.tau, cfg.mu);
    const ParameterList params = state.backbone.parameters();
    std::mt19937_64 aug_rng(derive_seed(cfg.seed, kAugmentStream, iter_key));
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (int e = 0; e < cfg.epochs_per_iteration; ++e) {
      const int epoch = iteration * cfg.epochs_per_iteration + e;
      const double lr = lr_at(epoch, cfg);
      const auto batches = pk_sampler(labels, cfg.batch_p, cfg.batch_k,
                                      derive_seed(cfg.seed, kSamplerStream, iter_key, static_cast<std::uint64_t>(e)));
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        const Batch& batch = batches[bi];
        std::vector<int> targets;
        targets.reserve(batch.size());
        for (std::size_t idx : batch) targets.push_back(labels.labels[idx]);
        Tensor x = gather_rows(data.pixels, batch);
        if (cfg.augment) augment_batch(x, aug_rng);

        for (const auto& p : params) {
          Tensor t = p.tensor;
          t.zero_grad();
        }
        const Tensor f = extract_features(x, state.backbone, true);
        const Tensor loss = cluster_nce_loss(f, targets, state.memory);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          if (options.dump_dir) write_dump(*options.dump_dir, features, labels, lr, iteration, bi);
          throw DivergenceError("non-finite loss at iteration " + std::to_string(iteration) + ", batch " +
                                std::to_string(bi) + ", lr " + fmt_double(lr) +
                                (options.dump_dir ? "; dump written to " + options.dump_dir->string() : ""));
        }
        loss.backward();
        adam_step(params, lr, state.adam);
        batch_hard_update(state.memory, f.detach(), targets);
        loss_sum += value;
        ++steps;
      }
    }
    report.mean_loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
  }
  state.next_iteration = iteration + 1;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string report_csv_header() { return "iter,K,noise_frac,mean_loss,lr,seconds"; }

std::string report_csv_row(const EpochReport& r) {
  return std::to_string(r.iteration) + "," + std::to_string(r.num_clusters) + "," + fmt_double(r.noise_fraction) +
         "," + fmt_double(r.mean_loss) + "," + fmt_double(r.lr) + "," + fmt_double(r.seconds);
}

RunResult run_training(const TrainConfig& cfg, const UnlabeledImages& data, const fs::path& run_dir, bool resume,
                       const std::function<void(const EpochReport&)>& on_report) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  write_text_file(run_dir / "config.txt", cfg.to_text());

  const fs::path ckpt = run_dir / "checkpoint.bin";
  const fs::path report_path = run_dir / "report.csv";
  RunResult result;
  result.state = (resume && fs::exists(ckpt)) ? load_train_state(cfg, ckpt) : TrainState::fresh(cfg);

  std::string kept = report_csv_header() + "\n";
  if (result.state.next_iteration > 0 && fs::exists(report_path)) {
    std::ifstream in(report_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoi(line.substr(0, line.find(','))) < result.state.next_iteration) kept += line + "\n";
    }
  }
  write_text_file(report_path, kept);

  auto save = [&] {
    const fs::path tmp = run_dir / "checkpoint.bin.tmp";
    save_checkpoint(tmp, result.state.checkpoint_tensors());
    fs::rename(tmp, ckpt, ec);
    if (ec) throw IoError("cannot move checkpoint into " + ckpt.string() + ": " + ec.message());
  };
  if (result.state.next_iteration >= cfg.clustering_iterations) save();

  IterationOptions options{run_dir / "divergence"};
  while (result.state.next_iteration < cfg.clustering_iterations) {
    EpochReport r = train_iteration(result.state, data, options);
    std::ofstream out(report_path, std::ios::app);
    if (!out) throw IoError("cannot append to " + report_path.string());
    out << report_csv_row(r) << '\n';
    out.close();
    save();
    if (on_report) on_report(r);
    result.reports.push_back(r);
  }
  return result;
}

}  // namespace mla
