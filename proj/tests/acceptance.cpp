// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criterion ids on the command line restrict the run to those.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mla/attention.hpp"
#include "mla/backbone.hpp"
#include "mla/clustering.hpp"
#include "mla/contrast.hpp"
#include "mla/dataio.hpp"
#include "mla/evalviz.hpp"
#include "mla/gradsuite.hpp"
#include "mla/ops.hpp"
#include "mla/pipeline.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace mla;
using mla::testing::max_abs_diff;
using mla::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

const fs::path kWork = fs::temp_directory_path() / "mla_acceptance";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1 -------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite(5);
  const double secs = seconds_since(t0);
  const std::vector<std::string> required{"conv2d",      "matmul",      "softmax",     "sigmoid",
                                          "relu",        "l2_normalize", "batch_norm", "pla_forward",
                                          "hla_forward", "dla_forward", "cluster_nce_loss"};
  double worst = 0.0;
  for (const auto& name : required) {
    const bool present = std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.op == name; });
    o.require(present, name + " missing");
  }
  bool has_block = false;
  for (const auto& e : entries) {
    if (e.op.rfind("mla_block_forward", 0) == 0) has_block = true;
    worst = std::max(worst, e.max_error);
    o.require(e.seeds == 5, e.op + " ran " + std::to_string(e.seeds) + " seeds");
    o.require(e.max_error < 1e-4, e.op + " error " + fmt("%.3g", e.max_error));
  }
  o.require(has_block, "mla_block_forward missing");
  o.require(secs < 60.0, "runtime " + fmt("%.1f", secs) + " s");
  o.detail = std::to_string(entries.size()) + " checks, worst relative error " + fmt("%.2e", worst) + ", " +
             fmt("%.1f", secs) + " s" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 2 -------------------------------------------------------------------

std::vector<double> pointwise(const Tensor& x, const Tensor& w) {
  const auto n = x.dim(0), h = x.dim(1), wd = x.dim(2), ci = x.dim(3), co = w.dim(3);
  std::vector<double> out(n * h * wd * co, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < wd; ++j)
        for (std::size_t k = 0; k < co; ++k) {
          double s = 0.0;
          for (std::size_t c = 0; c < ci; ++c) s += x.at({a, i, j, c}) * w.at({0, 0, c, k});
          out[((a * h + i) * wd + j) * co + k] = s;
        }
  return out;
}

bool transposed(const DlaParams& p) {
  const std::size_t c = p.k_d.dim(2), s = p.k_d.dim(3);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < s; ++j)
      if (p.v_d.at({0, 0, j, i}) != p.k_d.at({0, 0, i, j})) return false;
  return true;
}

Outcome exact_identities() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Rng init(seed);
    const Tensor x = random_tensor({2, 4, 3, 8}, rng);

    DlaParams dla = DlaParams::init(8, 4, init);
    dla.v_d = Tensor::zeros(dla.v_d.shape());
    const double e_dla = max_abs_diff(dla_forward(x, dla).data(), x.data());

    PlaParams pla = PlaParams::init(8, init);
    pla.kernel = Tensor::zeros(pla.kernel.shape());
    pla.bias = Tensor::zeros(pla.bias.shape());
    std::vector<double> half(x.data().begin(), x.data().end());
    for (auto& v : half) v *= 0.5;
    const double e_pla = max_abs_diff(pla_forward(x, pla).data(), half);

    HlaParams hla = HlaParams::init(8, 2, 1, 1, init);
    const Tensor x1 = random_tensor({3, 1, 1, 8}, rng);
    const double e_hla = max_abs_diff(hla_forward(x1, hla).data(), pointwise(x1, hla.w_v));

    o.require(e_dla <= 1e-12, "DLA(v_D=0) differs by " + fmt("%.3g", e_dla));
    o.require(e_pla <= 1e-12, "PLA(zero kernel) differs by " + fmt("%.3g", e_pla));
    o.require(e_hla <= 1e-12, "HLA(1x1) differs by " + fmt("%.3g", e_hla));
    worst = std::max({worst, e_dla, e_pla, e_hla});

    o.require(transposed(DlaParams::init(8, 4, init)), "DlaParams::init not transposed");
    BackboneConfig cfg;
    cfg.attention_mode = AttentionMode::kAll;
    const BackboneParams bb = build_backbone(cfg, seed);
    o.require(bb.mla.dla && transposed(*bb.mla.dla), "backbone DLA not transposed at init");
  }
  o.detail = "worst deviation " + fmt("%.2e", worst) + " over 5 seeds, v_D == k_D^T bit-exact" +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 3 -------------------------------------------------------------------

Outcome dbscan_oracle_check() {
  Outcome o;
  const TrainConfig defaults;
  o.require(defaults.eps == 0.4 && defaults.min_pts == 4, "defaults are not eps 0.4 / min_pts 4");
  std::mt19937_64 rng(2024);
  int matched = 0;
  for (int i = 0; i < 100; ++i) {
    const auto inst = mla::testing::random_dbscan_instance(rng);
    const auto d = pairwise_cosine_distance(inst.features);
    if (mla::testing::same_partition(dbscan(d, inst.eps, inst.min_pts), mla::testing::dbscan_oracle(d, inst.eps, inst.min_pts)))
      ++matched;
  }
  int default_matched = 0;
  for (int i = 0; i < 100; ++i) {
    const auto inst = mla::testing::random_dbscan_instance(rng);
    const auto d = pairwise_cosine_distance(inst.features);
    if (mla::testing::same_partition(dbscan(d, defaults.eps, defaults.min_pts),
                                     mla::testing::dbscan_oracle(d, defaults.eps, defaults.min_pts)))
      ++default_matched;
  }
  o.require(matched == 100, std::to_string(100 - matched) + " random-parameter mismatches");
  o.require(default_matched == 100, std::to_string(100 - default_matched) + " default-parameter mismatches");
  o.detail = std::to_string(matched) + "/100 random-parameter and " + std::to_string(default_matched) +
             "/100 eps=0.4,min_pts=4 instances match" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 4 -------------------------------------------------------------------

Outcome contrast_values() {
  Outcome o;
  MemoryDictionary one;
  one.centroids = Tensor::from({1, 3}, {0.0, 0.6, 0.8});
  const std::vector<int> zeros{0, 0};
  const double k1 = cluster_nce_loss(Tensor::from({2, 3}, {1, 0, 0, 0, 0, 1}), zeros, one).item();
  o.require(k1 == 0.0, "K=1 loss " + fmt("%.3g", k1));

  MemoryDictionary ortho;
  ortho.centroids = Tensor::from({2, 2}, {1, 0, 0, 1});
  ortho.tau = 1.0;
  const std::vector<int> t0{0};
  const double lo = cluster_nce_loss(Tensor::from({1, 2}, {1, 0}), t0, ortho).item();
  const double err = std::abs(lo - std::log(1.0 + std::exp(-1.0)));
  o.require(err < 1e-9, "orthogonal case off by " + fmt("%.3g", err));

  MemoryDictionary three;
  three.centroids = Tensor::from({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
  double prev = INFINITY;
  int decreasing = 0;
  for (int i = 0; i < 50; ++i) {
    const double s = -0.9 + 1.8 * i / 49.0;
    const double r = std::sqrt(1.0 - s * s - 0.13);
    const double l = cluster_nce_loss(Tensor::from({1, 4}, {s, 0.3, -0.2, r}), t0, three).item();
    if (l < prev) ++decreasing;
    prev = l;
  }
  o.require(decreasing == 50, "sweep not monotone");
  o.detail = "K=1 loss " + fmt("%g", k1) + ", orthogonal error " + fmt("%.1e", err) + ", " +
             std::to_string(decreasing) + "/50 sweep steps decrease" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 5 -------------------------------------------------------------------

bool metrics_close(const RetrievalMetrics& a, const RetrievalMetrics& b, double tol) {
  if (std::abs(a.mAP - b.mAP) > tol || a.valid_queries != b.valid_queries || a.excluded_queries != b.excluded_queries)
    return false;
  for (int k : {1, 5, 10})
    if (std::abs(a.cmc.at(k) - b.cmc.at(k)) > tol) return false;
  return true;
}

LabeledFeatures labeled(std::size_t d, const std::vector<std::vector<double>>& rows, std::vector<int> pids,
                        std::vector<int> cams) {
  std::vector<double> v;
  for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  LabeledFeatures f;
  f.features = Tensor::from({rows.size(), d}, std::move(v));
  f.pids = std::move(pids);
  f.camids = std::move(cams);
  return f;
}

Outcome metrics_oracle() {
  Outcome o;
  std::mt19937_64 rng(77);
  int matched = 0;
  for (int i = 0; i < 100; ++i) {
    const auto inst = mla::testing::random_retrieval_instance(rng, i % 2 == 0);
    if (metrics_close(evaluate(inst.query, inst.gallery),
                      mla::testing::brute_force_metrics(inst.query, inst.gallery), 1e-9))
      ++matched;
  }
  o.require(matched == 100, std::to_string(100 - matched) + " mismatches");
  // Positives at ranks 1 and 3: AP = (1 + 2/3) / 2.
  const double s = std::sqrt(0.5);
  const auto q = labeled(2, {{1, 0}}, {1}, {0});
  const auto g = labeled(2, {{0.5, std::sqrt(0.75)}, {-1, 0}, {1, 0}, {s, s}}, {1, 3, 1, 2}, {1, 1, 1, 1});
  const double ap = evaluate(q, g).mAP;
  o.require(ap == (1.0 + 2.0 / 3.0) / 2.0, "hand case AP " + fmt("%.17g", ap));
  o.detail = std::to_string(matched) + "/100 instances match within 1e-9, hand case AP " + fmt("%.4f", ap) +
             (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- shared data ---------------------------------------------------------

fs::path dataset_dir() { return kWork / "data"; }

void ensure_dataset() {
  if (fs::exists(dataset_dir() / "manifest.csv")) return;
  SynthSpec spec;  // 32 ids x 8 images x 2 cameras, 64x32, background 0.8
  synth_generate(spec, dataset_dir());
}

// ---- 6 -------------------------------------------------------------------

Outcome ablation_ordering() {
  Outcome o;
  ensure_dataset();
  const auto records = load_dataset(dataset_dir());
  const auto train = unlabeled_view(records, Split::kTrain);
  const AttentionMode modes[] = {AttentionMode::kAll, AttentionMode::kBaseline, AttentionMode::kHla};
  double map[5][3] = {};
  double worst_secs = 0.0;
  std::printf("  seed |    all | baseline |    hla | seconds (all, baseline, hla)\n");
  std::fflush(stdout);
  for (int seed = 0; seed < 5; ++seed) {
    double secs[3] = {};
    for (int m = 0; m < 3; ++m) {
      TrainConfig cfg = desk_config();
      cfg.seed = static_cast<std::uint64_t>(seed);
      cfg.attention_mode = modes[m];
      const auto t0 = Clock::now();
      auto result = run_training(cfg, train, kWork / "ablation" / (attention_mode_name(modes[m]) + std::to_string(seed)));
      map[seed][m] = evaluate_model(result.state.backbone, records, cfg.eval_batch).mAP;
      secs[m] = seconds_since(t0);
      worst_secs = std::max(worst_secs, secs[m]);
    }
    std::printf("  %4d | %6.3f | %8.3f | %6.3f | %.0f, %.0f, %.0f\n", seed, map[seed][0], map[seed][1], map[seed][2],
                secs[0], secs[1], secs[2]);
    std::fflush(stdout);
  }
  int all_ge_base = 0, hla_le_all = 0;
  for (auto& row : map) {
    if (row[0] >= row[1]) ++all_ge_base;
    if (row[2] <= row[0]) ++hla_le_all;
  }
  o.require(all_ge_base >= 4, "all >= baseline on only " + std::to_string(all_ge_base) + "/5 seeds");
  o.require(hla_le_all >= 4, "hla <= all on only " + std::to_string(hla_le_all) + "/5 seeds");
  o.require(worst_secs < 600.0, "slowest run " + fmt("%.0f", worst_secs) + " s");
  o.detail = "all>=baseline " + std::to_string(all_ge_base) + "/5, hla<=all " + std::to_string(hla_le_all) +
             "/5, slowest run " + fmt("%.0f", worst_secs) + " s" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 7 -------------------------------------------------------------------

bool same_report(const EpochReport& a, const EpochReport& b) {
  return a.iteration == b.iteration && a.num_clusters == b.num_clusters && a.noise_fraction == b.noise_fraction &&
         a.mean_loss == b.mean_loss && a.lr == b.lr && a.skipped == b.skipped;
}

bool same_reports(const std::vector<EpochReport>& a, const std::vector<EpochReport>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), same_report);
}

Outcome determinism_and_resume() {
  Outcome o;
  ensure_dataset();
  const auto train = unlabeled_view(load_dataset(dataset_dir()), Split::kTrain);
  TrainConfig cfg = desk_config();
  cfg.clustering_iterations = 3;
  cfg.epochs_per_iteration = 1;
  cfg.seed = 11;
  const fs::path root = kWork / "determinism";
  fs::remove_all(root);

  const auto a = run_training(cfg, train, root / "a");
  const auto b = run_training(cfg, train, root / "b");
  o.require(same_reports(a.reports, b.reports), "report streams differ");
  o.require(slurp(root / "a" / "checkpoint.bin") == slurp(root / "b" / "checkpoint.bin"), "checkpoints differ");

  TrainConfig first = cfg;
  first.clustering_iterations = 1;
  const auto part1 = run_training(first, train, root / "resumed");
  const auto part2 = run_training(cfg, train, root / "resumed", true);
  std::vector<EpochReport> joined = part1.reports;
  joined.insert(joined.end(), part2.reports.begin(), part2.reports.end());
  o.require(part2.reports.size() == 2, "resume ran " + std::to_string(part2.reports.size()) + " iterations");
  o.require(same_reports(joined, a.reports), "resumed reports differ");
  o.require(slurp(root / "resumed" / "checkpoint.bin") == slurp(root / "a" / "checkpoint.bin"),
            "resumed checkpoint differs");
  int clusters = 0;
  for (const auto& r : a.reports) clusters += r.num_clusters;
  o.detail = "3-iteration runs bit-identical (K per iteration summed " + std::to_string(clusters) +
             "), 1+2 resume equals straight 3" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

// ---- 8 -------------------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MLA_CLI_PATH) + " " + args + " >" + (kWork / "cli_out.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome heatmap_contract() {
  Outcome o;
  // Combination contract.
  std::mt19937_64 rng(5);
  const Tensor acts = random_tensor({4, 2, 6}, rng);
  const auto hm = grad_cam_combine(acts, random_tensor({4, 2, 6}, rng).data());
  o.require(std::all_of(hm.grid.begin(), hm.grid.end(), [](double v) { return v >= 0.0 && v <= 1.0; }),
            "combined map leaves [0,1]");
  const auto flat = grad_cam_combine(acts, std::vector<double>(48, 0.0));
  o.require(std::all_of(flat.grid.begin(), flat.grid.end(), [](double v) { return v == 0.0; }),
            "zero gradient gives a non-zero map");

  // Network heatmaps against the loop oracle, every mode.
  double worst = 0.0;
  for (auto mode : kAllAttentionModes) {
    BackboneConfig cfg;
    cfg.attention_mode = mode;
    BackboneParams p = build_backbone(cfg, 3);
    std::mt19937_64 r2(9);
    const Tensor image = random_tensor({cfg.input_height, cfg.input_width, 3}, r2);
    Tensor fmap;
    {
      NoGradGuard guard;
      fmap = forward_to_featuremap(
          Tensor::from({1, cfg.input_height, cfg.input_width, 3}, std::vector<double>(image.data().begin(), image.data().end())),
          p, false);
    }
    worst = std::max(worst, max_abs_diff(grad_cam_heatmap(image, p, {}).grid,
                                         mla::testing::grad_cam_oracle(fmap, p, nullptr, 0)));
    MemoryDictionary mem;
    mem.centroids = ops::l2_normalize(random_tensor({3, cfg.embed_dim}, r2), 1).detach();
    for (int k = 0; k < 3; ++k) {
      const auto got = grad_cam_heatmap(image, p, {k, &mem});
      worst = std::max(worst, max_abs_diff(got.grid, mla::testing::grad_cam_oracle(fmap, p, &mem, k)));
      o.require(std::all_of(got.grid.begin(), got.grid.end(), [](double v) { return v >= 0.0 && v <= 1.0; }),
                "network map leaves [0,1]");
    }
  }
  o.require(worst < 1e-10, "oracle deviation " + fmt("%.3g", worst));

  // CLI: one short run per mode, then a panel per image.
  ensure_dataset();
  const fs::path root = kWork / "heatmap";
  fs::remove_all(root);
  std::string runs;
  for (auto mode : kAllAttentionModes) {
    const auto name = attention_mode_name(mode);
    const fs::path dir = root / name;
    const int code = run_cli("train --data " + dataset_dir().string() + " --out " + dir.string() +
                             " --preset desk --mode " + name + " --set clustering_iterations=1");
    o.require(code == 0, "train " + name + " exited " + std::to_string(code));
    runs += " --run " + dir.string();
  }
  const fs::path panels = root / "panels";
  const int code = run_cli("heatmap --data " + dataset_dir().string() + runs + " --count 4 --panel-dir " + panels.string());
  o.require(code == 0, "heatmap exited " + std::to_string(code));
  std::size_t overlays = 0, panel_count = 0;
  const SynthSpec spec;
  try {
    for (auto mode : kAllAttentionModes) {
      const fs::path dir = root / attention_mode_name(mode) / "heatmaps";
      if (!fs::exists(dir)) continue;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".ppm") continue;
        const auto img = read_ppm(e.path());
        o.require(img.height == spec.height && img.width == spec.width, "overlay size");
        const auto h = read_heatmap_csv(fs::path(e.path()).replace_extension(".csv"));
        o.require(std::all_of(h.grid.begin(), h.grid.end(), [](double v) { return v >= 0.0 && v <= 1.0; }),
                  "exported map leaves [0,1]");
        ++overlays;
      }
    }
    if (fs::exists(panels))
      for (const auto& e : fs::directory_iterator(panels)) {
        const auto img = read_ppm(e.path());
        o.require(img.height == spec.height && img.width == spec.width * 7, "panel size");
        ++panel_count;
      }
  } catch (const std::exception& e) {
    o.require(false, std::string("invalid PPM: ") + e.what());
  }
  o.require(overlays == 24, std::to_string(overlays) + " overlays instead of 24");
  o.require(panel_count == 4, std::to_string(panel_count) + " panels instead of 4");
  o.detail = "oracle deviation " + fmt("%.2e", worst) + ", " + std::to_string(overlays) + " overlays over 6 modes, " +
             std::to_string(panel_count) + " seven-panel PPMs" + (o.detail.empty() ? "" : " | " + o.detail);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "exact attention identities", exact_identities},
      {3, "DBSCAN oracle", dbscan_oracle_check},
      {4, "ClusterNCE values", contrast_values},
      {5, "retrieval metrics oracle", metrics_oracle},
      {7, "determinism and resume", determinism_and_resume},
      {8, "heatmap contract", heatmap_contract},
      {6, "desk-scale ablation ordering", ablation_ordering},
  };
  std::vector<std::pair<int, bool>> results;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s (%.1f s) - %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, seconds_since(t0),
                o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(c.id, o.pass);
  }
  std::sort(results.begin(), results.end());
  int passed = 0;
  std::printf("summary:");
  for (auto [id, ok] : results) {
    std::printf(" %d=%s", id, ok ? "PASS" : "FAIL");
    passed += ok;
  }
  std::printf(" (%d/%zu)\n", passed, results.size());
  fs::remove_all(kWork);
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
