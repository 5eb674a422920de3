#include <cstdio>
#include <filesystem>
#include <optional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mla/dataio.hpp"
#include "mla/errors.hpp"
#include "mla/evalviz.hpp"
#include "mla/gradsuite.hpp"
#include "mla/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mla;

namespace {

struct SynthArgs {
  fs::path out;
  SynthSpec spec;
};

struct TrainArgs {
  fs::path data, out, config;
  std::string preset = "desk";
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool resume = false;
  bool evaluate = false;
};

struct EvalArgs {
  fs::path data, run, checkpoint;
};

struct HeatmapArgs {
  fs::path data, panel_dir;
  std::vector<fs::path> runs;
  std::vector<std::string> images;
  std::size_t count = 4;
  std::string target = "auto";
};

TrainConfig effective_config(const TrainArgs& a) {
  if (a.preset != "desk" && a.preset != "full") throw ConfigError("preset must be desk or full");
  TrainConfig cfg = a.preset == "desk" ? desk_config() : TrainConfig{};
  if (!a.config.empty()) cfg = load_config(a.config, cfg);
  if (!a.mode.empty()) cfg.attention_mode = parse_attention_mode(a.mode);
  if (a.seed) cfg.seed = *a.seed;
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void print_metrics(const RetrievalMetrics& m) { std::cout << metrics_csv(m); }

int run_synth(const SynthArgs& a) {
  a.spec.validate();
  const std::size_t n = synth_generate(a.spec, a.out);
  std::printf("wrote %zu images to %s\n", n, a.out.string().c_str());
  return 0;
}

int run_train(const TrainArgs& a) {
  const TrainConfig cfg = effective_config(a);
  std::cout << "# effective configuration\n" << cfg.to_text() << std::flush;
  const auto records = load_dataset(a.data);
  const auto train = unlabeled_view(records, Split::kTrain);
  if (train.size() == 0) throw ContractError("no training images under " + (a.data / "train").string());
  std::cout << report_csv_header() << '\n';
  auto result = run_training(cfg, train, a.out, a.resume,
                             [](const EpochReport& r) { std::cout << report_csv_row(r) << std::endl; });
  if (a.evaluate) {
    const auto m = evaluate_model(result.state.backbone, records, cfg.eval_batch);
    write_metrics_csv(a.out / "metrics.csv", m);
    print_metrics(m);
  }
  return 0;
}

TrainState load_run(const fs::path& run, const fs::path& checkpoint = {}) {
  const TrainConfig cfg = load_config(run / "config.txt");
  return load_train_state(cfg, checkpoint.empty() ? run / "checkpoint.bin" : checkpoint);
}

int run_eval(const EvalArgs& a) {
  TrainState state = load_run(a.run, a.checkpoint);
  std::cout << "# effective configuration\n" << state.config.to_text();
  const auto records = load_dataset(a.data);
  const auto m = evaluate_model(state.backbone, records, state.config.eval_batch);
  write_metrics_csv(a.run / "metrics.csv", m);
  print_metrics(m);
  return 0;
}

std::vector<ImageRecord> pick_images(const std::vector<ImageRecord>& records, const HeatmapArgs& a) {
  std::vector<ImageRecord> out;
  if (a.images.empty()) {
    for (const auto& r : select_split(records, Split::kQuery)) {
      if (out.size() == a.count) break;
      out.push_back(r);
    }
    return out;
  }
  for (const auto& want : a.images) {
    bool found = false;
    for (const auto& r : records)
      if (r.path == want || fs::path(r.path).filename() == want) {
        out.push_back(r);
        found = true;
        break;
      }
    if (!found) throw IoError("image " + want + " not found in " + a.data.string());
  }
  return out;
}

CamTarget resolve_target(const std::string& spec, const Tensor& image, TrainState& state) {
  if (spec == "norm") return {};
  const bool has_memory = state.memory.centroids.defined();
  if (spec == "auto") {
    if (!has_memory) return {};
    Tensor f = extract_features_batched(Tensor::from({1, image.dim(0), image.dim(1), image.dim(2)},
                                                     std::vector<double>(image.data().begin(), image.data().end())),
                                        state.backbone, 1);
    const std::size_t d = f.dim(1);
    int best = 0;
    double best_sim = -2.0;
    for (std::size_t k = 0; k < state.memory.size(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += f.data()[j] * state.memory.centroids.data()[k * d + j];
      if (s > best_sim) {
        best_sim = s;
        best = static_cast<int>(k);
      }
    }
    return {best, &state.memory};
  }
  int id = 0;
  try {
    id = std::stoi(spec);
  } catch (const std::exception&) {
    throw ConfigError("--target must be auto, norm or a cluster id, got '" + spec + "'");
  }
  if (!has_memory) throw ContractError("run has no memory dictionary; use --target norm");
  return {id, &state.memory};
}

int run_heatmap(const HeatmapArgs& a) {
  const auto records = load_dataset(a.data);
  const auto images = pick_images(records, a);
  if (images.empty()) throw ContractError("no images selected");
  const auto train = unlabeled_view(records, Split::kTrain);

  // panels[i] holds the original followed by one overlay per run.
  std::vector<std::vector<std::vector<double>>> panels(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto px = images[i].pixels.data();
    panels[i].emplace_back(px.begin(), px.end());
  }
  for (const auto& run : a.runs) {
    TrainState state = load_run(run);
    if (train.size() > 0) recalibrate_norm_stats(train.pixels, state.backbone, state.config.eval_batch);
    const fs::path dir = run / "heatmaps";
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& rec = images[i];
      const CamTarget target = resolve_target(a.target, rec.pixels, state);
      const Heatmap hm = grad_cam_heatmap(rec.pixels, state.backbone, target, rec.path);
      const std::string stem = fs::path(rec.path).stem().string();
      export_heatmap(hm, rec.pixels, dir / stem);
      panels[i].push_back(overlay_heatmap(hm, rec.pixels));
      std::printf("%s %s %s -> %s.ppm\n", attention_mode_name(state.config.attention_mode).c_str(), rec.path.c_str(),
                  hm.target.c_str(), (dir / stem).string().c_str());
    }
  }
  if (!a.panel_dir.empty()) {
    std::error_code ec;
    fs::create_directories(a.panel_dir, ec);
    if (ec) throw IoError("cannot create " + a.panel_dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::size_t h = images[i].pixels.dim(0), w = images[i].pixels.dim(1), n = panels[i].size();
      std::vector<double> strip(h * w * n * 3);
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
              strip[(y * w * n + p * w + x) * 3 + c] = panels[i][p][(y * w + x) * 3 + c];
      const fs::path out = a.panel_dir / (fs::path(images[i].path).stem().string() + "_panel.ppm");
      write_ppm(out, to_ppm(strip, h, w * n));
      std::printf("panel -> %s\n", out.string().c_str());
    }
  }
  return 0;
}

int run_grad_check(int seeds) {
  const auto results = run_gradient_suite(seeds);
  bool ok = true;
  std::printf("%-20s %-12s %s\n", "op", "max_error", "seeds");
  for (const auto& r : results) {
    std::printf("%-20s %-12.3e %d\n", r.op.c_str(), r.max_error, r.seeds);
    ok = ok && r.max_error < kGradCheckTolerance;
  }
  std::printf("%s (tolerance %.0e)\n", ok ? "all gradients agree" : "gradient mismatch", kGradCheckTolerance);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-level attention re-ID trainer on synthetic pedestrians"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate the synthetic confounded dataset");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--ids", synth.spec.num_ids, "Number of identities");
  s->add_option("--images-per-id", synth.spec.images_per_id, "Images per identity per camera");
  s->add_option("--cameras", synth.spec.num_cameras, "Number of cameras");
  s->add_option("--height", synth.spec.height, "Image height");
  s->add_option("--width", synth.spec.width, "Image width");
  s->add_option("--background-strength", synth.spec.background_strength, "Camera background weight in [0, 1]");
  s->add_option("--noise", synth.spec.noise_sigma, "Gaussian pixel noise sigma");
  s->add_option("--jitter", synth.spec.jitter, "Per-image placement and colour jitter scale");
  s->add_option("--seed", synth.spec.seed, "Generator seed");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Alternate clustering and contrastive training");
  t->add_option("--data", train.data, "Dataset directory")->required();
  t->add_option("--out", train.out, "Run directory")->required();
  t->add_option("--config", train.config, "Config file of key = value lines");
  t->add_option("--preset", train.preset, "Base settings: desk or full");
  t->add_option("--mode", train.mode, "baseline, pla, hla, pla+hla, dla or all");
  t->add_option("--seed", train.seed, "Run seed");
  t->add_option("--set", train.overrides, "Override a config key: key=value (repeatable)");
  t->add_flag("--resume", train.resume, "Continue from the run directory's checkpoint");
  t->add_flag("--eval", train.evaluate, "Evaluate query against gallery afterwards");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a run's checkpoint (mAP, CMC)");
  e->add_option("--data", eval.data, "Dataset directory")->required();
  e->add_option("--run", eval.run, "Run directory")->required();
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint file (default <run>/checkpoint.bin)");

  HeatmapArgs heat;
  auto* h = app.add_subcommand("heatmap", "Grad-CAM overlays for one or more runs");
  h->add_option("--data", heat.data, "Dataset directory")->required();
  h->add_option("--run", heat.runs, "Run directory (repeatable, one panel column each)")->required();
  h->add_option("--image", heat.images, "Image path relative to the dataset, or file name (repeatable)");
  h->add_option("--count", heat.count, "Query images to use when no --image is given");
  h->add_option("--target", heat.target, "auto (nearest cluster), norm, or a cluster id");
  h->add_option("--panel-dir", heat.panel_dir, "Write side-by-side panels (image, then each run) here");

  int seeds = 5;
  auto* g = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op");
  g->add_option("--seeds", seeds, "Random instances per op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*h) return run_heatmap(heat);
    if (*g) return run_grad_check(seeds);
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 1;
}
