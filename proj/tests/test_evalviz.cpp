#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mla/backbone.hpp"
#include "mla/dataio.hpp"
#include "mla/errors.hpp"
#include "mla/evalviz.hpp"
#include "mla/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mla;
using mla::testing::brute_force_metrics;
using mla::testing::grad_cam_oracle;
using mla::testing::random_retrieval_instance;
using mla::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

LabeledFeatures labeled(std::size_t d, std::vector<std::vector<double>> rows, std::vector<int> pids,
                        std::vector<int> camids) {
  std::vector<double> v;
  for (auto& r : rows) v.insert(v.end(), r.begin(), r.end());
  LabeledFeatures out;
  out.features = Tensor::from({rows.size(), d}, std::move(v));
  out.pids = std::move(pids);
  out.camids = std::move(camids);
  return out;
}

LabeledFeatures rows_of(const LabeledFeatures& s, const std::vector<std::size_t>& idx) {
  LabeledFeatures out;
  out.features = gather_rows(s.features, idx);
  for (auto i : idx) {
    out.pids.push_back(s.pids[i]);
    out.camids.push_back(s.camids[i]);
  }
  return out;
}

BackboneConfig tiny_config(AttentionMode mode) {
  BackboneConfig cfg;
  cfg.input_height = 16;
  cfg.input_width = 8;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = {1, 2};
  cfg.embed_dim = 6;
  cfg.heads = 2;
  cfg.attention_mode = mode;
  return cfg;
}

// Perturb the zero-initialised and unit running statistics so eval-mode
// normalization is not the identity.
void randomize_stats(BackboneParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& entry : p.buffers()) {
    Tensor t = entry.tensor;
    for (auto& v : t.mutable_data()) v = u(rng);
  }
  for (auto& g : p.embed_norm.gamma.mutable_data()) g = u(rng);
  for (auto& g : p.embed_norm.beta.mutable_data()) g = u(rng) - 1.0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("a single correct match at rank one") {
  const auto q = labeled(2, {{1, 0}}, {7}, {0});
  const auto g = labeled(2, {{1, 0}, {0, 1}}, {7, 3}, {1, 1});
  const auto m = evaluate(q, g);
  CHECK(m.mAP == 1.0);
  CHECK(m.cmc.at(1) == 1.0);
  CHECK(m.valid_queries == 1);
}

TEST_CASE("matches at ranks one and three") {
  const double s = std::sqrt(0.5);
  const auto q = labeled(2, {{1, 0}}, {1}, {0});
  // Similarities 1, 0.707, 0.5, -1 give ranks 1 (pid 1), 2 (pid 2), 3 (pid 1), 4 (pid 3).
  const auto g = labeled(2, {{0.5, std::sqrt(0.75)}, {-1, 0}, {1, 0}, {s, s}}, {1, 3, 1, 2}, {1, 1, 1, 1});
  const auto m = evaluate(q, g);
  CHECK(m.mAP == (1.0 + 2.0 / 3.0) / 2.0);
  CHECK(m.cmc.at(1) == 1.0);
}

TEST_CASE("same identity under the same camera is not a match") {
  const auto q = labeled(2, {{1, 0}}, {1}, {0});
  const auto g = labeled(2, {{1, 0}, {0, 1}, {0.6, 0.8}}, {1, 2, 1}, {0, 1, 1});
  const auto m = evaluate(q, g);
  // The identical same-camera image is dropped; the cross-camera one ranks first.
  CHECK(m.mAP == 1.0);
  const auto only_same = evaluate(q, labeled(2, {{1, 0}, {0, 1}}, {1, 2}, {0, 1}));
  CHECK(only_same.valid_queries == 0);
  CHECK(only_same.excluded_queries == 1);
  CHECK(only_same.mAP == 0.0);
}

TEST_CASE("ties are broken by gallery index") {
  const auto q = labeled(2, {{1, 0}}, {1}, {0});
  const auto first = evaluate(q, labeled(2, {{0, 1}, {0, 1}}, {1, 2}, {1, 1}));
  const auto second = evaluate(q, labeled(2, {{0, 1}, {0, 1}}, {2, 1}, {1, 1}));
  CHECK(first.mAP == 1.0);
  CHECK(second.mAP == 0.5);
}

TEST_CASE("metrics agree with a brute-force implementation on 100 random instances") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = random_retrieval_instance(rng, trial % 2 == 0);
    const auto got = evaluate(inst.query, inst.gallery);
    const auto want = brute_force_metrics(inst.query, inst.gallery);
    INFO("trial " << trial);
    CHECK(std::abs(got.mAP - want.mAP) < 1e-9);
    CHECK(got.valid_queries == want.valid_queries);
    CHECK(got.excluded_queries == want.excluded_queries);
    for (int k : {1, 5, 10}) CHECK(std::abs(got.cmc.at(k) - want.cmc.at(k)) < 1e-9);
    CHECK(got.cmc.at(1) <= got.cmc.at(5));
    CHECK(got.cmc.at(5) <= got.cmc.at(10));
    CHECK(got.mAP >= 0.0);
    CHECK(got.mAP <= 1.0);
  }
}

TEST_CASE("metrics are invariant to gallery order and to a common rotation") {
  std::mt19937_64 rng(5);
  const std::size_t d = 4;
  auto random_set = [&](std::size_t n) {
    LabeledFeatures s;
    s.features = ops::l2_normalize(random_tensor({n, d}, rng), 1).detach();
    for (std::size_t i = 0; i < n; ++i) {
      s.pids.push_back(static_cast<int>(rng() % 4));
      s.camids.push_back(static_cast<int>(rng() % 2));
    }
    return s;
  };
  // Orthogonal matrix from Gram-Schmidt on a random square matrix.
  auto rotation = [&]() {
    std::vector<std::vector<double>> m(d, std::vector<double>(d));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& r : m)
      for (auto& v : r) v = n(rng);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += m[i][k] * m[j][k];
        for (std::size_t k = 0; k < d; ++k) m[i][k] -= dot * m[j][k];
      }
      double nn = 0.0;
      for (double v : m[i]) nn += v * v;
      for (auto& v : m[i]) v /= std::sqrt(nn);
    }
    std::vector<double> flat;
    for (auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor::from({d, d}, flat);
  };
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_set(6), g = random_set(15);
    const auto base = evaluate(q, g);
    std::vector<std::size_t> perm(15);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(evaluate(q, rows_of(g, perm)).mAP == doctest::Approx(base.mAP).epsilon(1e-12));
    const Tensor r = rotation();
    auto rq = q, rg = g;
    rq.features = ops::matmul(q.features, r).detach();
    rg.features = ops::matmul(g.features, r).detach();
    const auto rotated = evaluate(rq, rg);
    CHECK(rotated.mAP == doctest::Approx(base.mAP).epsilon(1e-12));
    CHECK(rotated.cmc.at(1) == doctest::Approx(base.cmc.at(1)).epsilon(1e-12));
  }
}

TEST_CASE("metrics CSV") {
  RetrievalMetrics m;
  m.mAP = 0.5;
  m.cmc = {{1, 0.25}, {5, 0.75}, {10, 1.0}};
  m.valid_queries = 4;
  m.excluded_queries = 1;
  const std::string csv = metrics_csv(m);
  CHECK(csv.rfind("metric,value\nmAP,0.5", 0) == 0);
  CHECK(csv.find("cmc1,0.25") != std::string::npos);
  CHECK(csv.find("cmc10,1") != std::string::npos);
  CHECK(csv.find("valid_queries,4") != std::string::npos);
  CHECK(csv.find("excluded_queries,1") != std::string::npos);
}

TEST_CASE("uniform positive gradient on one channel gives the max-normalized activation") {
  const Tensor a = Tensor::from({2, 2, 1}, {0.5, -1.0, 2.0, 1.0});
  const std::vector<double> g(4, 0.3);
  const auto hm = grad_cam_combine(a, g);
  CHECK(hm.grid == std::vector<double>{0.25, 0.0, 1.0, 0.5});
}

TEST_CASE("zero gradient gives an all-zero map") {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 2, 4}, rng);
  const auto hm = grad_cam_combine(a, std::vector<double>(24, 0.0));
  CHECK(hm.grid == std::vector<double>(6, 0.0));
}

TEST_CASE("heatmap normalization is idempotent") {
  std::mt19937_64 rng(2);
  const Tensor a = random_tensor({3, 3, 2}, rng);
  const auto hm = grad_cam_combine(a, random_tensor({3, 3, 2}, rng).data());
  const auto again = grad_cam_combine(Tensor::from({3, 3, 1}, hm.grid), std::vector<double>(9, 1.0));
  CHECK(mla::testing::max_abs_diff(hm.grid, again.grid) < 1e-15);
}

TEST_CASE("network Grad-CAM matches a loop oracle") {
  for (auto mode : kAllAttentionModes) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(seed + 100);
      BackboneParams p = build_backbone(tiny_config(mode), seed);
      randomize_stats(p, rng);
      const Tensor image = random_tensor({16, 8, 3}, rng);
      Tensor fmap;
      {
        NoGradGuard guard;
        fmap = forward_to_featuremap(Tensor::from({1, 16, 8, 3}, std::vector<double>(image.data().begin(), image.data().end())), p, false);
      }
      const auto hm = grad_cam_heatmap(image, p, {});
      CHECK(hm.height == fmap.dim(1));
      CHECK(hm.width == fmap.dim(2));
      CHECK(mla::testing::max_abs_diff(hm.grid, grad_cam_oracle(fmap, p, nullptr, 0)) < 1e-10);

      MemoryDictionary mem;
      mem.centroids = ops::l2_normalize(random_tensor({3, 6}, rng), 1).detach();
      for (int k = 0; k < 3; ++k) {
        const auto hk = grad_cam_heatmap(image, p, {k, &mem});
        CHECK(mla::testing::max_abs_diff(hk.grid, grad_cam_oracle(fmap, p, &mem, k)) < 1e-10);
        for (double v : hk.grid) {
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
        }
      }
      for (const auto& entry : p.parameters()) {
        const auto g = entry.tensor.grad();
        CHECK(std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; }));
      }
    }
  }
}

TEST_CASE("Grad-CAM rejects invalid targets") {
  BackboneParams p = build_backbone(tiny_config(AttentionMode::kAll), 0);
  const Tensor image = Tensor::zeros({16, 8, 3});
  MemoryDictionary mem;
  mem.centroids = Tensor::from({1, 6}, {1, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(grad_cam_heatmap(image, p, {1, &mem}), ContractError);
  CHECK_THROWS_AS(grad_cam_heatmap(image, p, {-1, &mem}), ContractError);
  CHECK_THROWS_AS(grad_cam_heatmap(image, p, {0, nullptr}), ContractError);
  CHECK_THROWS_AS(grad_cam_heatmap(Tensor::zeros({1, 16, 8, 3}), p, {}), DimensionError);
}

TEST_CASE("bilinear upsampling of a 2x2 grid") {
  const std::vector<double> grid{0.0, 1.0, 2.0, 3.0};
  const auto up = bilinear_upsample(grid, 2, 2, 4, 4);
  // Output centres map to source coordinates -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
  const double t[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const double top = grid[0] * (1 - t[x]) + grid[1] * t[x];
      const double bottom = grid[2] * (1 - t[x]) + grid[3] * t[x];
      CHECK(std::abs(up[y * 4 + x] - (top * (1 - t[y]) + bottom * t[y])) < 1e-15);
    }
  CHECK(up[0] == 0.0);
  CHECK(up[5] == 0.75);
  CHECK(up[15] == 3.0);
  CHECK_THROWS_AS(bilinear_upsample(grid, 3, 2, 4, 4), DimensionError);
}

TEST_CASE("heatmap CSV round-trips") {
  const fs::path stem = fs::temp_directory_path() / "mla_hm_roundtrip";
  Heatmap hm{2, 3, {0.0, 0.1, 1.0 / 3.0, 0.5, 0.123456789012345678, 1.0}, "img", "score"};
  export_heatmap(hm, Tensor::zeros({8, 12, 3}), stem);
  const auto back = read_heatmap_csv(fs::path(stem.string() + ".csv"));
  CHECK(back.height == 2);
  CHECK(back.width == 3);
  CHECK(back.grid == hm.grid);
  fs::remove(stem.string() + ".csv");
  fs::remove(stem.string() + ".ppm");
}

TEST_CASE("an all-zero map overlays pure blue") {
  const fs::path stem = fs::temp_directory_path() / "mla_hm_zero";
  Heatmap hm{2, 2, std::vector<double>(4, 0.0), "img", "score"};
  std::vector<double> px(4 * 4 * 3);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : px) v = u(rng);
  const Tensor image = Tensor::from({4, 4, 3}, px);
  export_heatmap(hm, image, stem);
  const auto ppm = read_ppm(fs::path(stem.string() + ".ppm"));
  CHECK(ppm.height == 4);
  CHECK(ppm.width == 4);
  std::vector<double> blend(px.size());
  for (std::size_t i = 0; i < 16; ++i) {
    blend[i * 3 + 0] = 0.5 * px[i * 3 + 0];
    blend[i * 3 + 1] = 0.5 * px[i * 3 + 1];
    blend[i * 3 + 2] = 0.5 * px[i * 3 + 2] + 0.5;
  }
  CHECK(ppm.rgb == to_ppm(blend, 4, 4).rgb);
  const std::string csv = slurp(stem.string() + ".csv");
  CHECK(csv.find('1') == std::string::npos);
  fs::remove(stem.string() + ".csv");
  fs::remove(stem.string() + ".ppm");
}
