#include "mla/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "mla/attention.hpp"
#include "mla/contrast.hpp"
#include "mla/gradcheck.hpp"
#include "mla/ops.hpp"

namespace mla {

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// sum(y * w) with fixed random w.
Tensor probe(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng)));
}

class Suite {
 public:
  void check(const std::string& op, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.op == op; });
    if (it == entries_.end()) {
      entries_.push_back({op, 0.0, 0});
      it = entries_.end() - 1;
    }
    it->max_error = std::max(it->max_error, finite_diff_check(f, x));
  }
  void count_seed() {
    for (auto& e : entries_) ++e.seeds;
  }
  std::vector<GradCheckEntry> entries() const { return entries_; }

 private:
  std::vector<GradCheckEntry> entries_;
};

}  // namespace

std::vector<GradCheckEntry> run_gradient_suite(int seeds) {
  Suite s;
  for (int si = 1; si <= seeds; ++si) {
    const auto seed = static_cast<std::uint64_t>(si);
    std::mt19937_64 rng(seed);
    Rng init(seed + 1000);

    const Tensor img = random_tensor({2, 4, 3, 2}, rng);
    const Tensor kern = random_tensor({3, 3, 2, 3}, rng);
    const Tensor bias = random_tensor({3}, rng);
    s.check("conv2d", [&](const Tensor& t) { return probe(ops::conv2d(t, kern, bias, 2, 1), seed); }, img);
    s.check("conv2d", [&](const Tensor& t) { return probe(ops::conv2d(img, t, bias, 1, 1), seed); }, kern);
    s.check("conv2d", [&](const Tensor& t) { return probe(ops::conv2d(img, kern, t, 1, 0), seed); }, bias);

    const Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({4, 2}, rng);
    s.check("matmul", [&](const Tensor& t) { return probe(ops::matmul(t, b), seed); }, a);
    s.check("matmul", [&](const Tensor& t) { return probe(ops::matmul(a, t), seed); }, b);

    const Tensor v = random_tensor({3, 5}, rng, 2.0);
    s.check("softmax", [&](const Tensor& t) { return probe(ops::softmax(t, 1), seed); }, v);
    s.check("softmax", [&](const Tensor& t) { return probe(ops::softmax(t, 0), seed); }, v);
    s.check("sigmoid", [&](const Tensor& t) { return probe(ops::sigmoid(t), seed); }, v);
    s.check("relu", [&](const Tensor& t) { return probe(ops::relu(t), seed); }, v);
    s.check("l2_normalize", [&](const Tensor& t) { return probe(ops::l2_normalize(t, 1), seed); }, v);
    s.check("l1_normalize", [&](const Tensor& t) { return probe(ops::l1_normalize(t, 0), seed); }, ops::sigmoid(v).detach());
    s.check("avg_pool2x2", [&](const Tensor& t) { return probe(ops::avg_pool2x2(t), seed); }, img);

    const Tensor gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
    s.check("batch_norm", [&](const Tensor& t) {
      auto stats = ops::BatchNormStats::fresh(2);
      return probe(ops::batch_norm(t, gamma, beta, stats, true), seed);
    }, img);
    s.check("batch_norm", [&](const Tensor& t) {
      auto stats = ops::BatchNormStats::fresh(2);
      return probe(ops::batch_norm(img, t, beta, stats, true), seed);
    }, gamma);

    const Tensor x = random_tensor({2, 3, 2, 4}, rng);
    const auto pla = PlaParams::init(4, init);
    s.check("pla_forward", [&](const Tensor& t) { return probe(pla_forward(t, pla), seed); }, x);
    s.check("pla_forward", [&](const Tensor& t) { return probe(pla_forward(x, PlaParams{t, pla.bias}), seed); }, pla.kernel);
    s.check("pla_forward", [&](const Tensor& t) { return probe(pla_forward(x, PlaParams{pla.kernel, t}), seed); }, pla.bias);

    const auto hla = HlaParams::init(4, 2, 3, 3, init);
    s.check("hla_forward", [&](const Tensor& t) { return probe(hla_forward(t, hla), seed); }, x);
    for (auto member : {&HlaParams::w_q, &HlaParams::w_k, &HlaParams::w_v, &HlaParams::r_h, &HlaParams::r_w}) {
      s.check("hla_forward", [&](const Tensor& t) {
        HlaParams q = hla;
        q.*member = t;
        return probe(hla_forward(x, q), seed);
      }, hla.*member);
    }

    const auto dla = DlaParams::init(4, 3, init);
    s.check("dla_forward", [&](const Tensor& t) { return probe(dla_forward(t, dla), seed); }, x);
    for (auto member : {&DlaParams::w_q, &DlaParams::k_d, &DlaParams::v_d}) {
      s.check("dla_forward", [&](const Tensor& t) {
        DlaParams q = dla;
        q.*member = t;
        return probe(dla_forward(x, q), seed);
      }, dla.*member);
    }

    for (auto mode : kAllAttentionModes) {
      MlaBlockConfig cfg;
      cfg.c_in = 4;
      cfg.c_mid = 4;
      cfg.c_out = 6;
      cfg.heads = 2;
      cfg.h_max = 3;
      cfg.w_max = 2;
      auto block = MlaBlockParams::init(cfg, mode, init);
      s.check("mla_block_forward", [&](const Tensor& t) { return probe(mla_block_forward(t, block, mode, true), seed); }, x);
    }

    MemoryDictionary mem;
    mem.centroids = ops::l2_normalize(random_tensor({5, 6}, rng), 1).detach();
    const std::vector<int> targets{0, 3, 3, 4};
    s.check("cluster_nce_loss", [&](const Tensor& t) { return cluster_nce_loss(t, targets, mem); },
            ops::l2_normalize(random_tensor({4, 6}, rng), 1).detach());
    s.count_seed();
  }
  return s.entries();
}

}  // namespace mla
