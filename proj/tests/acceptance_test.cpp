#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "isae/checkpoint.hpp"
#include "isae/dataset_io.hpp"
#include "isae/eval.hpp"
#include "isae/train.hpp"
#include "test_util.hpp"

using isae::BatchPlan;
using isae::Graph;
using isae::kNumParts;
using isae::Model;
using isae::Parameter;
using isae::real;
using isae::Rng;
using isae::Sprite;
using isae::SubspaceLayout;
using isae::Tensor;
using isae::TrainConfig;
using isae::testing::random_tensor;

namespace {

// Prints exactly one line per criterion when the test scope closes.
struct Criterion {
  int n;
  std::string detail;

  explicit Criterion(int num) : n(num) {}
  ~Criterion() {
    std::printf("CRITERION %d: %s - %s\n", n,
                ::testing::Test::HasFailure() ? "FAIL" : "PASS", detail.c_str());
    std::fflush(stdout);
  }
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Round-tripped through the dataset file format so the training data here is
// bit-identical to what `isae gen-data` + `isae train` operate on.
const std::vector<Sprite>& dataset() {
  static const std::vector<Sprite> data = [] {
    isae::GenParams gp;
    gp.seed = 1;
    gp.count = 4096;
    const std::string path = ::testing::TempDir() + "/acceptance_faces.sds1";
    isae::write_dataset(isae::generate(gp), path);
    return isae::read_dataset(path);
  }();
  return data;
}

isae::TrainOutput<real>& isa_run() {
  static isae::TrainOutput<real> out = isae::train<real>(TrainConfig{}, dataset());
  return out;
}

isae::TrainOutput<real>& noisa_run() {
  static isae::TrainOutput<real> out = [] {
    TrainConfig cfg;
    cfg.enable_isa = false;
    return isae::train<real>(cfg, dataset());
  }();
  return out;
}

// ---- criterion 1 helpers ---------------------------------------------

// Per-tensor gradient check: central differences against backward, error
// normalized by the largest entry of either gradient.
template <typename T>
double max_rel_error(const std::vector<Parameter<T>*>& params,
                     const std::function<int(Graph<T>&)>& build, double h) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g;
    g.backward(build(g));
  }
  double worst = 0.0;
  for (auto* p : params) {
    double num = 0.0, den = 1e-6;
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const T orig = p->value.data[i];
      p->value.data[i] = orig + static_cast<T>(h);
      Graph<T> gp;
      const double fp = static_cast<double>(gp.val(build(gp)).data[0]);
      p->value.data[i] = orig - static_cast<T>(h);
      Graph<T> gm;
      const double fm = static_cast<double>(gm.val(build(gm)).data[0]);
      p->value.data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = static_cast<double>(p->grad.data[i]);
      num = std::max(num, std::abs(an - fd));
      den = std::max({den, std::abs(an), std::abs(fd)});
    }
    worst = std::max(worst, num / den);
  }
  return worst;
}

using Owned = std::vector<std::unique_ptr<Parameter<real>>>;
using Build = std::function<int(Graph<real>&)>;

struct OpCheck {
  const char* name;
  double h;
  std::function<Build(Rng&, Owned&)> make;
};

// Reduces an op output to a scalar with a fixed random projection. The weight
// tensor is drawn once on the first call so repeated evaluations (analytic
// pass, then finite-difference probes) differentiate the same function.
int weighted_sum(Graph<real>& g, int node, const std::shared_ptr<Tensor<real>>& cache, Rng& rng) {
  if (cache->data.empty()) *cache = random_tensor<real>(g.val(node).shape, rng, -1.0, 1.0);
  return isae::ops::sum_all(g, isae::ops::mul(g, node, g.constant(*cache)));
}

Tensor<real> separated_tensor(const std::vector<int>& shape, Rng& rng, const Tensor<real>& other,
                              double gap) {
  Tensor<real> t(shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    do {
      t.data[i] = static_cast<real>(rng.uniform(-1.0, 1.0));
    } while (std::abs(static_cast<double>(t.data[i] - other.data[i])) < gap);
  }
  return t;
}

Parameter<real>* make_param(Owned& owned, const char* name, Tensor<real> v) {
  owned.push_back(std::make_unique<Parameter<real>>(name, std::move(v)));
  return owned.back().get();
}

std::vector<OpCheck> op_checks() {
  namespace ops = isae::ops;
  std::vector<OpCheck> checks;

  const auto binary = [&checks](const char* name, auto fn, double gap = 0.0) {
    checks.push_back({name, 0.02, [fn, gap](Rng& rng, Owned& owned) -> Build {
      auto a = random_tensor<real>({2, 3, 4}, rng, -1.0, 1.0);
      auto b = gap > 0.0 ? separated_tensor({2, 3, 4}, rng, a, gap)
                         : random_tensor<real>({2, 3, 4}, rng, -1.0, 1.0);
      auto* pa = make_param(owned, "a", std::move(a));
      auto* pb = make_param(owned, "b", std::move(b));
      auto w = std::make_shared<Tensor<real>>();
      return [&rng, pa, pb, fn, w](Graph<real>& g) {
        return weighted_sum(g, fn(g, g.leaf(*pa), g.leaf(*pb)), w, rng);
      };
    }});
  };
  binary("add", [](Graph<real>& g, int a, int b) { return ops::add(g, a, b); });
  binary("sub", [](Graph<real>& g, int a, int b) { return ops::sub(g, a, b); });
  binary("mul", [](Graph<real>& g, int a, int b) { return ops::mul(g, a, b); });
  binary("max2", [](Graph<real>& g, int a, int b) { return ops::max2(g, a, b); }, 0.08);
  binary("min2", [](Graph<real>& g, int a, int b) { return ops::min2(g, a, b); }, 0.08);

  const auto unary = [&checks](const char* name, auto fn, double lo, double hi, double h) {
    checks.push_back({name, h, [fn, lo, hi](Rng& rng, Owned& owned) -> Build {
      auto* px = make_param(owned, "x", random_tensor<real>({3, 5}, rng, lo, hi));
      auto w = std::make_shared<Tensor<real>>();
      return [&rng, px, fn, w](Graph<real>& g) {
        return weighted_sum(g, fn(g, g.leaf(*px)), w, rng);
      };
    }});
  };
  unary("relu", [](Graph<real>& g, int x) { return ops::relu(g, x); }, 0.1, 1.0, 0.02);
  unary("sigmoid", [](Graph<real>& g, int x) { return ops::sigmoid(g, x); }, -2.0, 2.0, 0.02);
  unary("log_e", [](Graph<real>& g, int x) { return ops::log_e(g, x); }, 0.3, 2.0, 0.01);
  unary("softmax_rows", [](Graph<real>& g, int x) { return ops::softmax_rows(g, x); }, -2.0, 2.0,
        0.02);
  unary("add_scalar", [](Graph<real>& g, int x) { return ops::add_scalar(g, x, real(0.7)); },
        -1.0, 1.0, 0.05);
  unary("mul_scalar", [](Graph<real>& g, int x) { return ops::mul_scalar(g, x, real(-1.3)); },
        -1.0, 1.0, 0.05);
  unary("reshape", [](Graph<real>& g, int x) { return ops::reshape(g, x, {5, 3}); }, -1.0, 1.0,
        0.05);
  unary("slice_cols", [](Graph<real>& g, int x) { return ops::slice_cols(g, x, 1, 3); }, -1.0,
        1.0, 0.05);
  unary("sum_all", [](Graph<real>& g, int x) { return ops::sum_all(g, x); }, -1.0, 1.0, 0.05);
  unary("mean_all", [](Graph<real>& g, int x) { return ops::mean_all(g, x); }, -1.0, 1.0, 0.05);

  const auto pair_op = [&checks](const char* name, std::vector<int> sa, std::vector<int> sb,
                                 auto fn, double lo = -1.0, double hi = 1.0) {
    checks.push_back({name, 0.05, [sa, sb, fn, lo, hi](Rng& rng, Owned& owned) -> Build {
      auto* pa = make_param(owned, "a", random_tensor<real>(sa, rng, lo, hi));
      auto* pb = make_param(owned, "b", random_tensor<real>(sb, rng, lo, hi));
      auto w = std::make_shared<Tensor<real>>();
      return [&rng, pa, pb, fn, w](Graph<real>& g) {
        return weighted_sum(g, fn(g, g.leaf(*pa), g.leaf(*pb)), w, rng);
      };
    }});
  };
  pair_op("matmul", {3, 4}, {4, 2},
          [](Graph<real>& g, int a, int b) { return ops::matmul(g, a, b); });
  pair_op("bias_add", {3, 4}, {4},
          [](Graph<real>& g, int x, int b) { return ops::bias_add(g, x, b); });
  pair_op("row_scale", {3, 4}, {4},
          [](Graph<real>& g, int x, int v) { return ops::row_scale(g, x, v); });
  pair_op("concat_rows", {2, 4}, {3, 4},
          [](Graph<real>& g, int a, int b) { return ops::concat_rows(g, {a, b}); });
  pair_op("channel_bias_add", {2, 3, 4, 4}, {3},
          [](Graph<real>& g, int x, int b) { return ops::channel_bias_add(g, x, b); });
  pair_op("conv2d_s1p1", {2, 3, 5, 5}, {4, 3, 3, 3},
          [](Graph<real>& g, int x, int w) { return ops::conv2d(g, x, w, 1, 1); }, -0.5, 0.5);
  pair_op("conv2d_s2p1", {2, 3, 6, 6}, {4, 3, 3, 3},
          [](Graph<real>& g, int x, int w) { return ops::conv2d(g, x, w, 2, 1); }, -0.5, 0.5);
  pair_op("isa_to_latent", {3, 6}, {6, 6},
          [](Graph<real>& g, int s, int a) { return ops::isa_to_latent(g, s, a); });

  const auto image_unary = [&checks](const char* name, auto fn, std::vector<int> shape) {
    checks.push_back({name, 0.05, [fn, shape](Rng& rng, Owned& owned) -> Build {
      auto* px = make_param(owned, "x", random_tensor<real>(shape, rng, -1.0, 1.0));
      auto w = std::make_shared<Tensor<real>>();
      return [&rng, px, fn, w](Graph<real>& g) {
        return weighted_sum(g, fn(g, g.leaf(*px)), w, rng);
      };
    }});
  };
  image_unary("upsample2_nearest",
              [](Graph<real>& g, int x) { return ops::upsample2_nearest(g, x); }, {2, 3, 3, 3});
  image_unary("diff_x", [](Graph<real>& g, int x) { return ops::diff_x(g, x); }, {2, 2, 4, 4});
  image_unary("diff_y", [](Graph<real>& g, int x) { return ops::diff_y(g, x); }, {2, 2, 4, 4});

  checks.push_back({"isa_to_sources", 0.01, [](Rng& rng, Owned& owned) -> Build {
    auto a = Tensor<real>::identity(6);
    for (auto& v : a.data) v += static_cast<real>(rng.uniform(-0.2, 0.2));
    auto* pa = make_param(owned, "a", std::move(a));
    auto* pz = make_param(owned, "z", random_tensor<real>({3, 6}, rng, -1.0, 1.0));
    auto w = std::make_shared<Tensor<real>>();
    return [&rng, pa, pz, w](Graph<real>& g) {
      const auto inv = isae::invert_matrix(pa->value);
      return weighted_sum(g, isae::ops::isa_to_sources(g, g.leaf(*pz), g.leaf(*pa), inv), w, rng);
    };
  }});
  return checks;
}

// ---- test cases --------------------------------------------------------

TEST(Acceptance, Criterion1AutodiffGradients) {
  Criterion c(1);
  constexpr int kInstances = 20;
  constexpr double kTol = 1e-3;

  const auto checks = op_checks();
  double worst_op = 0.0;
  std::string worst_name = "none";
  Rng rng(2026);
  for (const auto& check : checks) {
    for (int inst = 0; inst < kInstances; ++inst) {
      Owned owned;
      const Build build = check.make(rng, owned);
      std::vector<Parameter<real>*> params;
      for (auto& p : owned) params.push_back(p.get());
      const double rel = max_rel_error<real>(params, build, check.h);
      EXPECT_LE(rel, kTol) << check.name << " instance " << inst;
      if (rel > worst_op) {
        worst_op = rel;
        worst_name = check.name;
      }
    }
  }

  // Composite training loss. Finite differences run on the double
  // instantiation (32-bit FD noise would drown the smallest gradients); the
  // float build is then cross-checked against the double gradients per tensor.
  // The entropy term intentionally routes its gradient around the encoder
  // (it stops at z), so plain FD of the full composite would disagree on
  // encoder tensors by design. The check therefore splits: the lambda4=0
  // composite is FD-verified on every parameter, and the entropy term alone
  // on the mixing/head/classifier side it actually trains. The blocked paths
  // themselves are pinned to exact zeros by criterion 3, and gradients are
  // linear in the loss weights, so together this covers the full loss.
  isae::GenParams gp;
  gp.seed = 77;
  gp.count = 8;
  const auto tiny = isae::generate(gp);
  TrainConfig cfg;            // default weights, for the f32/f64 cross-check
  TrainConfig cfg_recon;      // reconstruction + gradient + mask terms
  cfg_recon.weights = {2.0, 1.0, 1.0, 0.0};
  TrainConfig cfg_entropy;    // entropy term alone
  cfg_entropy.weights = {0.0, 0.0, 0.0, 1.0};

  // Central differences at two step sizes. Where they disagree, a relu kink
  // sits inside the probe interval and FD is not a valid oracle there; the
  // caller resamples another coordinate (same policy as the kink-avoiding
  // input ranges in the per-op sweep).
  struct FdProbe {
    double fd = 0.0;
    bool smooth = false;
  };
  const auto fd_probe = [&tiny](Model<double>& m, const TrainConfig& pc, const BatchPlan& plan,
                                Parameter<double>* p, std::size_t i) {
    const double orig = p->value.data[i];
    const auto loss_at = [&](double x) {
      p->value.data[i] = x;
      m.mixing.mark_dirty();
      Graph<double> g;
      return g.val(isae::build_losses(g, m, tiny, plan, pc).total).data[0];
    };
    double fd[2];
    const double hs[2] = {1e-5, 1e-6};
    for (int k = 0; k < 2; ++k) fd[k] = (loss_at(orig + hs[k]) - loss_at(orig - hs[k])) / (2 * hs[k]);
    p->value.data[i] = orig;
    m.mixing.mark_dirty();
    const bool smooth =
        std::abs(fd[0] - fd[1]) <= std::max(1e-4 * std::max(std::abs(fd[0]), std::abs(fd[1])), 1e-8);
    return FdProbe{fd[1], smooth};
  };

  double worst_fd = 0.0, worst_cast = 0.0;
  for (int inst = 0; inst < kInstances; ++inst) {
    Model<double> md(SubspaceLayout(), 100 + static_cast<std::uint64_t>(inst));
    Model<real> mf(SubspaceLayout(), 1);
    {
      const auto dsrc = md.params();
      const auto fdst = mf.params();
      for (std::size_t i = 0; i < dsrc.size(); ++i)
        for (std::size_t k = 0; k < dsrc[i]->value.data.size(); ++k)
          fdst[i]->value.data[k] = static_cast<real>(dsrc[i]->value.data[k]);
    }
    mf.mixing.mark_dirty();
    Rng prng(300 + static_cast<std::uint64_t>(inst));
    const BatchPlan plan = isae::sample_pairs(tiny.size(), 2, kNumParts, prng);

    const auto params = md.params();
    std::vector<Parameter<double>*> isa_side;
    for (auto* p : params)
      if (p->name == "isa.a" || p->name.rfind("head.", 0) == 0 || p->name.rfind("cls.", 0) == 0)
        isa_side.push_back(p);

    Rng pick(500 + static_cast<std::uint64_t>(inst));

    const auto probe_config = [&](const TrainConfig& pc, const std::vector<Parameter<double>*>& pool,
                                  int want, const char* label) {
      md.zero_grads();
      {
        Graph<double> g;
        g.backward(isae::build_losses(g, md, tiny, plan, pc).total);
      }
      int done = 0;
      for (int attempt = 0; attempt < 10 * want && done < want; ++attempt) {
        auto* p = pool[pick.below(pool.size())];
        const std::size_t i = pick.below(p->value.data.size());
        const FdProbe fp = fd_probe(md, pc, plan, p, i);
        if (!fp.smooth) continue;
        ++done;
        const double an = p->grad.data[i];
        const double rel = std::abs(an - fp.fd) / std::max({std::abs(an), std::abs(fp.fd), 1e-6});
        EXPECT_LE(rel, kTol) << label << " fd, param " << p->name << " entry " << i;
        worst_fd = std::max(worst_fd, rel);
      }
      EXPECT_EQ(done, want) << label << ": too many kinked probe points";
    };
    probe_config(cfg_recon, params, 6, "composite (no entropy)");
    probe_config(cfg_entropy, isa_side, 4, "entropy");

    md.zero_grads();
    {
      Graph<double> g;
      g.backward(isae::build_losses(g, md, tiny, plan, cfg).total);
    }
    mf.zero_grads();
    {
      Graph<real> g;
      g.backward(isae::build_losses(g, mf, tiny, plan, cfg).total);
    }
    const auto fparams = mf.params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      double num = 0.0, den = 1e-6;
      for (std::size_t k = 0; k < params[pi]->grad.data.size(); ++k) {
        num = std::max(num, std::abs(static_cast<double>(fparams[pi]->grad.data[k]) -
                                     params[pi]->grad.data[k]));
        den = std::max(den, std::abs(params[pi]->grad.data[k]));
      }
      // float accumulation across the deep conv stack; looser than the FD tol
      EXPECT_LE(num / den, 3e-3) << "f32 vs f64 gradients, param " << params[pi]->name;
      worst_cast = std::max(worst_cast, num / den);
    }
  }

  c.detail = fmt("%d ops x %d instances, worst op rel err %.2e (%s); composite fd %.2e "
                 "(tol %.0e); f32/f64 gradient gap %.2e (tol 3e-03)",
                 static_cast<int>(checks.size()), kInstances, worst_op, worst_name.c_str(),
                 worst_fd, kTol, worst_cast);
}

TEST(Acceptance, Criterion2IsaLayerAlgebra) {
  Criterion c(2);
  isae::GenParams gp;
  gp.seed = 2;
  gp.count = 256;
  const auto data = isae::generate(gp);

  TrainConfig cfg;
  cfg.batch_size = 8;
  Model<real> model(SubspaceLayout(), 4);
  std::vector<Parameter<real>*> opt = model.params();
  isae::AdamState<real> adam;
  adam.init(opt);

  Rng rng(4);
  Rng probe_rng(40);
  const auto z_probe = random_tensor<real>({4, model.layout.d}, probe_rng, -2.0, 2.0);

  double worst_inv = 0.0, worst_rt = 0.0;
  for (int step = 0; step < 100; ++step) {
    const BatchPlan plan = isae::sample_pairs(data.size(), cfg.batch_size, kNumParts, rng);
    isae::train_step(model, data, plan, cfg, opt, adam);

    const auto& a = model.mixing.a->value;
    const auto& inv = model.mixing.inverse();
    const Tensor<real> prod = isae::matmul_values(a, inv);
    double err = 0.0;
    for (int i = 0; i < model.layout.d; ++i)
      for (int j = 0; j < model.layout.d; ++j)
        err = std::max(err, std::abs(static_cast<double>(prod.at(i, j)) - (i == j ? 1.0 : 0.0)));
    worst_inv = std::max(worst_inv, err);
    EXPECT_LE(err, 1e-4) << "step " << step;

    const std::size_t d = static_cast<std::size_t>(model.layout.d);
    for (int r = 0; r < z_probe.dim(0); ++r) {
      const std::vector<real> z(z_probe.data.begin() + static_cast<std::ptrdiff_t>(r * d),
                                z_probe.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
      const auto back = model.to_latent_values(model.to_sources_values(z));
      double scale = 1.0, diff = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        scale = std::max(scale, std::abs(static_cast<double>(z[k])));
        diff = std::max(diff, std::abs(static_cast<double>(back[k] - z[k])));
      }
      worst_rt = std::max(worst_rt, diff / scale);
      EXPECT_LE(diff / scale, 1e-4) << "step " << step << " probe row " << r;
    }
  }
  c.detail = fmt("100 steps: max |A*inv(A) - I| = %.2e, max round-trip rel err = %.2e (tol 1e-4)",
                 worst_inv, worst_rt);
}

TEST(Acceptance, Criterion3GradientRouting) {
  Criterion c(3);
  isae::GenParams gp;
  gp.seed = 3;
  gp.count = 16;
  const auto data = isae::generate(gp);
  Rng rng(6);
  const BatchPlan plan = isae::sample_pairs(data.size(), 4, kNumParts, rng);

  const auto grads_with = [&](double l1, double l2, double l3, double l4) {
    Model<real> model(SubspaceLayout(), 8);
    TrainConfig cfg;
    cfg.weights = {l1, l2, l3, l4};
    model.zero_grads();
    Graph<real> g;
    g.backward(isae::build_losses(g, model, data, plan, cfg).total);
    return model;
  };

  long long nonzero_isa = 0, nonzero_ae = 0;
  {
    auto model = grads_with(2.0, 1.0, 0.0, 0.0);
    for (auto* p : model.params()) {
      const bool isa_side = p->name == "isa.a" || p->name.rfind("head.", 0) == 0 ||
                            p->name.rfind("cls.", 0) == 0;
      if (!isa_side) continue;
      for (const real gv : p->grad.data)
        if (gv != real(0)) ++nonzero_isa;
    }
    EXPECT_EQ(nonzero_isa, 0) << "reconstruction losses leaked into the ISA side";
  }
  {
    auto model = grads_with(0.0, 0.0, 0.0, 1.0);
    for (auto* p : model.params()) {
      const bool ae_side = p->name.rfind("enc.", 0) == 0 || p->name.rfind("dec.", 0) == 0;
      if (!ae_side) continue;
      for (const real gv : p->grad.data)
        if (gv != real(0)) ++nonzero_ae;
    }
    EXPECT_EQ(nonzero_ae, 0) << "entropy loss leaked into the autoencoder";
  }
  c.detail = fmt("lambda3=lambda4=0: %lld nonzero ISA-side grad entries; "
                 "lambda1=lambda2=lambda3=0: %lld nonzero encoder/decoder grad entries "
                 "(both must be 0, checked bitwise)",
                 nonzero_isa, nonzero_ae);
}

TEST(Acceptance, Criterion4TrainingSmoke) {
  Criterion c(4);
  auto& run = isa_run();
  const int spe = static_cast<int>(dataset().size()) / TrainConfig{}.batch_size;
  ASSERT_EQ(static_cast<int>(run.metrics.size()), spe * TrainConfig{}.epochs);

  std::vector<double> first, final;
  for (int i = 0; i < spe; ++i) first.push_back(run.metrics[static_cast<std::size_t>(i)].l_a);
  for (std::size_t i = run.metrics.size() - static_cast<std::size_t>(spe);
       i < run.metrics.size(); ++i)
    final.push_back(run.metrics[i].l_a);
  const double m_first = median(first), m_final = median(final);
  EXPECT_LE(m_final, 0.2 * m_first);

  const double acc = isae::classifier_accuracy(run.model, dataset());
  EXPECT_GT(acc, 0.5);
  c.detail = fmt("final-epoch median L_a %.5f vs first-epoch %.5f (ratio %.3f, need <= 0.2); "
                 "classifier accuracy %.4f (need > 0.5, chance 0.2)",
                 m_final, m_first, m_final / m_first, acc);
}

TEST(Acceptance, Criterion5AblationMixingError) {
  Criterion c(5);
  const auto with_isa = isae::mixing_error(isa_run().model, dataset(), 128, 7);
  const auto without = isae::mixing_error(noisa_run().model, dataset(), 128, 7);

  int lower = 0;
  double mean_isa = 0.0, mean_no = 0.0;
  std::string per;
  for (int j = 0; j < kNumParts; ++j) {
    const double a = with_isa.per_subspace[static_cast<std::size_t>(j)];
    const double b = without.per_subspace[static_cast<std::size_t>(j)];
    lower += a < b;
    mean_isa += a / kNumParts;
    mean_no += b / kNumParts;
    per += fmt("%s%.4f/%.4f", j ? " " : "", a, b);
  }
  EXPECT_GE(lower, 4);
  EXPECT_LT(mean_isa, mean_no);
  c.detail = fmt("e_j (isa/no-isa) per subspace: %s; lower in %d/5, means %.4f vs %.4f",
                 per.c_str(), lower, mean_isa, mean_no);
}

TEST(Acceptance, Criterion6AttributeSeparationPattern) {
  Criterion c(6);
  const auto analysis = isae::attribute_separation(isa_run().model, dataset());

  const auto argmax_part = [&analysis](const std::string& attr) {
    int best = -1;
    double best_d = -1.0;
    for (int i = 0; i < kNumParts; ++i) {
      const auto& dist = analysis.distances[static_cast<std::size_t>(i)];
      const auto it = dist.find(attr);
      if (it != dist.end() && it->second > best_d) {
        best_d = it->second;
        best = i;
      }
    }
    return std::make_pair(best >= 0 ? analysis.subspaces[static_cast<std::size_t>(best)]
                                    : std::string("none"),
                          best_d);
  };

  const auto [mouth_part, mouth_d] = argmax_part("mouth_open");
  const auto [skin_part, skin_d] = argmax_part("pale_skin");
  EXPECT_EQ(mouth_part, "mouth");
  EXPECT_EQ(skin_part, "face");

  // dark_hair is generator-coupled with thick_eyebrows, so it must register
  // in at least two subspaces. "Non-trivial" frozen from the calibration run:
  // distance >= 0.3 and >= 15% of the attribute's own maximum.
  double hair_max = 0.0;
  for (int i = 0; i < kNumParts; ++i) {
    const auto it = analysis.distances[static_cast<std::size_t>(i)].find("dark_hair");
    if (it != analysis.distances[static_cast<std::size_t>(i)].end())
      hair_max = std::max(hair_max, it->second);
  }
  int nontrivial = 0;
  std::string hair_per;
  for (int i = 0; i < kNumParts; ++i) {
    const auto it = analysis.distances[static_cast<std::size_t>(i)].find("dark_hair");
    const double d = it != analysis.distances[static_cast<std::size_t>(i)].end() ? it->second : 0.0;
    nontrivial += d >= 0.3 && d >= 0.15 * hair_max;
    hair_per += fmt("%s%.3f", i ? " " : "", d);
  }
  EXPECT_GE(nontrivial, 2);
  c.detail = fmt("mouth_open peaks in '%s' (%.3f), pale_skin in '%s' (%.3f); dark_hair distances "
                 "[%s], non-trivial in %d subspaces (need >= 2)",
                 mouth_part.c_str(), mouth_d, skin_part.c_str(), skin_d, hair_per.c_str(),
                 nontrivial);
}

TEST(Acceptance, Criterion7MaskLossAlgebra) {
  Criterion c(7);
  Rng rng(14);
  const std::vector<int> img_shape{2, 3, 8, 8};
  const std::vector<int> mask_shape{2, 8, 8};
  const auto i_in = random_tensor<real>(img_shape, rng, 0.0, 1.0);
  const auto i_t = random_tensor<real>(img_shape, rng, 0.0, 1.0);
  const auto m_in = random_tensor<real>(mask_shape, rng, 0.0, 1.0);
  const auto m_t = random_tensor<real>(mask_shape, rng, 0.0, 1.0);

  double worst = 0.0;
  {
    // identical triple: every term pairs identical images
    Graph<real> g;
    const int v = isae::mask_loss(g, g.constant(i_in), g.constant(i_in), g.constant(i_in),
                                  m_in, m_t);
    worst = std::max(worst, std::abs(static_cast<double>(g.val(v).data[0])));
    EXPECT_NEAR(g.val(v).data[0], 0.0, 1e-6);
  }
  {
    // all-ones masks collapse the loss to MSE against the target
    Graph<real> g;
    const auto ones = Tensor<real>::full(mask_shape, real(1));
    const int v = isae::mask_loss(g, g.constant(i_in), g.constant(i_t), g.constant(i_t),
                                  ones, ones);
    const int mse = isae::recon_loss(g, g.constant(i_in), g.constant(i_t));
    const double diff = std::abs(static_cast<double>(g.val(v).data[0] - g.val(mse).data[0]));
    worst = std::max(worst, diff);
    EXPECT_NEAR(g.val(v).data[0], g.val(mse).data[0], 1e-6);
  }
  {
    // pixels claimed by exactly one mask must not see the mixed image at all
    auto hard_in = Tensor<real>::zeros(mask_shape);
    auto hard_t = Tensor<real>::zeros(mask_shape);
    for (std::size_t i = 0; i < hard_in.data.size(); ++i) {
      const int r = static_cast<int>(rng.below(3));
      hard_in.data[i] = r == 0 ? real(1) : real(0);
      hard_t.data[i] = r == 1 ? real(1) : real(0);
    }
    auto mix_a = random_tensor<real>(img_shape, rng, 0.0, 1.0);
    auto mix_b = mix_a;
    const std::size_t plane = hard_in.data.size() / 2;  // H*W per sample
    for (std::size_t px = 0; px < hard_in.data.size(); ++px) {
      if (hard_in.data[px] == hard_t.data[px]) continue;  // keep agreeing pixels
      const std::size_t b = px / plane, xy = px % plane;
      for (std::size_t ch = 0; ch < 3; ++ch)
        mix_b.data[(b * 3 + ch) * plane + xy] = static_cast<real>(rng.uniform(0.0, 1.0));
    }
    Graph<real> g;
    const int va = isae::mask_loss(g, g.constant(mix_a), g.constant(i_in), g.constant(i_t),
                                   hard_in, hard_t);
    const int vb = isae::mask_loss(g, g.constant(mix_b), g.constant(i_in), g.constant(i_t),
                                   hard_in, hard_t);
    const double diff = std::abs(static_cast<double>(g.val(va).data[0] - g.val(vb).data[0]));
    worst = std::max(worst, diff);
    EXPECT_NEAR(g.val(va).data[0], g.val(vb).data[0], 1e-6);
  }
  c.detail = fmt("identical-triple zero, all-ones -> MSE, disagreement neutrality; "
                 "worst deviation %.2e (tol 1e-6)",
                 worst);
}

TEST(Acceptance, Criterion8DeterminismAndFormats) {
  Criterion c(8);
  const std::string dir = ::testing::TempDir();
  const auto slurp = [](const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
  };

  isae::GenParams gp;
  gp.seed = 5;
  gp.count = 64;
  isae::write_dataset(isae::generate(gp), dir + "d1.sds1");
  isae::write_dataset(isae::generate(gp), dir + "d2.sds1");
  const bool data_same = slurp(dir + "d1.sds1") == slurp(dir + "d2.sds1");
  EXPECT_TRUE(data_same);

  isae::write_dataset(isae::read_dataset(dir + "d1.sds1"), dir + "d3.sds1");
  const bool data_rt = slurp(dir + "d1.sds1") == slurp(dir + "d3.sds1");
  EXPECT_TRUE(data_rt);

  isae::GenParams tiny_gp;
  tiny_gp.seed = 6;
  tiny_gp.count = 12;
  const auto tiny = isae::generate(tiny_gp);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  for (int rep = 0; rep < 2; ++rep) {
    cfg.checkpoint_path = dir + "t" + std::to_string(rep) + ".sdck";
    cfg.metrics_path = dir + "t" + std::to_string(rep) + ".jsonl";
    isae::train<real>(cfg, tiny);
  }
  const bool ckpt_same = slurp(dir + "t0.sdck") == slurp(dir + "t1.sdck");
  const bool metrics_same = slurp(dir + "t0.jsonl") == slurp(dir + "t1.jsonl");
  EXPECT_TRUE(ckpt_same);
  EXPECT_TRUE(metrics_same);

  auto loaded = isae::load_checkpoint<real>(dir + "t0.sdck");
  ASSERT_TRUE(loaded.has_adam);
  std::vector<Parameter<real>*> slots;
  for (const auto& name : loaded.adam_param_names) slots.push_back(loaded.model.find(name));
  isae::save_checkpoint(loaded.model, dir + "t0rt.sdck", &loaded.adam, &slots);
  const bool ckpt_rt = slurp(dir + "t0.sdck") == slurp(dir + "t0rt.sdck");
  EXPECT_TRUE(ckpt_rt);

  c.detail = fmt("dataset regen %s, dataset round-trip %s, checkpoint rerun %s, metrics rerun %s, "
                 "checkpoint round-trip %s (all byte compares)",
                 data_same ? "identical" : "DIFFERS", data_rt ? "identical" : "DIFFERS",
                 ckpt_same ? "identical" : "DIFFERS", metrics_same ? "identical" : "DIFFERS",
                 ckpt_rt ? "identical" : "DIFFERS");
}

}  // namespace
