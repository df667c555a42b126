#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "isae/train.hpp"

using isae::BatchPlan;
using isae::ConfigError;
using isae::GenParams;
using isae::Rng;
using isae::Sprite;
using isae::TrainConfig;

namespace fs = std::filesystem;

namespace {

std::vector<Sprite> tiny_dataset(std::uint64_t seed, int count) {
  GenParams gp;
  gp.seed = seed;
  gp.count = count;
  return isae::generate(gp);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

bool starts_with_any(const std::string& name, std::initializer_list<const char*> prefixes) {
  for (const char* p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

}  // namespace

TEST(SamplePairs, PermutationAndRange) {
  Rng rng(5);
  const BatchPlan plan = isae::sample_pairs(8, 8, 5, rng);
  auto sorted_in = plan.inputs, sorted_t = plan.targets;
  std::sort(sorted_in.begin(), sorted_in.end());
  std::sort(sorted_t.begin(), sorted_t.end());
  const std::vector<int> want = {0, 1, 2, 3, 4, 5, 6, 7};
  EXPECT_EQ(sorted_in, want);
  EXPECT_EQ(sorted_t, want);
  EXPECT_GE(plan.m, 0);
  EXPECT_LT(plan.m, 5);
  EXPECT_THROW(isae::sample_pairs(4, 8, 5, rng), ConfigError);
}

TEST(SamplePairs, MaskIndexIsUniform) {
  Rng rng(6);
  std::vector<int> counts(5, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i)
    counts[static_cast<std::size_t>(isae::sample_pairs(16, 2, 5, rng).m)]++;
  double chi2 = 0.0;
  const double expect = draws / 5.0;
  for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
  EXPECT_LT(chi2, 18.47);  // chi-square(4 dof) at p = 0.001
}

TEST(Train, ReconstructionLossesSkipIsaLayer) {
  const auto data = tiny_dataset(100, 8);
  TrainConfig cfg;
  cfg.seed = 2;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.weights.lambda3 = 0.0;
  cfg.weights.lambda4 = 0.0;
  auto out = isae::train<float>(cfg, data);
  bool checked = false;
  for (auto* p : out.model.params()) {
    if (!starts_with_any(p->name, {"isa.a", "head.", "cls."})) continue;
    checked = true;
    for (float gv : p->grad.data) ASSERT_EQ(gv, 0.0f) << p->name;
  }
  EXPECT_TRUE(checked);
}

TEST(Train, EntropyPathStopsAtLatent) {
  const auto data = tiny_dataset(101, 8);
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.weights.lambda1 = 0.0;
  cfg.weights.lambda2 = 0.0;
  cfg.weights.lambda3 = 0.0;
  auto out = isae::train<float>(cfg, data);
  bool checked = false;
  for (auto* p : out.model.params()) {
    if (!starts_with_any(p->name, {"enc.", "dec."})) continue;
    checked = true;
    for (float gv : p->grad.data) ASSERT_EQ(gv, 0.0f) << p->name;
  }
  EXPECT_TRUE(checked);
  // and the ISA side did receive signal
  float a_grad = 0.0f;
  for (float gv : out.model.find("isa.a")->grad.data) a_grad = std::max(a_grad, std::abs(gv));
  EXPECT_GT(a_grad, 0.0f);
}

TEST(Train, ZeroWeightsLeaveParametersUntouched) {
  const auto data = tiny_dataset(102, 8);
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.weights = {0.0, 0.0, 0.0, 0.0};
  isae::Model<float> reference(isae::SubspaceLayout(), cfg.seed);
  auto out = isae::train<float>(cfg, data);
  for (auto* p : out.model.params())
    EXPECT_EQ(p->value.data, reference.find(p->name)->value.data) << p->name;
}

TEST(Train, DeterministicRuns) {
  const auto data = tiny_dataset(103, 48);
  TrainConfig cfg;
  cfg.seed = 7;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  const auto p1 = fs::temp_directory_path() / "isae_train_det1.sdck";
  const auto p2 = fs::temp_directory_path() / "isae_train_det2.sdck";

  std::ostringstream log1, log2;
  cfg.checkpoint_path = p1.string();
  auto r1 = isae::train<float>(cfg, data, &log1);
  cfg.checkpoint_path = p2.string();
  auto r2 = isae::train<float>(cfg, data, &log2);

  EXPECT_EQ(log1.str(), log2.str());
  EXPECT_FALSE(log1.str().empty());
  EXPECT_EQ(file_bytes(p1), file_bytes(p2));
  ASSERT_EQ(r1.metrics.size(), 6u);  // floor(48/16) * 2 epochs
  EXPECT_EQ(r1.metrics.back().total, r2.metrics.back().total);
  fs::remove(p1);
  fs::remove(p2);
}

TEST(Train, MetricsLineFormat) {
  isae::StepMetrics m;
  m.step = 12;
  m.l_a = 0.25;
  m.l_g = 0.5;
  m.l_m = 1.0;
  m.l_e = 1.5;
  m.total = 4.0;
  EXPECT_EQ(isae::metrics_line(m),
            "{\"step\":12,\"L_a\":0.25,\"L_g\":0.5,\"L_m\":1,\"L_e\":1.5,\"total\":4}");
}

TEST(Train, AblationPinsIdentityAndDropsEntropy) {
  const auto data = tiny_dataset(104, 16);
  TrainConfig cfg;
  cfg.seed = 8;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.enable_isa = false;
  auto out = isae::train<float>(cfg, data);

  EXPECT_EQ(out.opt_params.size(), 26u);  // 39 minus A, five heads, classifier
  for (auto* p : out.opt_params)
    EXPECT_FALSE(starts_with_any(p->name, {"isa.a", "head.", "cls."})) << p->name;

  const auto& a = out.model.mixing.a->value;
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) ASSERT_EQ(a.at(i, j), i == j ? 1.0f : 0.0f);
  for (const auto& m : out.metrics) EXPECT_EQ(m.l_e, 0.0);
}

TEST(Train, RollingCheckpointsAreWritten) {
  const auto data = tiny_dataset(105, 16);
  TrainConfig cfg;
  cfg.seed = 9;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.checkpoint_interval = 1;
  const auto path = fs::temp_directory_path() / "isae_train_roll.sdck";
  cfg.checkpoint_path = path.string();
  auto out = isae::train<float>(cfg, data);
  auto loaded = isae::load_checkpoint<float>(path.string());
  ASSERT_TRUE(loaded.has_adam);
  EXPECT_EQ(loaded.adam.step, 2);  // floor(16/8) steps
  EXPECT_EQ(loaded.model.find("enc.fc.w")->value.data, out.model.find("enc.fc.w")->value.data);
  fs::remove(path);
}

TEST(Train, ShortRunDescends) {
  const auto data = tiny_dataset(106, 256);
  TrainConfig cfg;
  cfg.seed = 10;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  auto out = isae::train<float>(cfg, data);
  ASSERT_EQ(out.metrics.size(), 48u);
  std::vector<double> first, last;
  for (std::size_t i = 0; i < 5; ++i) first.push_back(out.metrics[i].l_a);
  for (std::size_t i = out.metrics.size() - 5; i < out.metrics.size(); ++i)
    last.push_back(out.metrics[i].l_a);
  EXPECT_LT(median(last), median(first));
  for (const auto& m : out.metrics) {
    EXPECT_TRUE(std::isfinite(m.total));
    EXPECT_GE(m.l_a, 0.0);
    EXPECT_GE(m.l_g, 0.0);
    EXPECT_GE(m.l_m, 0.0);
    EXPECT_GE(m.l_e, 0.0);
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta1 = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.weights.lambda4 = -0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  EXPECT_NO_THROW(cfg.validate());

  const auto data = tiny_dataset(107, 4);
  EXPECT_THROW(isae::train<float>(cfg, data), ConfigError);  // dataset < batch
  EXPECT_THROW(isae::train<float>(cfg, {}), ConfigError);
}
