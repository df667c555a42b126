#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "isae/adam.hpp"
#include "isae/checkpoint.hpp"
#include "isae/losses.hpp"
#include "isae/model.hpp"
#include "isae/rng.hpp"
#include "isae/sprites.hpp"

namespace isae {

struct TrainConfig {
  std::uint64_t seed = 1;
  int epochs = 30;
  int batch_size = 32;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossWeights weights;
  bool enable_isa = true;
  int checkpoint_interval = 0;  // steps between rolling saves; 0 = final only
  std::string dataset_path;
  std::string checkpoint_path;
  std::string metrics_path;

  void validate() const {
    if (batch_size < 2) throw ConfigError("TrainConfig: batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("TrainConfig: betas must lie in [0,1)");
    if (eps <= 0) throw ConfigError("TrainConfig: eps must be positive");
    if (checkpoint_interval < 0) throw ConfigError("TrainConfig: negative checkpoint_interval");
    weights.validate();
  }
};

struct StepMetrics {
  int step = 0;
  double l_a = 0, l_g = 0, l_m = 0, l_e = 0, total = 0;
};

inline std::string metrics_line(const StepMetrics& m) {
  char buf[192];
  std::snprintf(buf, sizeof(buf),
                "{\"step\":%d,\"L_a\":%.9g,\"L_g\":%.9g,\"L_m\":%.9g,\"L_e\":%.9g,"
                "\"total\":%.9g}",
                m.step, m.l_a, m.l_g, m.l_m, m.l_e, m.total);
  return buf;
}

template <typename T>
struct TrainOutput {
  Model<T> model;
  AdamState<T> adam;
  std::vector<Parameter<T>*> opt_params;  // optimizer slot order, into `model`
  std::vector<StepMetrics> metrics;
};

// Input indices, target indices and the swapped-subspace index for one step.
struct BatchPlan {
  std::vector<int> inputs;
  std::vector<int> targets;
  int m = 0;
};

inline BatchPlan sample_pairs(std::size_t dataset_size, int batch, int num_subspaces, Rng& rng) {
  if (static_cast<std::size_t>(batch) > dataset_size)
    throw ConfigError("sample_pairs: batch of " + std::to_string(batch) +
                      " exceeds dataset of " + std::to_string(dataset_size));
  const auto to_ints = [](const std::vector<std::size_t>& v) {
    return std::vector<int>(v.begin(), v.end());
  };
  BatchPlan plan;
  plan.inputs = to_ints(rng.sample_without_replacement(dataset_size, static_cast<std::size_t>(batch)));
  plan.targets = to_ints(rng.sample_without_replacement(dataset_size, static_cast<std::size_t>(batch)));
  plan.m = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_subspaces)));
  return plan;
}

namespace train_detail {

template <typename T>
Tensor<T> gather_images(const std::vector<Sprite>& data, const std::vector<int>& idx) {
  Tensor<T> out({static_cast<int>(idx.size()), kImageC, kImageH, kImageW});
  const std::size_t n = static_cast<std::size_t>(kImageC) * kImageH * kImageW;
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t i = 0; i < n; ++i)
      out.data[b * n + i] = static_cast<T>(data[static_cast<std::size_t>(idx[b])].image.data[i]);
  return out;
}

template <typename T>
Tensor<T> gather_masks(const std::vector<Sprite>& data, const std::vector<int>& idx, int part) {
  Tensor<T> out({static_cast<int>(idx.size()), kImageH, kImageW});
  const std::size_t plane = static_cast<std::size_t>(kImageH) * kImageW;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& masks = data[static_cast<std::size_t>(idx[b])].masks;
    for (std::size_t i = 0; i < plane; ++i)
      out.data[b * plane + i] = static_cast<T>(masks.data[static_cast<std::size_t>(part) * plane + i]);
  }
  return out;
}

template <typename T>
struct Snapshot {
  std::vector<Tensor<T>> values;
  AdamState<T> adam;

  void capture(const std::vector<Parameter<T>*>& params, const AdamState<T>& state) {
    values.clear();
    values.reserve(params.size());
    for (auto* p : params) values.push_back(p->value);
    adam = state;
  }

  void restore(const std::vector<Parameter<T>*>& params, AdamState<T>& state) const {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
    state = adam;
  }
};

}  // namespace train_detail

struct LossNodes {
  int l_a, l_g, l_m, l_e, total;
};

// The per-step loss graph over the three paths. Reconstruction decodes z
// directly and never touches A; the entropy path reads z through a gradient
// stop, so it trains only A, the heads and the classifier.
template <typename T>
LossNodes build_losses(Graph<T>& g, Model<T>& model, const std::vector<Sprite>& data,
                       const BatchPlan& plan, const TrainConfig& cfg) {
  const int imgs_in = g.constant(train_detail::gather_images<T>(data, plan.inputs));
  const int imgs_t = g.constant(train_detail::gather_images<T>(data, plan.targets));

  const int z_in = model.encode(g, imgs_in);
  const int i_out = model.decode(g, z_in);
  const int l_a = recon_loss(g, imgs_in, i_out);
  const int l_g = gradient_loss(g, imgs_in, i_out);

  const int a = model.leaf_a(g);
  const int z_t = model.encode(g, imgs_t);
  const int s_in = model.to_sources(g, z_in, a);
  const int s_t = model.to_sources(g, z_t, a);
  const int s_mix = mix_sources(g, model.layout, {s_in, s_t}, MixSpec::single(plan.m));
  const int i_mix = model.decode(g, model.to_latent(g, s_mix, a));
  const int l_m = mask_loss(g, i_mix, imgs_in, imgs_t,
                            train_detail::gather_masks<T>(data, plan.inputs, plan.m),
                            train_detail::gather_masks<T>(data, plan.targets, plan.m));

  int l_e;
  if (cfg.enable_isa) {
    const int s_ent = model.to_sources(g, g.stop_gradient(z_in), a);
    l_e = entropy_loss(g, model, s_ent);
  } else {
    l_e = g.constant(Tensor<T>::scalar(T(0)));
  }

  return {l_a, l_g, l_m, l_e, total_loss(g, l_a, l_g, l_m, l_e, cfg.weights)};
}

template <typename T>
StepMetrics train_step(Model<T>& model, const std::vector<Sprite>& data, const BatchPlan& plan,
                       const TrainConfig& cfg, std::vector<Parameter<T>*>& opt_params,
                       AdamState<T>& adam) {
  Graph<T> g;
  const auto [l_a, l_g, l_m, l_e, total] = build_losses(g, model, data, plan, cfg);

  model.zero_grads();
  g.backward(total);
  AdamParams hp{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  adam_step(opt_params, adam, hp);
  model.mixing.mark_dirty();
  model.mixing.refresh_inverse();

  StepMetrics m;
  m.l_a = static_cast<double>(g.val(l_a).data[0]);
  m.l_g = static_cast<double>(g.val(l_g).data[0]);
  m.l_m = static_cast<double>(g.val(l_m).data[0]);
  m.l_e = static_cast<double>(g.val(l_e).data[0]);
  m.total = static_cast<double>(g.val(total).data[0]);
  return m;
}

// Full run. Ablation (enable_isa = false) pins A to the exact identity and
// leaves it, the heads and the classifier out of the optimizer, so the mixing
// loss acts on z-coordinates grouped by the same layout and the entropy term
// drops out; everything else is shared with the full configuration.
template <typename T>
TrainOutput<T> train(const TrainConfig& cfg, const std::vector<Sprite>& data,
                     std::ostream* metrics_out = nullptr) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (static_cast<int>(data.size()) < cfg.batch_size)
    throw ConfigError("train: dataset of " + std::to_string(data.size()) +
                      " is smaller than one batch of " + std::to_string(cfg.batch_size));

  TrainOutput<T> out{Model<T>(SubspaceLayout(), cfg.seed)};
  Model<T>& model = out.model;
  if (!cfg.enable_isa) {
    auto& a = model.mixing.a->value;
    for (int i = 0; i < model.layout.d; ++i)
      for (int j = 0; j < model.layout.d; ++j) a.at(i, j) = i == j ? T(1) : T(0);
    model.mixing.mark_dirty();
    model.mixing.refresh_inverse();
  }

  for (auto* p : model.params()) {
    const bool isa_part = p->name == "isa.a" || p->name.rfind("head.", 0) == 0 ||
                          p->name.rfind("cls.", 0) == 0;
    if (cfg.enable_isa || !isa_part) out.opt_params.push_back(p);
  }
  out.adam.init(out.opt_params);

  Rng rng(cfg.seed);
  const int steps_per_epoch = static_cast<int>(data.size()) / cfg.batch_size;
  const int total_steps = steps_per_epoch * cfg.epochs;
  out.metrics.reserve(static_cast<std::size_t>(total_steps));

  std::ofstream metrics_file;
  if (!cfg.metrics_path.empty()) {
    metrics_file.open(cfg.metrics_path);
    if (!metrics_file) throw IoError("train: cannot open metrics log '" + cfg.metrics_path + "'");
  }

  train_detail::Snapshot<T> last_good;
  for (int step = 1; step <= total_steps; ++step) {
    last_good.capture(out.opt_params, out.adam);
    const BatchPlan plan =
        sample_pairs(data.size(), cfg.batch_size, model.layout.count(), rng);
    StepMetrics m;
    try {
      m = train_step(model, data, plan, cfg, out.opt_params, out.adam);
    } catch (const IllConditionedError&) {
      // the optimizer drove A towards singularity: roll back to the state
      // before this step, persist it if we can, and let the caller abort
      last_good.restore(out.opt_params, out.adam);
      model.mixing.mark_dirty();
      model.mixing.refresh_inverse();
      if (!cfg.checkpoint_path.empty())
        save_checkpoint(model, cfg.checkpoint_path, &out.adam, &out.opt_params);
      throw;
    }
    m.step = step;
    out.metrics.push_back(m);
    if (metrics_out) *metrics_out << metrics_line(m) << '\n';
    if (metrics_file.is_open()) metrics_file << metrics_line(m) << '\n';

    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 &&
        !cfg.checkpoint_path.empty())
      save_checkpoint(model, cfg.checkpoint_path, &out.adam, &out.opt_params);
  }

  if (!cfg.checkpoint_path.empty())
    save_checkpoint(model, cfg.checkpoint_path, &out.adam, &out.opt_params);
  return out;
}

}  // namespace isae
