#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/graph.hpp"
#include "isae/tensor.hpp"

namespace isae {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment buffers live outside the parameters so checkpoints can serialize
// them independently; entries are keyed positionally against the parameter
// list handed to adam_step.
template <typename T>
struct AdamState {
  long long step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  void init(const std::vector<Parameter<T>*>& params) {
    step = 0;
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto* p : params) {
      m.push_back(Tensor<T>::zeros(p->value.shape));
      v.push_back(Tensor<T>::zeros(p->value.shape));
    }
  }
};

// One optimizer step. Scans every gradient for NaN/inf first and throws
// before touching any state, so a diverged step never corrupts weights.
template <typename T>
void adam_step(std::vector<Parameter<T>*>& params, AdamState<T>& state, const AdamParams& hp) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ConfigError("adam_step: state holds " + std::to_string(state.m.size()) +
                      " slots for " + std::to_string(params.size()) + " parameters");
  for (const auto* p : params)
    for (T gv : p->grad.data)
      if (!std::isfinite(static_cast<double>(gv)))
        throw DivergedError("adam_step: non-finite gradient in parameter '" + p->name + "'");

  state.step += 1;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    for (std::size_t j = 0; j < p.value.data.size(); ++j) {
      const double gv = static_cast<double>(p.grad.data[j]);
      const double mj = hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * gv;
      const double vj = hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * gv * gv;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      p.value.data[j] -= static_cast<T>(hp.lr * mhat / (std::sqrt(vhat) + hp.eps));
    }
  }
}

}  // namespace isae
