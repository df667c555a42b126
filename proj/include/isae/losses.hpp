#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/layout.hpp"
#include "isae/model.hpp"
#include "isae/ops.hpp"
#include "isae/tensor.hpp"

namespace isae {

// Defaults were tuned on the bundled sprite task: the mask term needs enough
// weight to shape the mixing matrix (the encoder alone can satisfy a weak
// mask loss with A stuck near its init), and a soft entropy weight keeps the
// classifier informative without fighting the mask term early on.
struct LossWeights {
  double lambda1 = 2.0;   // reconstruction
  double lambda2 = 1.0;   // image gradient
  double lambda3 = 4.0;   // mask
  double lambda4 = 0.25;  // entropy

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
      throw ConfigError("LossWeights: negative weight");
  }
};

// Which source feeds each subspace. Either a single swapped subspace m
// (target supplies m, input supplies the rest) or an explicit per-subspace
// source assignment for multi-way mixing.
struct MixSpec {
  int m = -1;
  std::vector<int> assign;

  static MixSpec single(int m) {
    MixSpec s;
    s.m = m;
    return s;
  }

  static MixSpec multi(std::vector<int> assign) {
    MixSpec s;
    s.assign = std::move(assign);
    return s;
  }
};

template <typename T>
int recon_loss(Graph<T>& g, int i_in, int i_out) {
  const int d = ops::sub(g, i_in, i_out);
  return ops::mean_all(g, ops::mul(g, d, d));
}

// Mean over the batch of (1/p) * ||grad I_in - grad I_out||_F^2 with
// p = H*W, summed over both difference directions and all channels.
template <typename T>
int gradient_loss(Graph<T>& g, int i_in, int i_out) {
  // copy: recording nodes below may reallocate the tape and move the shapes
  const std::vector<int> s = g.val(i_in).shape;
  require_same_shape("gradient_loss", g.val(i_in), g.val(i_out));
  if (s.size() != 4) throw ShapeError("gradient_loss: expected [B,C,H,W], got " + shape_str(s));
  const double p = static_cast<double>(s[2]) * s[3];
  const int dx = ops::sub(g, ops::diff_x(g, i_in), ops::diff_x(g, i_out));
  const int dy = ops::sub(g, ops::diff_y(g, i_in), ops::diff_y(g, i_out));
  const int sq = ops::add(g, ops::mul(g, dx, dx), ops::mul(g, dy, dy));
  return ops::mul_scalar(g, ops::sum_all(g, sq), T(1.0 / (p * s[0])));
}

// sources[j] are [B,d] nodes; the result copies each subspace's columns from
// its assigned source. Selector weights are exact 0/1, so unmixed coordinates
// pass through bit-identically.
template <typename T>
int mix_sources(Graph<T>& g, const SubspaceLayout& layout, const std::vector<int>& sources,
                const MixSpec& spec) {
  std::vector<int> assign = spec.assign;
  if (assign.empty()) {
    if (sources.size() != 2)
      throw ConfigError("mix_sources: single-subspace mixing needs exactly two sources");
    layout.check_index(spec.m);
    assign.assign(static_cast<std::size_t>(layout.count()), 0);
    assign[static_cast<std::size_t>(spec.m)] = 1;
  }
  if (static_cast<int>(assign.size()) != layout.count())
    throw ConfigError("mix_sources: assignment covers " + std::to_string(assign.size()) +
                      " subspaces, layout has " + std::to_string(layout.count()));
  for (int j : assign)
    if (j < 0 || j >= static_cast<int>(sources.size()))
      throw ConfigError("mix_sources: source index " + std::to_string(j) + " out of range");

  int out = -1;
  for (std::size_t j = 0; j < sources.size(); ++j) {
    Tensor<T> sel = Tensor<T>::zeros({layout.d});
    bool used = false;
    for (int i = 0; i < layout.count(); ++i) {
      if (assign[static_cast<std::size_t>(i)] != static_cast<int>(j)) continue;
      used = true;
      for (int k = 0; k < layout.dims[static_cast<std::size_t>(i)]; ++k)
        sel.data[static_cast<std::size_t>(layout.offsets[static_cast<std::size_t>(i)] + k)] = T(1);
    }
    if (!used) continue;
    const int part = ops::row_scale(g, sources[j], g.constant(std::move(sel)));
    out = out < 0 ? part : ops::add(g, out, part);
  }
  return out;
}

namespace loss_detail {

// Tile a per-pixel weight map [B,H,W] across C channels -> [B,C,H,W].
template <typename T>
Tensor<T> tile_channels(const Tensor<T>& w, int channels) {
  if (w.rank() != 3) throw ShapeError("tile_channels: expected [B,H,W], got " + shape_str(w.shape));
  Tensor<T> out({w.dim(0), channels, w.dim(1), w.dim(2)});
  const std::size_t plane = static_cast<std::size_t>(w.dim(1)) * w.dim(2);
  for (int b = 0; b < w.dim(0); ++b)
    for (int c = 0; c < channels; ++c)
      std::copy_n(w.data.begin() + static_cast<std::ptrdiff_t>(b * plane),
                  plane,
                  out.data.begin() + static_cast<std::ptrdiff_t>((b * channels + c) * plane));
  return out;
}

}  // namespace loss_detail

// Mixed-region consistency: outside both masks the mixed image must match the
// input; where the masks agree it must match the target. Pixels claimed by
// only one mask carry no penalty. Masks are data, not differentiated.
template <typename T>
int mask_loss(Graph<T>& g, int i_mix, int i_in, int i_t, const Tensor<T>& m_in,
              const Tensor<T>& m_t) {
  require_same_shape("mask_loss masks", m_in, m_t);
  const std::vector<int> s = g.val(i_mix).shape;
  require_same_shape("mask_loss images", g.val(i_mix), g.val(i_in));
  require_same_shape("mask_loss images", g.val(i_mix), g.val(i_t));
  if (s.size() != 4 || m_in.rank() != 3 || m_in.dim(0) != s[0] || m_in.dim(1) != s[2] ||
      m_in.dim(2) != s[3])
    throw ShapeError("mask_loss: masks " + shape_str(m_in.shape) + " do not match images " +
                     shape_str(s));

  Tensor<T> w_outside(m_in.shape), w_agree(m_in.shape);
  for (std::size_t i = 0; i < m_in.data.size(); ++i) {
    w_outside.data[i] = T(1) - std::max(m_in.data[i], m_t.data[i]);
    w_agree.data[i] = std::min(m_in.data[i], m_t.data[i]);
  }
  const int w1 = g.constant(loss_detail::tile_channels(w_outside, s[1]));
  const int w2 = g.constant(loss_detail::tile_channels(w_agree, s[1]));

  const int d_in = ops::sub(g, i_mix, i_in);
  const int d_t = ops::sub(g, i_mix, i_t);
  const int term1 = ops::mul(g, ops::mul(g, d_in, d_in), w1);
  const int term2 = ops::mul(g, ops::mul(g, d_t, d_t), w2);
  return ops::mean_all(g, ops::add(g, term1, term2));
}

// Mean cross-entropy over B*C stacked (sample, subspace) instances, each
// classified from its own head embedding with target class = subspace index.
template <typename T>
int entropy_loss(Graph<T>& g, Model<T>& model, int s_node) {
  const int c = model.layout.count();
  std::vector<int> logs;
  logs.reserve(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    const int probs = model.classify_subspace(g, model.head_forward(g, s_node, i));
    const int own = ops::slice_cols(g, probs, i, 1);
    logs.push_back(ops::log_e(g, ops::add_scalar(g, own, T(1e-12))));
  }
  return ops::mul_scalar(g, ops::mean_all(g, ops::concat_rows(g, logs)), T(-1));
}

template <typename T>
int total_loss(Graph<T>& g, int l_a, int l_g, int l_m, int l_e, const LossWeights& w) {
  w.validate();
  const char* names[] = {"L_a", "L_g", "L_m", "L_e"};
  const int terms[] = {l_a, l_g, l_m, l_e};
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite(static_cast<double>(g.val(terms[i]).data[0])))
      throw DivergedError(std::string("total_loss: ") + names[i] + " is not finite");
  int out = ops::mul_scalar(g, l_a, T(w.lambda1));
  out = ops::add(g, out, ops::mul_scalar(g, l_g, T(w.lambda2)));
  out = ops::add(g, out, ops::mul_scalar(g, l_m, T(w.lambda3)));
  return ops::add(g, out, ops::mul_scalar(g, l_e, T(w.lambda4)));
}

}  // namespace isae
