#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "isae/graph.hpp"
#include "isae/layout.hpp"
#include "isae/linalg.hpp"
#include "isae/ops.hpp"
#include "isae/rng.hpp"
#include "isae/tensor.hpp"

namespace isae {

// Learnable mixing matrix with a cached inverse. The cache is valid while
// stamp == version; the trainer bumps the version after every optimizer step
// that touches A and refreshes before the next use.
template <typename T>
struct MixingMatrix {
  Parameter<T>* a = nullptr;
  Tensor<T> a_inv;
  std::uint64_t version = 0;
  std::uint64_t stamp = std::uint64_t(-1);

  bool current() const { return stamp == version; }
  void mark_dirty() { ++version; }

  void refresh_inverse() {
    a_inv = invert_matrix(a->value);
    stamp = version;
  }

  const Tensor<T>& inverse() {
    if (!current()) refresh_inverse();
    return a_inv;
  }
};

// Residual autoencoder with an invertible linear layer factoring the latent
// space into per-part subspaces, plus the per-subspace embedding heads and the
// shared subspace classifier. Parameters live in a fixed-order registry; that
// order is the checkpoint and optimizer-state contract.
template <typename T>
class Model {
 public:
  explicit Model(SubspaceLayout layout_in = SubspaceLayout(), std::uint64_t seed = 1)
      : layout(std::move(layout_in)) {
    Rng rng(seed);
    const int d = layout.d;

    add_conv("enc.conv1", 16, 3, rng);
    add_conv("enc.conv2", 32, 16, rng);
    add_conv("enc.conv3", 64, 32, rng);
    add_conv("enc.res.a", 64, 64, rng);
    add_conv("enc.res.b", 64, 64, rng);
    add_fc("enc.fc", 1024, d, rng, 1.0);

    add_fc("dec.fc", d, 1024, rng, 1.0);
    add_conv("dec.res.a", 64, 64, rng);
    add_conv("dec.res.b", 64, 64, rng);
    add_conv("dec.up1", 32, 64, rng);
    add_conv("dec.up2", 16, 32, rng);
    add_conv("dec.up3", 16, 16, rng);
    add_conv("dec.out", 3, 16, rng, 1.0);

    Tensor<T> a = Tensor<T>::identity(d);
    for (auto& x : a.data) x += T(0.01 * rng.normal());
    params_.emplace_back("isa.a", std::move(a));

    for (int i = 0; i < layout.count(); ++i)
      add_fc("head." + std::to_string(i), layout.dims[static_cast<std::size_t>(i)],
             layout.d_max, rng, 2.0);
    add_fc("cls", layout.d_max, layout.count(), rng, 1.0);

    mixing.a = find("isa.a");
    mixing.refresh_inverse();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  // Moves keep parameter addresses valid: the registry's heap buffer travels.
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  SubspaceLayout layout;
  MixingMatrix<T> mixing;

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  // [B,3,32,32] -> [B,d]
  int encode(Graph<T>& g, int images) {
    // copy: the tape may reallocate while recording, moving node shapes
    const std::vector<int> s = g.val(images).shape;
    if (s.size() != 4 || s[1] != kImageC || s[2] != kImageH || s[3] != kImageW)
      throw ShapeError("encode: expected [B,3,32,32] input, got " + shape_str(s));
    int x = conv_block(g, images, "enc.conv1", 2);
    x = conv_block(g, x, "enc.conv2", 2);
    x = conv_block(g, x, "enc.conv3", 2);
    x = res_block(g, x, "enc.res");
    x = ops::reshape(g, x, {s[0], 1024});
    x = ops::matmul(g, x, g.leaf(*find("enc.fc.w")));
    return ops::bias_add(g, x, g.leaf(*find("enc.fc.b")));
  }

  // [B,d] -> [B,3,32,32]
  int decode(Graph<T>& g, int z) {
    const std::vector<int> s = g.val(z).shape;
    if (s.size() != 2 || s[1] != layout.d)
      throw ShapeError("decode: expected [B," + std::to_string(layout.d) + "] input, got " +
                       shape_str(s));
    int x = ops::matmul(g, z, g.leaf(*find("dec.fc.w")));
    x = ops::bias_add(g, x, g.leaf(*find("dec.fc.b")));
    x = ops::reshape(g, x, {s[0], 64, 4, 4});
    x = res_block(g, x, "dec.res");
    x = ops::upsample2_nearest(g, x);
    x = conv_block(g, x, "dec.up1", 1);
    x = ops::upsample2_nearest(g, x);
    x = conv_block(g, x, "dec.up2", 1);
    x = ops::upsample2_nearest(g, x);
    x = conv_block(g, x, "dec.up3", 1);
    x = ops::conv2d(g, x, g.leaf(*find("dec.out.w")), 1, 1);
    x = ops::channel_bias_add(g, x, g.leaf(*find("dec.out.b")));
    return ops::sigmoid(g, x);
  }

  // Both directions share the A leaf so per-step gradients land on one node.
  int leaf_a(Graph<T>& g) { return g.leaf(*mixing.a); }

  int to_sources(Graph<T>& g, int z, int a_node) {
    return ops::isa_to_sources(g, z, a_node, mixing.inverse());
  }

  int to_latent(Graph<T>& g, int s, int a_node) { return ops::isa_to_latent(g, s, a_node); }

  // [B,d] -> [B,d_max], embedding of subspace i's coordinates
  int head_forward(Graph<T>& g, int s, int i) {
    layout.check_index(i);
    int x = ops::slice_cols(g, s, layout.offsets[static_cast<std::size_t>(i)],
                            layout.dims[static_cast<std::size_t>(i)]);
    x = ops::matmul(g, x, g.leaf(*find("head." + std::to_string(i) + ".w")));
    x = ops::bias_add(g, x, g.leaf(*find("head." + std::to_string(i) + ".b")));
    return ops::relu(g, x);
  }

  // [B,d_max] -> [B,C] on the simplex
  int classify_subspace(Graph<T>& g, int embedded) {
    int x = ops::matmul(g, embedded, g.leaf(*find("cls.w")));
    x = ops::bias_add(g, x, g.leaf(*find("cls.b")));
    return ops::softmax_rows(g, x);
  }

  // Eager conveniences for evaluation; no backward pass is run.
  Tensor<T> encode_values(const Tensor<T>& images) {
    Graph<T> g;
    return g.val(encode(g, g.constant(images)));
  }

  Tensor<T> decode_values(const Tensor<T>& z) {
    Graph<T> g;
    return g.val(decode(g, g.constant(z)));
  }

  std::vector<T> to_sources_values(const std::vector<T>& z) {
    return matvec(mixing.inverse(), z);
  }

  std::vector<T> to_latent_values(const std::vector<T>& s) { return matvec(mixing.a->value, s); }

 private:
  std::vector<Parameter<T>> params_;

  void add_conv(const std::string& name, int cout, int cin, Rng& rng, double gain = 2.0) {
    const int fan_in = cin * 9;
    const double std = std::sqrt(gain / fan_in);
    Tensor<T> w({cout, cin, 3, 3});
    for (auto& x : w.data) x = T(std * rng.normal());
    params_.emplace_back(name + ".w", std::move(w));
    params_.emplace_back(name + ".b", Tensor<T>::zeros({cout}));
  }

  void add_fc(const std::string& name, int in, int out, Rng& rng, double gain) {
    const double std = std::sqrt(gain / in);
    Tensor<T> w({in, out});
    for (auto& x : w.data) x = T(std * rng.normal());
    params_.emplace_back(name + ".w", std::move(w));
    params_.emplace_back(name + ".b", Tensor<T>::zeros({out}));
  }

  int conv_block(Graph<T>& g, int x, const std::string& name, int stride) {
    x = ops::conv2d(g, x, g.leaf(*find(name + ".w")), stride, 1);
    x = ops::channel_bias_add(g, x, g.leaf(*find(name + ".b")));
    return ops::relu(g, x);
  }

  int res_block(Graph<T>& g, int x, const std::string& name) {
    int t = ops::conv2d(g, x, g.leaf(*find(name + ".a.w")), 1, 1);
    t = ops::channel_bias_add(g, t, g.leaf(*find(name + ".a.b")));
    t = ops::relu(g, t);
    t = ops::conv2d(g, t, g.leaf(*find(name + ".b.w")), 1, 1);
    t = ops::channel_bias_add(g, t, g.leaf(*find(name + ".b.b")));
    return ops::relu(g, ops::add(g, x, t));
  }
};

}  // namespace isae
