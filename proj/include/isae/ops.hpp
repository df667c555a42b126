#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "isae/graph.hpp"
#include "isae/linalg.hpp"
#include "isae/tensor.hpp"

// Graph ops. Each op validates shapes, computes its value immediately
// (define-by-run) and records a closure that scatters gradients back into its
// inputs. Gradients always accumulate: a node may feed several consumers.
namespace isae::ops {

namespace detail {

template <typename T>
void check_rank(const char* op, const Tensor<T>& t, int rank) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(rank) +
                     " tensor, got " + shape_str(t.shape));
}

// Copy plane [H,W] into a zero-padded [H+2p, W+2p] buffer.
template <typename T>
void pad_plane(const T* src, int h, int w, int p, T* dst) {
  const int wp = w + 2 * p;
  std::fill(dst, dst + static_cast<std::size_t>(h + 2 * p) * wp, T(0));
  for (int y = 0; y < h; ++y)
    std::copy(src + static_cast<std::size_t>(y) * w, src + static_cast<std::size_t>(y + 1) * w,
              dst + static_cast<std::size_t>(y + p) * wp + p);
}

// Lower one padded image into the patch matrix col[ci*kh*kw, ho*wo] so the
// convolution becomes a single GEMM with the [co, ci*kh*kw] kernel matrix.
template <typename T>
void im2col(const T* xp, int ci_n, int hp, int wp, int kh, int kw, int stride, int ho, int wo,
            T* col) {
  for (int ci = 0; ci < ci_n; ++ci) {
    const T* xplane = xp + static_cast<std::size_t>(ci) * hp * wp;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* crow = col + (static_cast<std::size_t>(ci) * kh * kw + ky * kw + kx) *
                            (static_cast<std::size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          const T* xrow = xplane + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
          if (stride == 1) {
            std::copy(xrow, xrow + wo, crow);
            crow += wo;
          } else {
            for (int ox = 0; ox < wo; ++ox) *crow++ = xrow[ox * stride];
          }
        }
      }
  }
}

// Transpose of im2col: scatter-add patch-matrix gradients back into the
// padded image buffer.
template <typename T>
void col2im_acc(const T* col, int ci_n, int hp, int wp, int kh, int kw, int stride, int ho,
                int wo, T* xp) {
  for (int ci = 0; ci < ci_n; ++ci) {
    T* xplane = xp + static_cast<std::size_t>(ci) * hp * wp;
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* crow = col + (static_cast<std::size_t>(ci) * kh * kw + ky * kw + kx) *
                                  (static_cast<std::size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          T* xrow = xplane + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
          if (stride == 1) {
            for (int ox = 0; ox < wo; ++ox) xrow[ox] += *crow++;
          } else {
            for (int ox = 0; ox < wo; ++ox) xrow[ox * stride] += *crow++;
          }
        }
      }
  }
}

}  // namespace detail

template <typename T>
int add(Graph<T>& g, int a, int b) {
  require_same_shape("add", g.val(a), g.val(b));
  Tensor<T> out = g.val(a);
  const auto& bv = g.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(a)) {
      auto& da = gr.grad_buf(a).data;
      for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (std::size_t i = 0; i < go.size(); ++i) db[i] += go[i];
    }
  });
}

template <typename T>
int sub(Graph<T>& g, int a, int b) {
  require_same_shape("sub", g.val(a), g.val(b));
  Tensor<T> out = g.val(a);
  const auto& bv = g.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(a)) {
      auto& da = gr.grad_buf(a).data;
      for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (std::size_t i = 0; i < go.size(); ++i) db[i] -= go[i];
    }
  });
}

template <typename T>
int mul(Graph<T>& g, int a, int b) {
  require_same_shape("mul", g.val(a), g.val(b));
  Tensor<T> out = g.val(a);
  const auto& bv = g.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(a)) {
      auto& da = gr.grad_buf(a).data;
      const auto& bv2 = gr.val(b).data;
      for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i] * bv2[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      const auto& av = gr.val(a).data;
      for (std::size_t i = 0; i < go.size(); ++i) db[i] += go[i] * av[i];
    }
  });
}

template <typename T>
int add_scalar(Graph<T>& g, int a, T c) {
  Tensor<T> out = g.val(a);
  for (auto& x : out.data) x += c;
  return g.record(std::move(out), {a}, [a](Graph<T>& gr, int self) {
    if (!gr.wants_grad(a)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& da = gr.grad_buf(a).data;
    for (std::size_t i = 0; i < go.size(); ++i) da[i] += go[i];
  });
}

template <typename T>
int mul_scalar(Graph<T>& g, int a, T c) {
  Tensor<T> out = g.val(a);
  for (auto& x : out.data) x *= c;
  return g.record(std::move(out), {a}, [a, c](Graph<T>& gr, int self) {
    if (!gr.wants_grad(a)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& da = gr.grad_buf(a).data;
    for (std::size_t i = 0; i < go.size(); ++i) da[i] += c * go[i];
  });
}

template <typename T>
int matmul(Graph<T>& g, int a, int b) {
  const auto& av = g.val(a);
  const auto& bv = g.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) + " vs " +
                     shape_str(bv.shape));
  const int n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor<T> out({n, m});
  gemm_nn_acc(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
  return g.record(std::move(out), {a, b}, [a, b, n, k, m](Graph<T>& gr, int self) {
    const T* go = gr.grad_buf(self).data.data();
    if (gr.wants_grad(a))
      gemm_nt_acc(go, gr.val(b).data.data(), gr.grad_buf(a).data.data(), n, m, k);
    if (gr.wants_grad(b))
      gemm_tn_acc(gr.val(a).data.data(), go, gr.grad_buf(b).data.data(), n, k, m);
  });
}

// x[n,m] + b[m], broadcast over rows.
template <typename T>
int bias_add(Graph<T>& g, int x, int b) {
  const auto& xv = g.val(x);
  const auto& bv = g.val(b);
  detail::check_rank("bias_add", xv, 2);
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw ShapeError("bias_add: bias " + shape_str(bv.shape) + " does not match " +
                     shape_str(xv.shape));
  const int n = xv.dim(0), m = xv.dim(1);
  Tensor<T> out = xv;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.data[static_cast<std::size_t>(i) * m + j] += bv.data[static_cast<std::size_t>(j)];
  return g.record(std::move(out), {x, b}, [x, b, n, m](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(x)) {
      auto& dx = gr.grad_buf(x).data;
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) db[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * m + j];
    }
  });
}

// x[n,m] * v[m], broadcast over rows.
template <typename T>
int row_scale(Graph<T>& g, int x, int v) {
  const auto& xv = g.val(x);
  const auto& vv = g.val(v);
  detail::check_rank("row_scale", xv, 2);
  if (vv.rank() != 1 || vv.dim(0) != xv.dim(1))
    throw ShapeError("row_scale: scale " + shape_str(vv.shape) + " does not match " +
                     shape_str(xv.shape));
  const int n = xv.dim(0), m = xv.dim(1);
  Tensor<T> out = xv;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.data[static_cast<std::size_t>(i) * m + j] *= vv.data[static_cast<std::size_t>(j)];
  return g.record(std::move(out), {x, v}, [x, v, n, m](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(x)) {
      auto& dx = gr.grad_buf(x).data;
      const auto& vv2 = gr.val(v).data;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          dx[static_cast<std::size_t>(i) * m + j] += go[static_cast<std::size_t>(i) * m + j] * vv2[static_cast<std::size_t>(j)];
    }
    if (gr.wants_grad(v)) {
      auto& dv = gr.grad_buf(v).data;
      const auto& xv2 = gr.val(x).data;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          dv[static_cast<std::size_t>(j)] += go[static_cast<std::size_t>(i) * m + j] * xv2[static_cast<std::size_t>(i) * m + j];
    }
  });
}

template <typename T>
int relu(Graph<T>& g, int x) {
  Tensor<T> out = g.val(x);
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    const auto& xv = gr.val(x).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > T(0)) dx[i] += go[i];
  });
}

template <typename T>
int sigmoid(Graph<T>& g, int x) {
  Tensor<T> out = g.val(x);
  for (auto& v : out.data) {
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    const auto& yv = gr.val(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <typename T>
int log_e(Graph<T>& g, int x) {
  Tensor<T> out = g.val(x);
  for (auto& v : out.data) v = std::log(v);
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    const auto& xv = gr.val(x).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i] / xv[i];
  });
}

// Row-wise softmax over the last axis of a rank-2 tensor.
template <typename T>
int softmax_rows(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  detail::check_rank("softmax_rows", xv, 2);
  const int n = xv.dim(0), m = xv.dim(1);
  Tensor<T> out({n, m});
  for (int i = 0; i < n; ++i) {
    const T* row = xv.data.data() + static_cast<std::size_t>(i) * m;
    T* orow = out.data.data() + static_cast<std::size_t>(i) * m;
    T mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < m; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < m; ++j) orow[j] /= sum;
  }
  return g.record(std::move(out), {x}, [x, n, m](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    const auto& yv = gr.val(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      T dot = T(0);
      for (int j = 0; j < m; ++j) dot += go[off + j] * yv[off + j];
      for (int j = 0; j < m; ++j) dx[off + j] += yv[off + j] * (go[off + j] - dot);
    }
  });
}

template <typename T>
int reshape(Graph<T>& g, int x, std::vector<int> new_shape) {
  const auto& xv = g.val(x);
  if (shape_numel(new_shape) != xv.size())
    throw ShapeError("reshape: cannot reshape " + shape_str(xv.shape) + " to " +
                     shape_str(new_shape));
  Tensor<T> out(new_shape, xv.data);
  return g.record(std::move(out), {x}, [x](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
  });
}

// Concatenate along axis 0; trailing dims must agree.
template <typename T>
int concat_rows(Graph<T>& g, const std::vector<int>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows: no inputs");
  std::vector<int> shape = g.val(xs[0]).shape;
  int rows = 0;
  for (int id : xs) {
    const auto& v = g.val(id);
    if (v.rank() != static_cast<int>(shape.size()))
      throw ShapeError("concat_rows: rank mismatch " + shape_str(v.shape) + " vs " +
                       shape_str(shape));
    for (int d = 1; d < v.rank(); ++d)
      if (v.dim(d) != shape[static_cast<std::size_t>(d)])
        throw ShapeError("concat_rows: trailing dims differ " + shape_str(v.shape) + " vs " +
                         shape_str(shape));
    rows += v.dim(0);
  }
  shape[0] = rows;
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (int id : xs) {
    const auto& v = g.val(id).data;
    std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return g.record(std::move(out), xs, [xs](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    std::size_t off2 = 0;
    for (int id : xs) {
      const std::size_t n = gr.val(id).data.size();
      if (gr.wants_grad(id)) {
        auto& dx = gr.grad_buf(id).data;
        for (std::size_t i = 0; i < n; ++i) dx[i] += go[off2 + i];
      }
      off2 += n;
    }
  });
}

// Columns [off, off+len) of a rank-2 tensor.
template <typename T>
int slice_cols(Graph<T>& g, int x, int off, int len) {
  const auto& xv = g.val(x);
  detail::check_rank("slice_cols", xv, 2);
  const int n = xv.dim(0), m = xv.dim(1);
  if (off < 0 || len <= 0 || off + len > m)
    throw ShapeError("slice_cols: range [" + std::to_string(off) + "," +
                     std::to_string(off + len) + ") out of " + shape_str(xv.shape));
  Tensor<T> out({n, len});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < len; ++j)
      out.data[static_cast<std::size_t>(i) * len + j] = xv.data[static_cast<std::size_t>(i) * m + off + j];
  return g.record(std::move(out), {x}, [x, off, len, n, m](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j)
        dx[static_cast<std::size_t>(i) * m + off + j] += go[static_cast<std::size_t>(i) * len + j];
  });
}

template <typename T>
int sum_all(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  T s = T(0);
  for (T v : xv.data) s += v;
  return g.record(Tensor<T>::scalar(s), {x}, [x](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const T go = gr.grad_buf(self).data[0];
    auto& dx = gr.grad_buf(x).data;
    for (auto& v : dx) v += go;
  });
}

template <typename T>
int mean_all(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  T s = T(0);
  for (T v : xv.data) s += v;
  const T inv_n = T(1) / static_cast<T>(xv.size());
  return g.record(Tensor<T>::scalar(s * inv_n), {x}, [x, inv_n](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const T go = gr.grad_buf(self).data[0] * inv_n;
    auto& dx = gr.grad_buf(x).data;
    for (auto& v : dx) v += go;
  });
}

// Elementwise max; ties route the gradient to the first argument.
template <typename T>
int max2(Graph<T>& g, int a, int b) {
  require_same_shape("max2", g.val(a), g.val(b));
  Tensor<T> out = g.val(a);
  const auto& bv = g.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::max(out.data[i], bv[i]);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    const auto& av = gr.val(a).data;
    const auto& bv2 = gr.val(b).data;
    if (gr.wants_grad(a)) {
      auto& da = gr.grad_buf(a).data;
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av[i] >= bv2[i]) da[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av[i] < bv2[i]) db[i] += go[i];
    }
  });
}

template <typename T>
int min2(Graph<T>& g, int a, int b) {
  require_same_shape("min2", g.val(a), g.val(b));
  Tensor<T> out = g.val(a);
  const auto& bv = g.val(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(out.data[i], bv[i]);
  return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    const auto& av = gr.val(a).data;
    const auto& bv2 = gr.val(b).data;
    if (gr.wants_grad(a)) {
      auto& da = gr.grad_buf(a).data;
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av[i] <= bv2[i]) da[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (std::size_t i = 0; i < go.size(); ++i)
        if (av[i] > bv2[i]) db[i] += go[i];
    }
  });
}

// 2-D convolution, NCHW, zero padding. x[B,Ci,H,W] * w[Co,Ci,kh,kw].
template <typename T>
int conv2d(Graph<T>& g, int x, int w, int stride, int pad) {
  const auto& xv = g.val(x);
  const auto& wv = g.val(w);
  detail::check_rank("conv2d", xv, 4);
  detail::check_rank("conv2d", wv, 4);
  if (xv.dim(1) != wv.dim(1))
    throw ShapeError("conv2d: input channels of " + shape_str(xv.shape) +
                     " do not match kernel " + shape_str(wv.shape));
  if (stride < 1 || pad < 0)
    throw ShapeError("conv2d: bad stride/pad " + std::to_string(stride) + "/" +
                     std::to_string(pad));
  const int bsz = xv.dim(0), ci_n = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int co_n = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ShapeError("conv2d: kernel " + shape_str(wv.shape) + " larger than padded input " +
                     shape_str(xv.shape));
  const int hp = h + 2 * pad, wp = wd + 2 * pad;

  const int cik2 = ci_n * kh * kw;
  const int howo = ho * wo;

  Tensor<T> out({bsz, co_n, ho, wo});
  std::vector<T> xp(static_cast<std::size_t>(ci_n) * hp * wp);
  std::vector<T> col(static_cast<std::size_t>(cik2) * howo);
  for (int b = 0; b < bsz; ++b) {
    for (int ci = 0; ci < ci_n; ++ci)
      detail::pad_plane(xv.data.data() + (static_cast<std::size_t>(b) * ci_n + ci) * h * wd, h,
                        wd, pad, xp.data() + static_cast<std::size_t>(ci) * hp * wp);
    detail::im2col(xp.data(), ci_n, hp, wp, kh, kw, stride, ho, wo, col.data());
    gemm_nn_acc(wv.data.data(), col.data(),
                out.data.data() + static_cast<std::size_t>(b) * co_n * howo, co_n, cik2, howo);
  }

  return g.record(std::move(out), {x, w},
                  [x, w, stride, pad, bsz, ci_n, h, wd, co_n, kh, kw, ho, wo, hp, wp, cik2,
                   howo](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    const auto& xv2 = gr.val(x);
    const auto& wv2 = gr.val(w);
    if (gr.wants_grad(x)) {
      auto& dx = gr.grad_buf(x).data;
      std::vector<T> dxp(static_cast<std::size_t>(ci_n) * hp * wp);
      std::vector<T> dcol(static_cast<std::size_t>(cik2) * howo);
      for (int b = 0; b < bsz; ++b) {
        std::fill(dxp.begin(), dxp.end(), T(0));
        std::fill(dcol.begin(), dcol.end(), T(0));
        gemm_tn_acc(wv2.data.data(), go.data() + static_cast<std::size_t>(b) * co_n * howo,
                    dcol.data(), co_n, cik2, howo);
        detail::col2im_acc(dcol.data(), ci_n, hp, wp, kh, kw, stride, ho, wo, dxp.data());
        for (int ci = 0; ci < ci_n; ++ci) {
          T* dst = dx.data() + (static_cast<std::size_t>(b) * ci_n + ci) * h * wd;
          const T* src = dxp.data() + static_cast<std::size_t>(ci) * hp * wp;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx)
              dst[static_cast<std::size_t>(y) * wd + xx] +=
                  src[static_cast<std::size_t>(y + pad) * wp + xx + pad];
        }
      }
    }
    if (gr.wants_grad(w)) {
      auto& dw = gr.grad_buf(w).data;
      std::vector<T> xp2(static_cast<std::size_t>(ci_n) * hp * wp);
      std::vector<T> col2(static_cast<std::size_t>(cik2) * howo);
      for (int b = 0; b < bsz; ++b) {
        for (int ci = 0; ci < ci_n; ++ci)
          detail::pad_plane(xv2.data.data() + (static_cast<std::size_t>(b) * ci_n + ci) * h * wd,
                            h, wd, pad, xp2.data() + static_cast<std::size_t>(ci) * hp * wp);
        detail::im2col(xp2.data(), ci_n, hp, wp, kh, kw, stride, ho, wo, col2.data());
        gemm_nt_acc(go.data() + static_cast<std::size_t>(b) * co_n * howo, col2.data(),
                    dw.data(), co_n, howo, cik2);
      }
    }
  });
}

// Per-channel bias for NCHW maps.
template <typename T>
int channel_bias_add(Graph<T>& g, int x, int b) {
  const auto& xv = g.val(x);
  const auto& bv = g.val(b);
  detail::check_rank("channel_bias_add", xv, 4);
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw ShapeError("channel_bias_add: bias " + shape_str(bv.shape) + " does not match " +
                     shape_str(xv.shape));
  const int bsz = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor<T> out = xv;
  for (int bi = 0; bi < bsz; ++bi)
    for (int ch = 0; ch < c; ++ch) {
      T* p = out.data.data() + (static_cast<std::size_t>(bi) * c + ch) * plane;
      const T add_v = bv.data[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < plane; ++i) p[i] += add_v;
    }
  return g.record(std::move(out), {x, b}, [x, b, bsz, c, plane](Graph<T>& gr, int self) {
    const auto& go = gr.grad_buf(self).data;
    if (gr.wants_grad(x)) {
      auto& dx = gr.grad_buf(x).data;
      for (std::size_t i = 0; i < go.size(); ++i) dx[i] += go[i];
    }
    if (gr.wants_grad(b)) {
      auto& db = gr.grad_buf(b).data;
      for (int bi = 0; bi < bsz; ++bi)
        for (int ch = 0; ch < c; ++ch) {
          const T* p = go.data() + (static_cast<std::size_t>(bi) * c + ch) * plane;
          T s = T(0);
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          db[static_cast<std::size_t>(ch)] += s;
        }
    }
  });
}

// Nearest-neighbor 2x upsample of NCHW maps.
template <typename T>
int upsample2_nearest(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  detail::check_rank("upsample2_nearest", xv, 4);
  const int bsz = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out({bsz, c, 2 * h, 2 * w});
  for (int bc = 0; bc < bsz * c; ++bc) {
    const T* src = xv.data.data() + static_cast<std::size_t>(bc) * h * w;
    T* dst = out.data.data() + static_cast<std::size_t>(bc) * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const T v = src[static_cast<std::size_t>(y) * w + xx];
        T* d = dst + static_cast<std::size_t>(2 * y) * 2 * w + 2 * xx;
        d[0] = v;
        d[1] = v;
        d[2 * w] = v;
        d[2 * w + 1] = v;
      }
  }
  return g.record(std::move(out), {x}, [x, bsz, c, h, w](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (int bc = 0; bc < bsz * c; ++bc) {
      const T* src = go.data() + static_cast<std::size_t>(bc) * 4 * h * w;
      T* dst = dx.data() + static_cast<std::size_t>(bc) * h * w;
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const T* s = src + static_cast<std::size_t>(2 * y) * 2 * w + 2 * xx;
          dst[static_cast<std::size_t>(y) * w + xx] += s[0] + s[1] + s[2 * w] + s[2 * w + 1];
        }
    }
  });
}

// Forward difference along the last axis; the final column is zero.
template <typename T>
int diff_x(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  if (xv.rank() < 2) throw ShapeError("diff_x: need rank >= 2, got " + shape_str(xv.shape));
  const int w = xv.dim(xv.rank() - 1);
  const std::size_t rows = static_cast<std::size_t>(xv.size()) / w;
  Tensor<T> out(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = xv.data.data() + r * w;
    T* dst = out.data.data() + r * w;
    for (int i = 0; i + 1 < w; ++i) dst[i] = src[i + 1] - src[i];
    dst[w - 1] = T(0);
  }
  return g.record(std::move(out), {x}, [x, w, rows](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gsrc = go.data() + r * w;
      T* d = dx.data() + r * w;
      for (int i = 0; i + 1 < w; ++i) {
        d[i + 1] += gsrc[i];
        d[i] -= gsrc[i];
      }
    }
  });
}

// Forward difference along the second-to-last axis; the final row is zero.
template <typename T>
int diff_y(Graph<T>& g, int x) {
  const auto& xv = g.val(x);
  if (xv.rank() < 2) throw ShapeError("diff_y: need rank >= 2, got " + shape_str(xv.shape));
  const int w = xv.dim(xv.rank() - 1);
  const int h = xv.dim(xv.rank() - 2);
  const std::size_t planes = static_cast<std::size_t>(xv.size()) / (static_cast<std::size_t>(h) * w);
  Tensor<T> out(xv.shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data.data() + p * h * w;
    T* dst = out.data.data() + p * h * w;
    for (int y = 0; y + 1 < h; ++y)
      for (int i = 0; i < w; ++i)
        dst[static_cast<std::size_t>(y) * w + i] =
            src[static_cast<std::size_t>(y + 1) * w + i] - src[static_cast<std::size_t>(y) * w + i];
    for (int i = 0; i < w; ++i) dst[static_cast<std::size_t>(h - 1) * w + i] = T(0);
  }
  return g.record(std::move(out), {x}, [x, h, w, planes](Graph<T>& gr, int self) {
    if (!gr.wants_grad(x)) return;
    const auto& go = gr.grad_buf(self).data;
    auto& dx = gr.grad_buf(x).data;
    for (std::size_t p = 0; p < planes; ++p) {
      const T* gsrc = go.data() + p * h * w;
      T* d = dx.data() + p * h * w;
      for (int y = 0; y + 1 < h; ++y)
        for (int i = 0; i < w; ++i) {
          d[static_cast<std::size_t>(y + 1) * w + i] += gsrc[static_cast<std::size_t>(y) * w + i];
          d[static_cast<std::size_t>(y) * w + i] -= gsrc[static_cast<std::size_t>(y) * w + i];
        }
    }
  });
}

// s = z A^-T per row (sources from latents). The inverse is passed in as a
// value; the gradient w.r.t. the mixing matrix itself uses
// d(A^-1) = -A^-1 dA A^-1, so dA = -A^-T (dL/dA^-1) A^-T.
template <typename T>
int isa_to_sources(Graph<T>& g, int z, int a, const Tensor<T>& a_inv) {
  const auto& zv = g.val(z);
  const auto& av = g.val(a);
  detail::check_rank("isa_to_sources", zv, 2);
  const int d = av.dim(0);
  if (av.rank() != 2 || av.dim(1) != d || zv.dim(1) != d || !a_inv.same_shape(av))
    throw ShapeError("isa_to_sources: latent " + shape_str(zv.shape) +
                     " incompatible with mixing matrix " + shape_str(av.shape));
  const int n = zv.dim(0);
  Tensor<T> out({n, d});
  gemm_nt_acc(zv.data.data(), a_inv.data.data(), out.data.data(), n, d, d);
  Tensor<T> inv_copy = a_inv;
  return g.record(std::move(out), {z, a}, [z, a, inv_copy, n, d](Graph<T>& gr, int self) {
    const T* go = gr.grad_buf(self).data.data();
    if (gr.wants_grad(z))
      gemm_nn_acc(go, inv_copy.data.data(), gr.grad_buf(z).data.data(), n, d, d);
    if (gr.wants_grad(a)) {
      // dL/dA^-1 = G^T Z, then dA -= A^-T (G^T Z) A^-T
      Tensor<T> dinv({d, d});
      gemm_tn_acc(go, gr.val(z).data.data(), dinv.data.data(), n, d, d);
      Tensor<T> t1({d, d});
      gemm_tn_acc(inv_copy.data.data(), dinv.data.data(), t1.data.data(), d, d, d);
      Tensor<T> t2({d, d});
      gemm_nt_acc(t1.data.data(), inv_copy.data.data(), t2.data.data(), d, d, d);
      auto& da = gr.grad_buf(a).data;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] -= t2.data[i];
    }
  });
}

// z = s A^T per row (latents from sources).
template <typename T>
int isa_to_latent(Graph<T>& g, int s, int a) {
  const auto& sv = g.val(s);
  const auto& av = g.val(a);
  detail::check_rank("isa_to_latent", sv, 2);
  const int d = av.dim(0);
  if (av.rank() != 2 || av.dim(1) != d || sv.dim(1) != d)
    throw ShapeError("isa_to_latent: sources " + shape_str(sv.shape) +
                     " incompatible with mixing matrix " + shape_str(av.shape));
  const int n = sv.dim(0);
  Tensor<T> out({n, d});
  gemm_nt_acc(sv.data.data(), av.data.data(), out.data.data(), n, d, d);
  return g.record(std::move(out), {s, a}, [s, a, n, d](Graph<T>& gr, int self) {
    const T* go = gr.grad_buf(self).data.data();
    if (gr.wants_grad(s))
      gemm_nn_acc(go, gr.val(a).data.data(), gr.grad_buf(s).data.data(), n, d, d);
    if (gr.wants_grad(a))
      gemm_tn_acc(go, gr.val(s).data.data(), gr.grad_buf(a).data.data(), n, d, d);
  });
}

}  // namespace isae::ops
