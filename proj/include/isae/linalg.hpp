#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "isae/errors.hpp"
#include "isae/tensor.hpp"

namespace isae {

// All dense products run through Eigen's single-threaded GEMM; a hand-rolled
// triple loop is ~7x slower on the conv workloads that dominate training.
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// c[n,m] += a[n,k] * b[k,m]
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, int n, int k, int m) {
  Eigen::Map<const RowMat<T>> ma(a, n, k), mb(b, k, m);
  Eigen::Map<RowMat<T>> mc(c, n, m);
  mc.noalias() += ma * mb;
}

// c[n,m] += a[n,k] * b[m,k]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int n, int k, int m) {
  Eigen::Map<const RowMat<T>> ma(a, n, k), mb(b, m, k);
  Eigen::Map<RowMat<T>> mc(c, n, m);
  mc.noalias() += ma * mb.transpose();
}

// c[k,m] += a[n,k]^T * b[n,m]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int n, int k, int m) {
  Eigen::Map<const RowMat<T>> ma(a, n, k), mb(b, n, m);
  Eigen::Map<RowMat<T>> mc(c, k, m);
  mc.noalias() += ma.transpose() * mb;
}

template <typename T>
Tensor<T> matmul_values(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm_nn_acc(a.data.data(), b.data.data(), c.data.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

// y = M * x with M square row-major (math convention, column vectors).
template <typename T>
std::vector<T> matvec(const Tensor<T>& m, const std::vector<T>& x) {
  const int n = m.dim(0);
  if (m.rank() != 2 || m.dim(1) != static_cast<int>(x.size()))
    throw ShapeError("matvec: incompatible shapes " + shape_str(m.shape) + " vs vector of " +
                     std::to_string(x.size()));
  std::vector<T> y(static_cast<std::size_t>(n), T(0));
  for (int i = 0; i < n; ++i) {
    T acc = T(0);
    const T* row = m.data.data() + static_cast<std::size_t>(i) * m.dim(1);
    for (int j = 0; j < m.dim(1); ++j) acc += row[j] * x[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

template <typename T>
T norm1(const Tensor<T>& m) {  // max absolute column sum
  const int n = m.dim(0), c = m.dim(1);
  T best = T(0);
  for (int j = 0; j < c; ++j) {
    T s = T(0);
    for (int i = 0; i < n; ++i) s += std::abs(m.data[static_cast<std::size_t>(i) * c + j]);
    best = std::max(best, s);
  }
  return best;
}

// Inverse via LU decomposition with partial pivoting, then column-wise
// forward/back substitution against the identity. Throws IllConditionedError
// when a pivot falls below pivot_tol or the 1-norm condition estimate
// ||A||_1 * ||A^-1||_1 exceeds cond_limit.
template <typename T>
Tensor<T> invert_matrix(const Tensor<T>& a, double pivot_tol = 1e-8,
                        double cond_limit = 1e6) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw ShapeError("invert_matrix: expected square matrix, got " + shape_str(a.shape));
  const int n = a.dim(0);
  std::vector<double> lu(a.data.begin(), a.data.end());
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  auto at = [&](int i, int j) -> double& { return lu[static_cast<std::size_t>(i) * n + j]; };

  for (int k = 0; k < n; ++k) {
    int pivot = k;
    for (int i = k + 1; i < n; ++i)
      if (std::abs(at(i, k)) > std::abs(at(pivot, k))) pivot = i;
    if (std::abs(at(pivot, k)) < pivot_tol)
      throw IllConditionedError("invert_matrix: pivot " + std::to_string(std::abs(at(pivot, k))) +
                                " below tolerance " + std::to_string(pivot_tol) + " at column " +
                                std::to_string(k));
    if (pivot != k) {
      for (int j = 0; j < n; ++j) std::swap(at(k, j), at(pivot, j));
      std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(pivot)]);
    }
    for (int i = k + 1; i < n; ++i) {
      const double f = at(i, k) / at(k, k);
      at(i, k) = f;
      for (int j = k + 1; j < n; ++j) at(i, j) -= f * at(k, j);
    }
  }

  Tensor<T> inv({n, n});
  std::vector<double> y(static_cast<std::size_t>(n)), x(static_cast<std::size_t>(n));
  for (int col = 0; col < n; ++col) {
    for (int i = 0; i < n; ++i) {  // L y = P e_col
      double s = perm[static_cast<std::size_t>(i)] == col ? 1.0 : 0.0;
      for (int j = 0; j < i; ++j) s -= at(i, j) * y[static_cast<std::size_t>(j)];
      y[static_cast<std::size_t>(i)] = s;
    }
    for (int i = n - 1; i >= 0; --i) {  // U x = y
      double s = y[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < n; ++j) s -= at(i, j) * x[static_cast<std::size_t>(j)];
      x[static_cast<std::size_t>(i)] = s / at(i, i);
    }
    for (int i = 0; i < n; ++i)
      inv.data[static_cast<std::size_t>(i) * n + col] = static_cast<T>(x[static_cast<std::size_t>(i)]);
  }

  const double cond = static_cast<double>(norm1(a)) * static_cast<double>(norm1(inv));
  if (cond > cond_limit)
    throw IllConditionedError("invert_matrix: condition estimate " + std::to_string(cond) +
                              " exceeds limit " + std::to_string(cond_limit));
  return inv;
}

struct EigenDecomposition {
  std::vector<double> values;               // descending
  std::vector<std::vector<double>> vectors; // vectors[i] pairs with values[i]
};

// Cyclic Jacobi eigensolver for small symmetric matrices (row-major n*n).
// Sweeps until the off-diagonal Frobenius norm falls below tol * ||A||_F.
inline EigenDecomposition sym_eig_jacobi(std::vector<double> a, int n, double tol = 1e-10) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;
  auto A = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
  auto V = [&](int i, int j) -> double& { return v[static_cast<std::size_t>(i) * n + j]; };

  double frob = 0.0;
  for (double x : a) frob += x * x;
  frob = std::sqrt(frob);
  const double stop = tol * std::max(frob, 1e-300);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += 2.0 * A(i, j) * A(i, j);
    if (std::sqrt(off) <= stop) break;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        if (A(p, q) == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * A(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = A(i, p), aiq = A(i, q);
          A(i, p) = c * aip - s * aiq;
          A(i, q) = s * aip + c * aiq;
        }
        for (int j = 0; j < n; ++j) {
          const double apj = A(p, j), aqj = A(q, j);
          A(p, j) = c * apj - s * aqj;
          A(q, j) = s * apj + c * aqj;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = V(i, p), viq = V(i, q);
          V(i, p) = c * vip - s * viq;
          V(i, q) = s * vip + c * viq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) { return A(x, x) > A(y, y); });

  EigenDecomposition out;
  out.values.resize(static_cast<std::size_t>(n));
  out.vectors.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
  for (int r = 0; r < n; ++r) {
    const int col = order[static_cast<std::size_t>(r)];
    out.values[static_cast<std::size_t>(r)] = A(col, col);
    for (int i = 0; i < n; ++i)
      out.vectors[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] = V(i, col);
  }
  return out;
}

}  // namespace isae
