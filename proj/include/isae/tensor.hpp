#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "isae/errors.hpp"

namespace isae {

using real = float;  // global training precision; tests may instantiate double

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

// Dense row-major tensor. Plain value type; the autodiff graph wraps it.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s)
      : shape(std::move(s)), data(static_cast<std::size_t>(shape_numel(shape)), T(0)) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * n + i] = T(1);
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  const T& at(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }

  T& at4(int a, int b, int c, int d) {
    return data[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) * dim(3) + d];
  }
  const T& at4(int a, int b, int c, int d) const {
    return data[((static_cast<std::size_t>(a) * dim(1) + b) * dim(2) + c) * dim(3) + d];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

}  // namespace isae
