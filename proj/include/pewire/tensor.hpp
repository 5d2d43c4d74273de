#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "pewire/errors.hpp"

namespace pewire {

using Shape = std::vector<int>;

inline long long numel_of(const Shape& shape) {
  long long n = 1;
  for (int e : shape) {
    if (e <= 0) throw shape_error("tensor extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense n-dimensional array, row-major flat buffer. The only numeric carrier
// in the library. Scalar type is a template parameter; the artifact runs
// float32, float64 is instantiated by the gradient-check harness.
template <class T>
struct TensorT {
  Shape shape;
  std::vector<T> data;

  TensorT() = default;
  explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), T(0)) {}
  TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<long long>(data.size()) != numel_of(shape))
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }

  static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
  static TensorT full(Shape s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  long long numel() const { return static_cast<long long>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  int rows() const {
    if (rank() != 2) throw shape_error("rows() on non-2d tensor " + shape_str(shape));
    return shape[0];
  }
  int cols() const {
    if (rank() != 2) throw shape_error("cols() on non-2d tensor " + shape_str(shape));
    return shape[1];
  }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  T& operator[](size_t i) { return data[i]; }
  T operator[](size_t i) const { return data[i]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

using Tensor = TensorT<float>;

template <class To, class From>
TensorT<To> tensor_cast(const TensorT<From>& t) {
  TensorT<To> out;
  out.shape = t.shape;
  out.data.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

}  // namespace pewire
