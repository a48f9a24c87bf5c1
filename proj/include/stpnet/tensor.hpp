#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "stpnet/common.hpp"

namespace stpnet {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Plain value-semantic dense array, row-major. All autodiff state lives on the
// Tape; a Tensor is just shape + data.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(numel(shape) == int64_t(data.size()), Status::InvalidArgument,
            "tensor data length does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(size_t(numel(t.shape)), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(size_t(numel(t.shape)), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int64_t size() const { return int64_t(data.size()); }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[size_t(i)]; }
  const T& operator[](int64_t i) const { return data[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.data)
    if (!std::isfinite(double(v))) return false;
  return true;
}

}  // namespace stpnet
