#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"

namespace bdlab {

// Dense row-major tensor. `grad` is empty unless gradients have been
// requested and a backward pass has allocated it; when present it has the
// same number of elements as `data`.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  TensorT() = default;

  explicit TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("tensor dimension must be positive");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  void zero_grad() { grad.assign(data.size(), T(0)); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  // Convenience indexers for small tensors in tests and glue code; hot
  // kernels index data directly.
  T& at(int i) { return data[static_cast<size_t>(i)]; }
  T at(int i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  T at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& t) {
  TensorT<To> out;
  out.shape = t.shape;
  out.requires_grad = t.requires_grad;
  out.data.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

}  // namespace bdlab
