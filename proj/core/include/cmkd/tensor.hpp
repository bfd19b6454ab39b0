#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmkd/error.hpp"

namespace cmkd {

// Dense row-major tensor of rank <= 4. Images use (H, W, C) axis order so the
// HW x C flattening used throughout the fusion and distillation math is a
// pure view of the buffer.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(checked_numel(shape)), T(0));
  }

  static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<int> s, T v) {
    TensorT t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static TensorT scalar(T v) {
    TensorT t({1});
    t.data[0] = v;
    return t;
  }

  static TensorT from(std::vector<int> s, std::vector<T> d) {
    require(checked_numel(s) == static_cast<long long>(d.size()), Err::ElementCountMismatch,
            "tensor data length does not match shape");
    TensorT t;
    t.shape = std::move(s);
    t.data = std::move(d);
    return t;
  }

  static long long checked_numel(const std::vector<int>& s) {
    require(!s.empty() && s.size() <= 4, Err::RankError, "rank must be in [1, 4]");
    long long n = 1;
    for (int e : s) {
      require(e >= 1, Err::ShapeMismatch, "extent must be >= 1");
      n *= e;
    }
    return n;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  long long numel() const { return static_cast<long long>(data.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  T& at2(int i, int j) { return data[static_cast<std::size_t>(i) * dim(1) + j]; }
  T at2(int i, int j) const { return data[static_cast<std::size_t>(i) * dim(1) + j]; }

  T& at3(int h, int w, int c) {
    return data[(static_cast<std::size_t>(h) * dim(1) + w) * dim(2) + c];
  }
  T at3(int h, int w, int c) const {
    return data[(static_cast<std::size_t>(h) * dim(1) + w) * dim(2) + c];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T>
std::string shape_str(const TensorT<T>& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape[i]);
  }
  return s + ")";
}

template <typename To, typename From>
TensorT<To> cast_tensor(const TensorT<From>& a) {
  TensorT<To> out;
  out.shape = a.shape;
  out.data.resize(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = static_cast<To>(a.data[i]);
  return out;
}

} // namespace cmkd
