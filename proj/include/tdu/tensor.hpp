#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tdu/errors.hpp"

namespace tdu {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// When enabled, every op output is scanned for NaN/inf and a NumericError is
// thrown on the first hit. Off by default; tests and grad-check turn it on.
bool checked_mode();
void set_checked_mode(bool on);

namespace detail {
inline bool& checked_flag() {
  static bool flag = false;
  return flag;
}
}  // namespace detail

inline bool checked_mode() { return detail::checked_flag(); }
inline void set_checked_mode(bool on) { detail::checked_flag() = on; }

// Dense row-major n-d array. float for training, double for verification.
// grad is either empty or exactly data.size() elements.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    std::size_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data.assign(n, T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    for (T& x : t.data) x = v;
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values) {
    std::size_t n = shape_numel(s);
    if (values.size() != n) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  // 2-d accessors; most of the model works on [rows, cols] tensors.
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  T& at(int i, int j) {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) +
                static_cast<std::size_t>(j)];
  }
  const T& at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) +
                static_cast<std::size_t>(j)];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() {
    for (T& g : grad) g = T(0);
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  if (!checked_mode()) return;
  for (const T& v : t.data) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string("non-finite value after op '") + op + "'");
    }
  }
}

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>::zeros(t.shape);
}

template <typename Dst, typename Src>
Tensor<Dst> cast_tensor(const Tensor<Src>& t) {
  Tensor<Dst> out;
  out.shape = t.shape;
  out.data.reserve(t.data.size());
  for (const Src& v : t.data) out.data.push_back(static_cast<Dst>(v));
  return out;
}

}  // namespace tdu
