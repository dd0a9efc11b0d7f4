#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfkd {

// Thrown whenever an operation receives arrays with incompatible geometry.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major n-d array. The layout for image batches is NCHW.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape)) {}
  Tensor(std::vector<int> s, T init) : shape(std::move(s)), data(count(shape), init) {}

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("negative dimension in shape");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 4-d accessor (b, c, h, w); used by image code where clarity beats speed.
  T& at4(int b, int c, int h, int w) {
    return data[((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  const T& at4(int b, int c, int h, int w) const {
    return data[((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  T& at2(int r, int c) { return data[static_cast<int64_t>(r) * shape[1] + c]; }
  const T& at2(int r, int c) const { return data[static_cast<int64_t>(r) * shape[1] + c]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  Tensor<T> reshaped(std::vector<int> s) const {
    if (count(s) != numel()) throw ShapeError("reshape changes element count");
    Tensor<T> out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  bool same_shape(const Tensor<T>& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }

  static Tensor<T> zeros_like(const Tensor<T>& o) { return Tensor<T>(o.shape); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* where) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace dfkd
