#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "dfkd/rng.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

enum class Mode { train, eval };

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  explicit Parameter(std::vector<int> shape) : value(shape), grad(std::move(shape), T(0)) {}
  void zero_grad() { grad.fill(T(0)); }
  int64_t numel() const { return value.numel(); }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRM = Eigen::Map<const RowMat<T>>;

// A layer with explicit reverse-mode passes. forward caches whatever its
// backward needs; each backward must follow its own forward (single slot).
// Frozen layers skip parameter-gradient accumulation but still propagate
// input gradients, which is how the fixed teacher participates in synthesis.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& gy) = 0;
  virtual void collect_params(std::vector<Parameter<T>*>& out) { (void)out; }
  virtual void collect_buffers(std::vector<Tensor<T>*>& out) { (void)out; }
  virtual void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }
  void set_frozen(bool f) { frozen_ = f; }
  bool frozen() const { return frozen_; }

  std::vector<Parameter<T>*> params() {
    std::vector<Parameter<T>*> v;
    collect_params(v);
    return v;
  }
  std::vector<Tensor<T>*> buffers() {
    std::vector<Tensor<T>*> v;
    collect_buffers(v);
    return v;
  }
  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }
  int64_t param_count() {
    int64_t n = 0;
    for (auto* p : params()) n += p->numel();
    return n;
  }

 protected:
  Mode mode_ = Mode::train;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Conv2d: NCHW, square kernel, zero padding. im2col + GEMM per image.
// ---------------------------------------------------------------------------
template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(int in_c, int out_c, int ksize, int stride = 1, int pad = 0, bool bias = true)
      : in_c_(in_c),
        out_c_(out_c),
        k_(ksize),
        stride_(stride),
        pad_(pad),
        weight_({out_c, in_c, ksize, ksize}),
        has_bias_(bias),
        bias_(bias ? std::vector<int>{out_c} : std::vector<int>{0}) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4 || x.dim(1) != in_c_)
      throw ShapeError("Conv2d: bad input " + x.shape_str() + " for in_c=" + std::to_string(in_c_));
    x_ = x;
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    oh_ = (h + 2 * pad_ - k_) / stride_ + 1;
    ow_ = (w + 2 * pad_ - k_) / stride_ + 1;
    if (oh_ <= 0 || ow_ <= 0) throw ShapeError("Conv2d: output would be empty");
    const int K = in_c_ * k_ * k_, L = oh_ * ow_;
    Tensor<T> y({b, out_c_, oh_, ow_});
    RowMat<T> cols(L, K);
    CMapRM<T> wm(weight_.value.ptr(), out_c_, K);
    for (int i = 0; i < b; ++i) {
      im2col(x.ptr() + static_cast<int64_t>(i) * in_c_ * h * w, h, w, cols);
      MapRM<T> ym(y.ptr() + static_cast<int64_t>(i) * out_c_ * L, out_c_, L);
      ym.noalias() = wm * cols.transpose();
      if (has_bias_)
        for (int c = 0; c < out_c_; ++c) ym.row(c).array() += bias_.value[c];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int b = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const int K = in_c_ * k_ * k_, L = oh_ * ow_;
    Tensor<T> gx(x_.shape, T(0));
    RowMat<T> cols(L, K), dcols(L, K);
    CMapRM<T> wm(weight_.value.ptr(), out_c_, K);
    MapRM<T> gwm(weight_.grad.ptr(), out_c_, K);
    for (int i = 0; i < b; ++i) {
      CMapRM<T> gym(gy.ptr() + static_cast<int64_t>(i) * out_c_ * L, out_c_, L);
      if (!this->frozen_) {
        im2col(x_.ptr() + static_cast<int64_t>(i) * in_c_ * h * w, h, w, cols);
        gwm.noalias() += gym * cols;
        if (has_bias_)
          for (int c = 0; c < out_c_; ++c) bias_.grad[c] += gym.row(c).sum();
      }
      dcols.noalias() = gym.transpose() * wm;
      col2im(dcols, h, w, gx.ptr() + static_cast<int64_t>(i) * in_c_ * h * w);
    }
    return gx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  int fan_in() const { return in_c_ * k_ * k_; }

 private:
  void im2col(const T* img, int h, int w, RowMat<T>& cols) const {
    for (int oy = 0; oy < oh_; ++oy) {
      for (int ox = 0; ox < ow_; ++ox) {
        T* row = cols.data() + (static_cast<int64_t>(oy) * ow_ + ox) * cols.cols();
        int r = 0;
        for (int c = 0; c < in_c_; ++c) {
          const T* plane = img + static_cast<int64_t>(c) * h * w;
          for (int ki = 0; ki < k_; ++ki) {
            const int iy = oy * stride_ - pad_ + ki;
            for (int kj = 0; kj < k_; ++kj, ++r) {
              const int ix = ox * stride_ - pad_ + kj;
              row[r] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[static_cast<int64_t>(iy) * w + ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMat<T>& dcols, int h, int w, T* gimg) const {
    for (int oy = 0; oy < oh_; ++oy) {
      for (int ox = 0; ox < ow_; ++ox) {
        const T* row = dcols.data() + (static_cast<int64_t>(oy) * ow_ + ox) * dcols.cols();
        int r = 0;
        for (int c = 0; c < in_c_; ++c) {
          T* plane = gimg + static_cast<int64_t>(c) * h * w;
          for (int ki = 0; ki < k_; ++ki) {
            const int iy = oy * stride_ - pad_ + ki;
            for (int kj = 0; kj < k_; ++kj, ++r) {
              const int ix = ox * stride_ - pad_ + kj;
              if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[static_cast<int64_t>(iy) * w + ix] += row[r];
            }
          }
        }
      }
    }
  }

  int in_c_, out_c_, k_, stride_, pad_;
  Parameter<T> weight_;
  bool has_bias_;
  Parameter<T> bias_;
  Tensor<T> x_;
  int oh_ = 0, ow_ = 0;
};

// ---------------------------------------------------------------------------
// BatchNorm2d.
//
// Three behaviors:
//   train mode: normalize by batch statistics (biased variance), update
//     running statistics.
//   eval mode: normalize by running statistics; running stats untouched.
//   eval mode + capture: additionally compute this batch's per-channel
//     mean/variance from the pre-normalization input and keep them readable.
//     The statistics stay read-only for the layer itself; a loss that
//     consumes them injects its gradient via set_stat_grads, and backward
//     routes it to the input through d(mean)/dx and d(var)/dx.
// ---------------------------------------------------------------------------
template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(int channels, bool affine = true, T momentum = T(0.1), T eps = T(1e-5))
      : c_(channels),
        affine_(affine),
        momentum_(momentum),
        eps_(eps),
        gamma_({channels}),
        beta_({channels}),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)),
        captured_mean_({channels}, T(0)),
        captured_var_({channels}, T(0)) {
    gamma_.value.fill(T(1));
  }

  void set_capture(bool on) { capture_ = on; }
  const Tensor<T>& captured_mean() const { return captured_mean_; }
  const Tensor<T>& captured_var() const { return captured_var_; }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }
  Tensor<T>& mutable_running_mean() { return running_mean_; }
  Tensor<T>& mutable_running_var() { return running_var_; }
  int channels() const { return c_; }

  // dL/d(captured mean), dL/d(captured variance); consumed by the next backward.
  void set_stat_grads(std::vector<T> gmean, std::vector<T> gvar) {
    if (static_cast<int>(gmean.size()) != c_ || static_cast<int>(gvar.size()) != c_)
      throw ShapeError("BatchNorm2d: stat grad size mismatch");
    stat_gmean_ = std::move(gmean);
    stat_gvar_ = std::move(gvar);
    has_stat_grads_ = true;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4 || x.dim(1) != c_) throw ShapeError("BatchNorm2d: bad input " + x.shape_str());
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    cnt_ = static_cast<int64_t>(b) * h * w;
    Tensor<T> y(x.shape);
    xhat_ = Tensor<T>(x.shape);
    inv_std_.assign(c_, T(0));

    if (this->mode_ == Mode::train) {
      compute_batch_stats(x, batch_mean_, batch_var_);
      for (int c = 0; c < c_; ++c) {
        inv_std_[c] = T(1) / std::sqrt(batch_var_[c] + eps_);
        running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * batch_mean_[c];
        running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * batch_var_[c];
      }
      normalize(x, batch_mean_, y);
    } else {
      if (capture_) {
        compute_batch_stats(x, captured_mean_.data, captured_var_.data);
        x_ = x;  // needed for the injected d(var)/dx term
      }
      for (int c = 0; c < c_; ++c) inv_std_[c] = T(1) / std::sqrt(running_var_[c] + eps_);
      normalize(x, running_mean_.data, y);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int b = gy.dim(0), h = gy.dim(2), w = gy.dim(3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    Tensor<T> gx(gy.shape);
    for (int c = 0; c < c_; ++c) {
      double sum_gy = 0, sum_gy_xhat = 0;
      for (int i = 0; i < b; ++i) {
        const T* g = gy.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        const T* xh = xhat_.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          sum_gy += static_cast<double>(g[j]);
          sum_gy_xhat += static_cast<double>(g[j]) * xh[j];
        }
      }
      if (affine_ && !this->frozen_) {
        gamma_.grad[c] += static_cast<T>(sum_gy_xhat);
        beta_.grad[c] += static_cast<T>(sum_gy);
      }
      const T g_scale = affine_ ? gamma_.value[c] : T(1);
      if (this->mode_ == Mode::train) {
        const T a = g_scale * inv_std_[c];
        const T mg = static_cast<T>(sum_gy / static_cast<double>(cnt_));
        const T mgx = static_cast<T>(sum_gy_xhat / static_cast<double>(cnt_));
        for (int i = 0; i < b; ++i) {
          const T* g = gy.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
          const T* xh = xhat_.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
          T* o = gx.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
          for (int64_t j = 0; j < plane; ++j) o[j] = a * (g[j] - mg - xh[j] * mgx);
        }
      } else {
        const T a = g_scale * inv_std_[c];
        for (int i = 0; i < b; ++i) {
          const T* g = gy.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
          T* o = gx.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
          for (int64_t j = 0; j < plane; ++j) o[j] = a * g[j];
        }
        if (has_stat_grads_) {
          const T gm = stat_gmean_[c] / static_cast<T>(cnt_);
          const T gv2 = stat_gvar_[c] * T(2) / static_cast<T>(cnt_);
          const T mu = captured_mean_[c];
          for (int i = 0; i < b; ++i) {
            const T* xp = x_.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
            T* o = gx.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
            for (int64_t j = 0; j < plane; ++j) o[j] += gm + gv2 * (xp[j] - mu);
          }
        }
      }
    }
    has_stat_grads_ = false;
    return gx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    if (affine_) {
      out.push_back(&gamma_);
      out.push_back(&beta_);
    }
  }
  void collect_buffers(std::vector<Tensor<T>*>& out) override {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  void compute_batch_stats(const Tensor<T>& x, std::vector<T>& mean, std::vector<T>& var) const {
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    mean.assign(c_, T(0));
    var.assign(c_, T(0));
    for (int c = 0; c < c_; ++c) {
      double s = 0;
      for (int i = 0; i < b; ++i) {
        const T* p = x.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j) s += static_cast<double>(p[j]);
      }
      const double mu = s / static_cast<double>(cnt_);
      double v = 0;
      for (int i = 0; i < b; ++i) {
        const T* p = x.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          const double d = static_cast<double>(p[j]) - mu;
          v += d * d;
        }
      }
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(v / static_cast<double>(cnt_));  // biased, matches the normalizer
    }
  }

  void compute_batch_stats(const Tensor<T>& x, Tensor<T>& mean, Tensor<T>& var) const {
    compute_batch_stats(x, mean.data, var.data);
  }

  void normalize(const Tensor<T>& x, const std::vector<T>& mean, Tensor<T>& y) {
    const int b = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int c = 0; c < c_; ++c) {
      const T mu = mean[c], is = inv_std_[c];
      const T g = affine_ ? gamma_.value[c] : T(1);
      const T bta = affine_ ? beta_.value[c] : T(0);
      for (int i = 0; i < b; ++i) {
        const T* p = x.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        T* xh = xhat_.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        T* o = y.ptr() + (static_cast<int64_t>(i) * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          xh[j] = (p[j] - mu) * is;
          o[j] = g * xh[j] + bta;
        }
      }
    }
  }

  int c_;
  bool affine_;
  T momentum_, eps_;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> captured_mean_, captured_var_;
  bool capture_ = false;

  Tensor<T> x_, xhat_;
  std::vector<T> inv_std_, batch_mean_, batch_var_;
  std::vector<T> stat_gmean_, stat_gvar_;
  bool has_stat_grads_ = false;
  int64_t cnt_ = 0;
};

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, x is (B, in).
// ---------------------------------------------------------------------------
template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int in, int out, bool bias = true)
      : in_(in), out_(out), weight_({out, in}), has_bias_(bias), bias_(bias ? std::vector<int>{out} : std::vector<int>{0}) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 2 || x.dim(1) != in_) throw ShapeError("Linear: bad input " + x.shape_str());
    x_ = x;
    const int b = x.dim(0);
    Tensor<T> y({b, out_});
    CMapRM<T> xm(x.ptr(), b, in_), wm(weight_.value.ptr(), out_, in_);
    MapRM<T> ym(y.ptr(), b, out_);
    ym.noalias() = xm * wm.transpose();
    if (has_bias_)
      for (int i = 0; i < b; ++i)
        for (int c = 0; c < out_; ++c) y.at2(i, c) += bias_.value[c];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int b = x_.dim(0);
    CMapRM<T> gym(gy.ptr(), b, out_), xm(x_.ptr(), b, in_), wm(weight_.value.ptr(), out_, in_);
    if (!this->frozen_) {
      MapRM<T> gwm(weight_.grad.ptr(), out_, in_);
      gwm.noalias() += gym.transpose() * xm;
      if (has_bias_)
        for (int i = 0; i < b; ++i)
          for (int c = 0; c < out_; ++c) bias_.grad[c] += gy.at2(i, c);
    }
    Tensor<T> gx({b, in_});
    MapRM<T> gxm(gx.ptr(), b, in_);
    gxm.noalias() = gym * wm;
    return gx;
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  int fan_in() const { return in_; }

 private:
  int in_, out_;
  Parameter<T> weight_;
  bool has_bias_;
  Parameter<T> bias_;
  Tensor<T> x_;
};

template <typename T>
class ReLU : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = x;
    for (auto& v : y_.data) v = v > T(0) ? v : T(0);
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (int64_t i = 0; i < gy.numel(); ++i) gx[i] = y_[i] > T(0) ? gy[i] : T(0);
    return gx;
  }

 private:
  Tensor<T> y_;
};

template <typename T>
class LeakyReLU : public Module<T> {
 public:
  explicit LeakyReLU(T slope = T(0.2)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x) override {
    x_ = x;
    Tensor<T> y(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : slope_ * x[i];
    return y;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (int64_t i = 0; i < gy.numel(); ++i) gx[i] = x_[i] > T(0) ? gy[i] : slope_ * gy[i];
    return gx;
  }

 private:
  T slope_;
  Tensor<T> x_;
};

template <typename T>
class Tanh : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    y_ = Tensor<T>(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) y_[i] = std::tanh(x[i]);
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(gy.shape);
    for (int64_t i = 0; i < gy.numel(); ++i) gx[i] = gy[i] * (T(1) - y_[i] * y_[i]);
    return gx;
  }

 private:
  Tensor<T> y_;
};

template <typename T>
class MaxPool2x2 : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4 || x.dim(2) % 2 || x.dim(3) % 2) throw ShapeError("MaxPool2x2: bad input " + x.shape_str());
    in_shape_ = x.shape;
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({b, c, h / 2, w / 2});
    argmax_.resize(static_cast<size_t>(y.numel()));
    int64_t o = 0;
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
        for (int py = 0; py < h / 2; ++py)
          for (int px = 0; px < w / 2; ++px, ++o) {
            int64_t base = static_cast<int64_t>(2 * py) * w + 2 * px;
            int64_t best = base;
            T bv = plane[base];
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                int64_t idx = base + static_cast<int64_t>(dy) * w + dx;
                if (plane[idx] > bv) {
                  bv = plane[idx];
                  best = idx;
                }
              }
            y[o] = bv;
            argmax_[static_cast<size_t>(o)] = (static_cast<int64_t>(i) * c + ch) * h * w + best;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_, T(0));
    for (int64_t o = 0; o < gy.numel(); ++o) gx[argmax_[static_cast<size_t>(o)]] += gy[o];
    return gx;
  }

 private:
  std::vector<int64_t> argmax_;
  std::vector<int> in_shape_;
};

// Nearest-neighbour 2x upsampling.
template <typename T>
class Upsample2x : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4) throw ShapeError("Upsample2x: expected NCHW");
    in_shape_ = x.shape;
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> y({b, c, 2 * h, 2 * w});
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* src = x.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
        T* dst = y.ptr() + (static_cast<int64_t>(i) * c + ch) * 4 * h * w;
        for (int yy = 0; yy < 2 * h; ++yy)
          for (int xx = 0; xx < 2 * w; ++xx) dst[static_cast<int64_t>(yy) * 2 * w + xx] = src[static_cast<int64_t>(yy / 2) * w + xx / 2];
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_, T(0));
    const int b = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T* dst = gx.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
        const T* src = gy.ptr() + (static_cast<int64_t>(i) * c + ch) * 4 * h * w;
        for (int yy = 0; yy < 2 * h; ++yy)
          for (int xx = 0; xx < 2 * w; ++xx) dst[static_cast<int64_t>(yy / 2) * w + xx / 2] += src[static_cast<int64_t>(yy) * 2 * w + xx];
      }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

// Nearest-neighbour resize to a fixed target; identity when shapes match.
template <typename T>
class ResizeNearest : public Module<T> {
 public:
  ResizeNearest(int th, int tw) : th_(th), tw_(tw) {}

  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4) throw ShapeError("ResizeNearest: expected NCHW");
    in_shape_ = x.shape;
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h == th_ && w == tw_) return x;
    Tensor<T> y({b, c, th_, tw_});
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* src = x.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
        T* dst = y.ptr() + (static_cast<int64_t>(i) * c + ch) * th_ * tw_;
        for (int yy = 0; yy < th_; ++yy)
          for (int xx = 0; xx < tw_; ++xx)
            dst[static_cast<int64_t>(yy) * tw_ + xx] = src[static_cast<int64_t>(yy * h / th_) * w + xx * w / tw_];
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    const int b = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    if (h == th_ && w == tw_) return gy;
    Tensor<T> gx(in_shape_, T(0));
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        T* dst = gx.ptr() + (static_cast<int64_t>(i) * c + ch) * h * w;
        const T* src = gy.ptr() + (static_cast<int64_t>(i) * c + ch) * th_ * tw_;
        for (int yy = 0; yy < th_; ++yy)
          for (int xx = 0; xx < tw_; ++xx)
            dst[static_cast<int64_t>(yy * h / th_) * w + xx * w / tw_] += src[static_cast<int64_t>(yy) * tw_ + xx];
      }
    return gx;
  }

 private:
  int th_, tw_;
  std::vector<int> in_shape_;
};

// NCHW -> (B, C) mean over the spatial plane.
template <typename T>
class GlobalAvgPool : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) override {
    if (x.ndim() != 4) throw ShapeError("GlobalAvgPool: expected NCHW");
    in_shape_ = x.shape;
    const int b = x.dim(0), c = x.dim(1);
    const int64_t plane = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({b, c});
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* p = x.ptr() + (static_cast<int64_t>(i) * c + ch) * plane;
        double s = 0;
        for (int64_t j = 0; j < plane; ++j) s += static_cast<double>(p[j]);
        y.at2(i, ch) = static_cast<T>(s / static_cast<double>(plane));
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> gx(in_shape_);
    const int b = in_shape_[0], c = in_shape_[1];
    const int64_t plane = static_cast<int64_t>(in_shape_[2]) * in_shape_[3];
    for (int i = 0; i < b; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T g = gy.at2(i, ch) / static_cast<T>(plane);
        T* p = gx.ptr() + (static_cast<int64_t>(i) * c + ch) * plane;
        for (int64_t j = 0; j < plane; ++j) p[j] = g;
      }
    return gx;
  }

 private:
  std::vector<int> in_shape_;
};

template <typename T>
class Sequential : public Module<T> {
 public:
  Sequential() = default;

  template <typename M, typename... Args>
  M* emplace(Args&&... args) {
    auto mod = std::make_unique<M>(std::forward<Args>(args)...);
    M* raw = mod.get();
    modules_.push_back(std::move(mod));
    return raw;
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = x;
    for (auto& m : modules_) h = m->forward(h);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = gy;
    for (auto it = modules_.rbegin(); it != modules_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect_params(std::vector<Parameter<T>*>& out) override {
    for (auto& m : modules_) m->collect_params(out);
  }
  void collect_buffers(std::vector<Tensor<T>*>& out) override {
    for (auto& m : modules_) m->collect_buffers(out);
  }
  void set_mode(Mode m) override {
    this->mode_ = m;
    for (auto& mod : modules_) mod->set_mode(m);
  }
  void set_frozen_all(bool f) {
    this->set_frozen(f);
    for (auto& m : modules_) m->set_frozen(f);
  }
  size_t size() const { return modules_.size(); }
  Module<T>* at(size_t i) { return modules_[i].get(); }

 private:
  std::vector<std::unique_ptr<Module<T>>> modules_;
};

// ---------------------------------------------------------------------------
// Initialization and bookkeeping helpers.
// ---------------------------------------------------------------------------

template <typename T>
void he_normal_init(Parameter<T>& p, int fan_in, RngStream& rng) {
  const T stddev = std::sqrt(T(2) / static_cast<T>(fan_in));
  rng.fill_normal(p.value, T(0), stddev);
}

template <typename T>
void zero_init(Parameter<T>& p) {
  p.value.fill(T(0));
}

// Order-stable content hash of parameter values; buffers optionally included.
// Used by the stage-isolation checks to prove what an update touched.
template <typename T>
uint64_t state_hash(Module<T>& m, bool include_buffers = true) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (auto* p : m.params()) h = fnv1a64(p->value.ptr(), p->value.data.size() * sizeof(T), h);
  if (include_buffers)
    for (auto* b : m.buffers()) h = fnv1a64(b->ptr(), b->data.size() * sizeof(T), h);
  return h;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const auto& v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace dfkd
