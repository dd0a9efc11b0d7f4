#pragma once

#include <utility>
#include <vector>

#include "dfkd/rng.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

// Rotation index m in [0, M). The angle is m * (360 / M) degrees; the default
// M = 4 gives the right-angle pretext task {0, 90, 180, 270}.
struct RotationId {
  int m = 0;
  int num_rotations = 4;  // M

  RotationId() = default;
  RotationId(int m_, int M_) : m(m_), num_rotations(M_) {
    if (M_ < 2) throw ValueError("RotationId: M must be >= 2");
    if (m_ < 0 || m_ >= M_) throw ValueError("RotationId: m out of range");
  }
  double angle_degrees() const { return m * (360.0 / num_rotations); }
  RotationId compose(const RotationId& o) const {
    if (o.num_rotations != num_rotations) throw ValueError("RotationId: mismatched M");
    return RotationId((m + o.m) % num_rotations, num_rotations);
  }
};

// Joint class-and-rotation label for the augmented task: k = n*M + m.
struct AugmentedLabel {
  int k = 0;
  int n = 0;
  int m = 0;

  static AugmentedLabel encode(int n, int m, int M) {
    if (M < 2) throw ValueError("AugmentedLabel: M must be >= 2");
    if (n < 0) throw ValueError("AugmentedLabel: class out of range");
    if (m < 0 || m >= M) throw ValueError("AugmentedLabel: rotation out of range");
    return AugmentedLabel{n * M + m, n, m};
  }
  static AugmentedLabel decode(int k, int M) {
    if (M < 2) throw ValueError("AugmentedLabel: M must be >= 2");
    if (k < 0) throw ValueError("AugmentedLabel: k out of range");
    return AugmentedLabel{k, k / M, k % M};
  }
};

inline int augmented_label(int n, int m, int M) { return AugmentedLabel::encode(n, m, M).k; }

namespace detail {

// Quarter-turn pixel permutation: one turn maps source (i, j) to (j, H-1-i).
template <typename T>
inline void rotate_image_quarter_turns(const T* src, T* dst, int channels, int h, int w, int turns) {
  turns &= 3;
  for (int c = 0; c < channels; ++c) {
    const T* s = src + static_cast<int64_t>(c) * h * w;
    T* d = dst + static_cast<int64_t>(c) * h * w;
    switch (turns) {
      case 0:
        std::copy(s, s + static_cast<int64_t>(h) * w, d);
        break;
      case 1:
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) d[static_cast<int64_t>(j) * h + (h - 1 - i)] = s[static_cast<int64_t>(i) * w + j];
        break;
      case 2:
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            d[static_cast<int64_t>(h - 1 - i) * w + (w - 1 - j)] = s[static_cast<int64_t>(i) * w + j];
        break;
      case 3:
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) d[static_cast<int64_t>(w - 1 - j) * h + i] = s[static_cast<int64_t>(i) * w + j];
        break;
    }
  }
}

inline int quarter_turns_for(const RotationId& rot) {
  if (4 % rot.num_rotations != 0)
    throw ValueError("rotate: M must divide 4 for pixel-exact rotation (got M=" +
                     std::to_string(rot.num_rotations) + ")");
  return rot.m * (4 / rot.num_rotations);
}

}  // namespace detail

// Pixel-exact rotation of an NCHW batch, every image by the same angle.
// No interpolation; odd quarter turns require square images.
template <typename T>
Tensor<T> rotate(const Tensor<T>& batch, const RotationId& rot) {
  if (batch.ndim() != 4) throw ShapeError("rotate: expected NCHW batch");
  const int b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const int turns = detail::quarter_turns_for(rot);
  if ((turns & 1) && h != w)
    throw ShapeError("rotate: odd quarter turns need square images (got " + batch.shape_str() + ")");
  Tensor<T> out(batch.shape);
  const int64_t stride = static_cast<int64_t>(c) * h * w;
  for (int i = 0; i < b; ++i)
    detail::rotate_image_quarter_turns(batch.ptr() + i * stride, out.ptr() + i * stride, c, h, w, turns);
  return out;
}

// Per-image rotation; rotations[i] gives image i's quarter-turn index in [0, M).
template <typename T>
Tensor<T> rotate_each(const Tensor<T>& batch, const std::vector<int>& rotations, int M) {
  if (batch.ndim() != 4) throw ShapeError("rotate_each: expected NCHW batch");
  if (static_cast<int>(rotations.size()) != batch.dim(0))
    throw ShapeError("rotate_each: rotations length != batch size");
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor<T> out(batch.shape);
  const int64_t stride = static_cast<int64_t>(c) * h * w;
  for (int i = 0; i < batch.dim(0); ++i) {
    const int turns = detail::quarter_turns_for(RotationId(rotations[i], M));
    if ((turns & 1) && h != w) throw ShapeError("rotate_each: odd quarter turns need square images");
    detail::rotate_image_quarter_turns(batch.ptr() + i * stride, out.ptr() + i * stride, c, h, w, turns);
  }
  return out;
}

// Gradient of rotate_each: rotating the upstream gradient back (rotation is a
// permutation, so the adjoint is the inverse rotation).
template <typename T>
Tensor<T> rotate_each_grad(const Tensor<T>& grad, const std::vector<int>& rotations, int M) {
  std::vector<int> inverse(rotations.size());
  for (size_t i = 0; i < rotations.size(); ++i) inverse[i] = (M - rotations[i]) % M;
  return rotate_each(grad, inverse, M);
}

enum class RotationPolicy { all_rotations, random_rotation };

template <typename T>
struct AugmentedBatch {
  Tensor<T> images;             // (B', C, H, W); B' = M*B or B depending on policy
  std::vector<int> labels_k;    // augmented labels, k = n*M + m
  std::vector<int> rotations;   // m per output image
};

// Expands a labeled batch for the self-supervised augmented task.
//   all_rotations:   every image under every rotation, M*B outputs.
//   random_rotation: one uniformly sampled rotation per image, B outputs.
template <typename T>
AugmentedBatch<T> make_augmented_batch(const Tensor<T>& batch, const std::vector<int>& labels, int M,
                                       RotationPolicy policy, RngStream* rng = nullptr) {
  if (batch.ndim() != 4) throw ShapeError("make_augmented_batch: expected NCHW batch");
  const int b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (static_cast<int>(labels.size()) != b) throw ShapeError("make_augmented_batch: labels length != batch size");

  AugmentedBatch<T> out;
  const int64_t stride = static_cast<int64_t>(c) * h * w;
  if (policy == RotationPolicy::all_rotations) {
    out.images = Tensor<T>({M * b, c, h, w});
    out.labels_k.resize(static_cast<size_t>(M) * b);
    out.rotations.resize(static_cast<size_t>(M) * b);
    for (int m = 0; m < M; ++m) {
      const int turns = detail::quarter_turns_for(RotationId(m, M));
      if ((turns & 1) && h != w) throw ShapeError("make_augmented_batch: odd quarter turns need square images");
      for (int i = 0; i < b; ++i) {
        const int o = m * b + i;
        detail::rotate_image_quarter_turns(batch.ptr() + i * stride, out.images.ptr() + o * stride, c, h, w, turns);
        out.labels_k[o] = augmented_label(labels[i], m, M);
        out.rotations[o] = m;
      }
    }
  } else {
    if (rng == nullptr) throw ValueError("make_augmented_batch: random_rotation needs an rng stream");
    out.rotations.resize(b);
    for (int i = 0; i < b; ++i) out.rotations[i] = static_cast<int>(rng->next_below(M));
    out.images = rotate_each(batch, out.rotations, M);
    out.labels_k.resize(b);
    for (int i = 0; i < b; ++i) out.labels_k[i] = augmented_label(labels[i], out.rotations[i], M);
  }
  return out;
}

}  // namespace dfkd
