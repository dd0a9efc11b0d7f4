#pragma once

// Shared helpers for the test suites: finite-difference gradient checking and
// probe-scale model builders. The finite-difference oracle is deliberately
// independent of the library's backward passes: it only calls forward-path
// code through a user-supplied closure.

#include <cmath>
#include <functional>
#include <vector>

#include "dfkd/losses.hpp"
#include "dfkd/models.hpp"

namespace dfkd_test {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int worst_index = -1;
  double analytic_at_worst = 0.0;
  double fd_at_worst = 0.0;
  int checked = 0;
};

// Central finite differences over the coordinates of `x`, compared against
// `analytic`. rel = |fd - g| / max(|fd|, |g|); coordinates where both are
// below `dead_zone` are skipped as numerically silent.
template <typename T>
GradCheckReport check_gradient(std::function<double()> loss, T* x, const T* analytic, int64_t count,
                               double h_scale = 0, double dead_zone = 1e-12) {
  const double eps = std::numeric_limits<T>::epsilon();
  const double h_base = h_scale > 0 ? h_scale : std::cbrt(eps);
  GradCheckReport rep;
  for (int64_t i = 0; i < count; ++i) {
    const T x0 = x[i];
    const double h = h_base * std::max(1.0, std::abs(static_cast<double>(x0)));
    x[i] = x0 + static_cast<T>(h);
    const double fp = loss();
    x[i] = x0 - static_cast<T>(h);
    const double fm = loss();
    x[i] = x0;
    const double fd = (fp - fm) / (2 * h);
    const double g = static_cast<double>(analytic[i]);
    if (std::abs(fd) < dead_zone && std::abs(g) < dead_zone) continue;
    const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), dead_zone});
    ++rep.checked;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = static_cast<int>(i);
      rep.analytic_at_worst = g;
      rep.fd_at_worst = fd;
    }
  }
  return rep;
}

// Probe-scale bundle: every network well under 1e3 parameters, 8x8 images.
template <typename T>
dfkd::ArchitectureConfig probe_config(int n_classes = 3, bool rotation_only = false) {
  dfkd::ArchitectureConfig cfg;
  cfg.teacher_arch = "tinycnn-p";
  cfg.student_arch = "tinycnn-p";
  cfg.height = 8;
  cfg.width = 8;
  cfg.channels = 1;
  cfg.num_classes = n_classes;
  cfg.num_rotations = 4;
  cfg.aux_depth = 2;
  cfg.aux_rotation_only = rotation_only;
  cfg.noise_dim = 8;
  cfg.generator_widths = {6, 5, 4};
  return cfg;
}

// Puts some signal into the teacher's running statistics so that the BN
// statistics loss has a non-trivial target.
template <typename T>
void randomize_running_stats(dfkd::TinyCnn<T>& net, dfkd::RngStream& rng) {
  for (auto* bn : net.bn_layers()) {
    for (auto& v : bn->mutable_running_mean().data) v = static_cast<T>(0.3 * rng.next_normal());
    for (auto& v : bn->mutable_running_var().data) v = static_cast<T>(1.0 + 0.5 * rng.next_uniform());
  }
}

template <typename T>
dfkd::Tensor<T> random_tensor(std::vector<int> shape, dfkd::RngStream& rng, T scale = T(1)) {
  dfkd::Tensor<T> t(std::move(shape));
  rng.fill_normal(t, T(0), scale);
  return t;
}

inline std::vector<int> random_labels(int count, int n, dfkd::RngStream& rng) {
  std::vector<int> v(static_cast<size_t>(count));
  for (auto& x : v) x = static_cast<int>(rng.next_below(n));
  return v;
}

}  // namespace dfkd_test
