#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dfkd/models.hpp"
#include "dfkd/selfsup.hpp"

namespace dfkd {

template <typename T>
struct Temperature {
  T tau;
  explicit Temperature(T t = T(20)) : tau(t) {
    if (!(t > T(0))) throw ValueError("Temperature: tau must be positive");
  }
};

template <typename T>
struct LossWeights {
  T alpha = T(10);  // synthesis adversarial weight
  T beta = T(30);   // feature-loss weight
  void validate() const {
    if (alpha < T(0) || beta < T(0)) throw ValueError("LossWeights: weights must be non-negative");
  }
};

template <typename T>
struct ScalarWithGrad {
  T value = T(0);
  Tensor<T> grad;  // d(value)/d(first argument); empty unless requested
};

namespace detail {

template <typename T>
void log_softmax_rows(const Tensor<T>& logits, Tensor<T>& out) {
  const int b = logits.dim(0), n = logits.dim(1);
  out = Tensor<T>(logits.shape);
  for (int i = 0; i < b; ++i) {
    const T* row = logits.ptr() + static_cast<int64_t>(i) * n;
    T* o = out.ptr() + static_cast<int64_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double lse = 0;
    for (int j = 0; j < n; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
    const T log_z = mx + static_cast<T>(std::log(lse));
    for (int j = 0; j < n; ++j) o[j] = row[j] - log_z;
  }
}

template <typename T>
void check_labels(const std::vector<int>& labels, int n, const char* where) {
  for (int y : labels)
    if (y < 0 || y >= n) throw ValueError(std::string(where) + ": label " + std::to_string(y) + " out of [0," + std::to_string(n) + ")");
}

}  // namespace detail

// Mean cross entropy of softmax(logits) against integer labels.
template <typename T>
ScalarWithGrad<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, bool with_grad = false) {
  if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be (B, N)");
  const int b = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(labels.size()) != b) throw ShapeError("cross_entropy: labels length != batch");
  detail::check_labels(labels, n, "cross_entropy");

  Tensor<T> logp;
  detail::log_softmax_rows(logits, logp);
  double sum = 0;
  for (int i = 0; i < b; ++i) sum -= static_cast<double>(logp.at2(i, labels[static_cast<size_t>(i)]));
  ScalarWithGrad<T> out;
  out.value = static_cast<T>(sum / b);
  if (with_grad) {
    out.grad = Tensor<T>(logits.shape);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < n; ++j) {
        const T p = std::exp(logp.at2(i, j));
        out.grad.at2(i, j) = (p - (labels[static_cast<size_t>(i)] == j ? T(1) : T(0))) / static_cast<T>(b);
      }
  }
  return out;
}

// Teacher one-hot fit on synthetic data: CrossEntropy(ỹ, T(x̃)).
template <typename T>
ScalarWithGrad<T> loss_cls(const Tensor<T>& teacher_logits, const std::vector<int>& labels, bool with_grad = false) {
  return cross_entropy(teacher_logits, labels, with_grad);
}

// Augmented-task fit: CrossEntropy(k, c(Φ(trans(x̃)))).
template <typename T>
ScalarWithGrad<T> loss_csd(const Tensor<T>& aux_logits, const std::vector<int>& labels_k, bool with_grad = false) {
  return cross_entropy(aux_logits, labels_k, with_grad);
}

// Rotation-only ablation head: CrossEntropy(m, c(Φ(trans(x̃)))), K = M.
template <typename T>
ScalarWithGrad<T> loss_rotation_baseline(const Tensor<T>& aux_logits, const std::vector<int>& labels_m,
                                         bool with_grad = false) {
  return cross_entropy(aux_logits, labels_m, with_grad);
}

// ---------------------------------------------------------------------------
// Batch-normalization statistics loss:
//   sum over layers of ||mu_batch - mu_run||_2 + ||var_batch - var_run||_2,
// Euclidean norms over channels, batch variance biased.
// ---------------------------------------------------------------------------
template <typename T>
struct BnStatPair {
  std::vector<T> batch_mean, batch_var;      // from the current forward pass
  std::vector<T> running_mean, running_var;  // the teacher's stored statistics
};

template <typename T>
struct BnsLossResult {
  T value = T(0);
  std::vector<std::vector<T>> grad_mean, grad_var;  // d(value)/d(batch stats), per layer
};

template <typename T>
BnsLossResult<T> loss_bns(const std::vector<BnStatPair<T>>& layers, bool with_grad = false) {
  BnsLossResult<T> out;
  for (const auto& l : layers) {
    if (l.batch_mean.size() != l.running_mean.size() || l.batch_var.size() != l.running_var.size() ||
        l.batch_mean.size() != l.batch_var.size())
      throw ShapeError("loss_bns: layer channel-count mismatch");
    const size_t c = l.batch_mean.size();
    double nm2 = 0, nv2 = 0;
    for (size_t i = 0; i < c; ++i) {
      const double dm = static_cast<double>(l.batch_mean[i]) - static_cast<double>(l.running_mean[i]);
      const double dv = static_cast<double>(l.batch_var[i]) - static_cast<double>(l.running_var[i]);
      nm2 += dm * dm;
      nv2 += dv * dv;
    }
    const double nm = std::sqrt(nm2), nv = std::sqrt(nv2);
    out.value += static_cast<T>(nm + nv);
    if (with_grad) {
      std::vector<T> gm(c, T(0)), gv(c, T(0));
      for (size_t i = 0; i < c; ++i) {
        if (nm > 0) gm[i] = static_cast<T>((static_cast<double>(l.batch_mean[i]) - l.running_mean[i]) / nm);
        if (nv > 0) gv[i] = static_cast<T>((static_cast<double>(l.batch_var[i]) - l.running_var[i]) / nv);
      }
      out.grad_mean.push_back(std::move(gm));
      out.grad_var.push_back(std::move(gv));
    }
  }
  return out;
}

// Reads (batch, running) statistic pairs off a network after a capture-mode
// forward pass.
template <typename T>
std::vector<BnStatPair<T>> collect_bn_stats(TinyCnn<T>& net) {
  std::vector<BnStatPair<T>> out;
  for (auto* bn : net.bn_layers()) {
    BnStatPair<T> p;
    p.batch_mean = bn->captured_mean().data;
    p.batch_var = bn->captured_var().data;
    p.running_mean = bn->running_mean().data;
    p.running_var = bn->running_var().data;
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
void inject_bn_stat_grads(TinyCnn<T>& net, const BnsLossResult<T>& g, T scale) {
  auto bns = net.bn_layers();
  for (size_t i = 0; i < bns.size(); ++i) {
    std::vector<T> gm = g.grad_mean[i], gv = g.grad_var[i];
    for (auto& v : gm) v *= scale;
    for (auto& v : gv) v *= scale;
    bns[i]->set_stat_grads(std::move(gm), std::move(gv));
  }
}

// ---------------------------------------------------------------------------
// Distillation KL: KL(softmax(t/tau) || softmax(s/tau)), batch mean.
// square_tau multiplies by tau^2 to keep gradient magnitudes comparable with
// the cross-entropy term; disable to get the bare KL.
// ---------------------------------------------------------------------------
template <typename T>
struct KdLossResult {
  T value = T(0);
  Tensor<T> grad_teacher, grad_student;
};

template <typename T>
KdLossResult<T> loss_kd(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, Temperature<T> temp,
                        bool square_tau = true, bool with_grad = false) {
  check_same_shape(teacher_logits, student_logits, "loss_kd");
  const int b = teacher_logits.dim(0), n = teacher_logits.dim(1);
  const T tau = temp.tau;
  Tensor<T> t_scaled(teacher_logits.shape), s_scaled(student_logits.shape);
  for (int64_t i = 0; i < t_scaled.numel(); ++i) {
    t_scaled[i] = teacher_logits[i] / tau;
    s_scaled[i] = student_logits[i] / tau;
  }
  Tensor<T> logp, logq;
  detail::log_softmax_rows(t_scaled, logp);
  detail::log_softmax_rows(s_scaled, logq);

  const T scale = square_tau ? tau * tau : T(1);
  KdLossResult<T> out;
  if (with_grad) {
    out.grad_teacher = Tensor<T>(teacher_logits.shape);
    out.grad_student = Tensor<T>(student_logits.shape);
  }
  double total = 0;
  for (int i = 0; i < b; ++i) {
    double row_kl = 0;
    for (int j = 0; j < n; ++j) {
      const double p = std::exp(static_cast<double>(logp.at2(i, j)));
      row_kl += p * (static_cast<double>(logp.at2(i, j)) - static_cast<double>(logq.at2(i, j)));
    }
    total += row_kl;
    if (with_grad) {
      for (int j = 0; j < n; ++j) {
        const T p = std::exp(logp.at2(i, j));
        const T q = std::exp(logq.at2(i, j));
        const T r = logp.at2(i, j) - logq.at2(i, j);
        out.grad_student.at2(i, j) = scale * (q - p) / (tau * static_cast<T>(b));
        out.grad_teacher.at2(i, j) = scale * p * (r - static_cast<T>(row_kl)) / (tau * static_cast<T>(b));
      }
    }
  }
  out.value = scale * static_cast<T>(total / b);
  return out;
}

// Traditional adversarial objective: identical computation to loss_kd, used
// with a negative sign during synthesis.
template <typename T>
KdLossResult<T> loss_adv_baseline(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                                  Temperature<T> temp, bool square_tau = true, bool with_grad = false) {
  return loss_kd(teacher_logits, student_logits, temp, square_tau, with_grad);
}

// Mean-square error between aligned feature maps. grad is w.r.t. the second
// (projected student) argument.
template <typename T>
ScalarWithGrad<T> loss_fea(const Tensor<T>& teacher_map, const Tensor<T>& projected_student_map,
                           bool with_grad = false) {
  check_same_shape(teacher_map, projected_student_map, "loss_fea");
  const int64_t e = teacher_map.numel();
  double sum = 0;
  ScalarWithGrad<T> out;
  if (with_grad) out.grad = Tensor<T>(projected_student_map.shape);
  for (int64_t i = 0; i < e; ++i) {
    const double d = static_cast<double>(projected_student_map[i]) - static_cast<double>(teacher_map[i]);
    sum += d * d;
    if (with_grad) out.grad[i] = static_cast<T>(2.0 * d / static_cast<double>(e));
  }
  out.value = static_cast<T>(sum / static_cast<double>(e));
  return out;
}

// ---------------------------------------------------------------------------
// Composite objectives.
// ---------------------------------------------------------------------------

enum class SynthVariant { csd, adv, rotation, baseline };

inline std::string to_string(SynthVariant v) {
  switch (v) {
    case SynthVariant::csd: return "csd";
    case SynthVariant::adv: return "adv";
    case SynthVariant::rotation: return "rotation";
    case SynthVariant::baseline: return "baseline";
  }
  return "?";
}

inline SynthVariant synth_variant_from_string(const std::string& s) {
  if (s == "csd") return SynthVariant::csd;
  if (s == "adv") return SynthVariant::adv;
  if (s == "rotation") return SynthVariant::rotation;
  if (s == "baseline") return SynthVariant::baseline;
  throw ValueError("unknown synthesis variant: " + s);
}

template <typename T>
struct SynthesisLossTerms {
  T total = T(0);
  T l_cls = T(0);
  T l_bns = T(0);
  T l_aux = T(0);  // the variant's adversarial term (csd / adv / rotation); 0 for baseline
};

// Stage-1 objective on an already-generated batch x̃:
//   L = L_cls + L_bns - alpha * L_variant.
// The caller is responsible for modes: teacher eval+frozen, student/aux
// eval+frozen. When grad_x is non-null the gradient w.r.t. x̃ is accumulated
// into it (the tensor is reset first).
template <typename T>
SynthesisLossTerms<T> synthesis_objective(ModelBundle<T>& b, const Tensor<T>& x, const std::vector<int>& labels,
                                          const std::vector<int>& rotations, SynthVariant variant, T alpha,
                                          Temperature<T> temp, bool square_tau, Tensor<T>* grad_x) {
  const bool with_grad = grad_x != nullptr;
  const int M = b.config.num_rotations;
  SynthesisLossTerms<T> terms;

  b.teacher->set_capture(true);
  const auto& t_acts = b.teacher->forward_full(x);
  b.teacher->set_capture(false);

  auto cls = loss_cls(t_acts.logits, labels, with_grad);
  terms.l_cls = cls.value;
  auto stats = collect_bn_stats(*b.teacher);
  auto bns = loss_bns(stats, with_grad);
  terms.l_bns = bns.value;

  // variant term and its backward bookkeeping
  Tensor<T> teacher_dlogits;
  if (with_grad) teacher_dlogits = cls.grad;

  Tensor<T> gx_variant;  // gradient contribution through the student path
  if (variant == SynthVariant::csd || variant == SynthVariant::rotation) {
    if (static_cast<int>(rotations.size()) != x.dim(0))
      throw ShapeError("synthesis_objective: rotations length != batch");
    Tensor<T> xr = rotate_each(x, rotations, M);
    const auto& s_acts = b.student->forward_full(xr);
    Tensor<T> aux_logits = b.aux->forward(s_acts.phi);
    std::vector<int> targets(rotations.size());
    if (variant == SynthVariant::csd) {
      for (size_t i = 0; i < targets.size(); ++i) targets[i] = augmented_label(labels[i], rotations[i], M);
    } else {
      targets = rotations;
    }
    auto ce = cross_entropy(aux_logits, targets, with_grad);
    terms.l_aux = ce.value;
    if (with_grad) {
      for (auto& v : ce.grad.data) v *= -alpha;
      Tensor<T> dphi = b.aux->backward(ce.grad);
      Tensor<T> gxr = b.student->backward_full(nullptr, nullptr, &dphi);
      gx_variant = rotate_each_grad(gxr, rotations, M);
    }
  } else if (variant == SynthVariant::adv) {
    const auto& s_acts = b.student->forward_full(x);
    auto kd = loss_adv_baseline(t_acts.logits, s_acts.logits, temp, square_tau, with_grad);
    terms.l_aux = kd.value;
    if (with_grad) {
      for (int64_t i = 0; i < teacher_dlogits.numel(); ++i) teacher_dlogits[i] += -alpha * kd.grad_teacher[i];
      for (auto& v : kd.grad_student.data) v *= -alpha;
      gx_variant = b.student->backward_full(&kd.grad_student, nullptr, nullptr);
    }
  }

  terms.total = terms.l_cls + terms.l_bns - alpha * terms.l_aux;

  if (with_grad) {
    inject_bn_stat_grads(*b.teacher, bns, T(1));
    Tensor<T> gx_teacher = b.teacher->backward_full(&teacher_dlogits, nullptr, nullptr);
    *grad_x = gx_teacher;
    if (!gx_variant.empty())
      for (int64_t i = 0; i < grad_x->numel(); ++i) (*grad_x)[i] += gx_variant[i];
  }
  return terms;
}

// Stage-1 objective evaluated from noise: x̃ = G(z) in the same graph.
// Gradients flow to z (returned) and into the generator's parameter grads.
template <typename T>
struct DataSynthesisResult {
  SynthesisLossTerms<T> terms;
  Tensor<T> images;
  Tensor<T> grad_z;
};

template <typename T>
DataSynthesisResult<T> loss_data_synthesis(ModelBundle<T>& b, const Tensor<T>& z, const std::vector<int>& labels,
                                           const std::vector<int>& rotations, SynthVariant variant, T alpha,
                                           Temperature<T> temp, bool square_tau, bool with_grad) {
  DataSynthesisResult<T> out;
  out.images = b.generator->forward(z);
  Tensor<T> gx;
  out.terms = synthesis_objective(b, out.images, labels, rotations, variant, alpha, temp, square_tau,
                                  with_grad ? &gx : nullptr);
  if (with_grad) out.grad_z = b.generator->backward(gx);
  return out;
}

template <typename T>
struct TransferLossTerms {
  T total = T(0);
  T l_ce = T(0);
  T l_kd = T(0);
  T l_fea = T(0);
};

// Stage-2 objective: L_ce + L_kd + beta * L_fea. With gradients enabled the
// parameter grads land in the student and projector only; the teacher runs
// forward-only.
template <typename T>
TransferLossTerms<T> loss_knowledge_transfer(ModelBundle<T>& b, const Tensor<T>& x, const std::vector<int>& labels,
                                             T beta, Temperature<T> temp, bool square_tau, bool with_grad) {
  const auto& s_acts = b.student->forward_full(x);
  const auto& t_acts = b.teacher->forward_full(x);
  Tensor<T> projected = b.projector->forward(s_acts.feature_map);

  auto ce = cross_entropy(s_acts.logits, labels, with_grad);
  auto kd = loss_kd(t_acts.logits, s_acts.logits, temp, square_tau, with_grad);
  auto fea = loss_fea(t_acts.feature_map, projected, with_grad);

  TransferLossTerms<T> terms;
  terms.l_ce = ce.value;
  terms.l_kd = kd.value;
  terms.l_fea = fea.value;
  terms.total = ce.value + kd.value + beta * fea.value;

  if (with_grad) {
    Tensor<T> dlogits = ce.grad;
    for (int64_t i = 0; i < dlogits.numel(); ++i) dlogits[i] += kd.grad_student[i];
    for (auto& v : fea.grad.data) v *= beta;
    Tensor<T> dfeat = b.projector->backward(fea.grad);
    b.student->backward_full(&dlogits, &dfeat, nullptr);
  }
  return terms;
}

}  // namespace dfkd
