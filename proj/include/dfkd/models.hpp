#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "dfkd/nn.hpp"

namespace dfkd {

class UnknownArchitectureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Geometry and wiring for one teacher/student/generator/aux quadruple.
struct ArchitectureConfig {
  std::string teacher_arch = "tinycnn-t";
  std::string student_arch = "tinycnn-s";
  int height = 16;
  int width = 16;
  int channels = 1;
  int num_classes = 10;     // N
  int num_rotations = 4;    // M
  int aux_depth = 2;        // fully-connected layers in the auxiliary classifier
  bool aux_rotation_only = false;  // rotation-task head: K = M instead of N*M
  int noise_dim = 256;
  std::array<int, 3> generator_widths{128, 32, 16};

  int aux_label_count() const { return aux_rotation_only ? num_rotations : num_classes * num_rotations; }
};

// Three conv-BN-ReLU blocks (pooling after the first two), global average
// pooling, and a linear head. S(x) = head(phi(x)); the last feature map F is
// the block-3 output before pooling, phi the pooled d-vector, and both come
// from the same forward pass as the logits.
template <typename T>
class TinyCnn : public Module<T> {
 public:
  struct Activations {
    Tensor<T> logits;       // (B, N)
    Tensor<T> feature_map;  // (B, w3, H/4, W/4)
    Tensor<T> phi;          // (B, d)
  };

  TinyCnn(int in_c, int n_classes, std::array<int, 3> widths)
      : widths_(widths), head_(widths[2], n_classes) {
    conv_[0] = std::make_unique<Conv2d<T>>(in_c, widths[0], 3, 1, 1);
    conv_[1] = std::make_unique<Conv2d<T>>(widths[0], widths[1], 3, 1, 1);
    conv_[2] = std::make_unique<Conv2d<T>>(widths[1], widths[2], 3, 1, 1);
    for (int i = 0; i < 3; ++i) bn_[i] = std::make_unique<BatchNorm2d<T>>(widths[i]);
  }

  const Activations& forward_full(const Tensor<T>& x) {
    Tensor<T> h = x;
    for (int i = 0; i < 3; ++i) {
      h = conv_[i]->forward(h);
      h = bn_[i]->forward(h);
      h = relu_[i].forward(h);
      if (i < 2) h = pool_[i].forward(h);
    }
    acts_.feature_map = h;
    acts_.phi = gap_.forward(h);
    acts_.logits = head_.forward(acts_.phi);
    return acts_;
  }

  Tensor<T> forward(const Tensor<T>& x) override { return forward_full(x).logits; }

  // Reverse pass with gradients injected at any of the exposed hooks.
  Tensor<T> backward_full(const Tensor<T>* dlogits, const Tensor<T>* dfeature, const Tensor<T>* dphi) {
    Tensor<T> gphi;
    if (dlogits) gphi = head_.backward(*dlogits);
    if (dphi) {
      if (gphi.empty())
        gphi = *dphi;
      else
        for (int64_t i = 0; i < gphi.numel(); ++i) gphi[i] += (*dphi)[i];
    }
    Tensor<T> gf;
    if (!gphi.empty()) gf = gap_.backward(gphi);
    if (dfeature) {
      if (gf.empty())
        gf = *dfeature;
      else
        for (int64_t i = 0; i < gf.numel(); ++i) gf[i] += (*dfeature)[i];
    }
    if (gf.empty()) throw ValueError("TinyCnn::backward_full: no gradient source");
    Tensor<T> g = gf;
    for (int i = 2; i >= 0; --i) {
      if (i < 2) g = pool_[i].backward(g);
      g = relu_[i].backward(g);
      g = bn_[i]->backward(g);
      g = conv_[i]->backward(g);
    }
    return g;
  }

  Tensor<T> backward(const Tensor<T>& gy) override { return backward_full(&gy, nullptr, nullptr); }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    for (int i = 0; i < 3; ++i) {
      conv_[i]->collect_params(out);
      bn_[i]->collect_params(out);
    }
    head_.collect_params(out);
  }
  void collect_buffers(std::vector<Tensor<T>*>& out) override {
    for (int i = 0; i < 3; ++i) bn_[i]->collect_buffers(out);
  }
  void set_mode(Mode m) override {
    this->mode_ = m;
    for (int i = 0; i < 3; ++i) {
      conv_[i]->set_mode(m);
      bn_[i]->set_mode(m);
    }
    head_.set_mode(m);
  }
  void set_frozen_all(bool f) {
    this->set_frozen(f);
    for (int i = 0; i < 3; ++i) {
      conv_[i]->set_frozen(f);
      bn_[i]->set_frozen(f);
    }
    head_.set_frozen(f);
  }

  std::vector<BatchNorm2d<T>*> bn_layers() {
    return {bn_[0].get(), bn_[1].get(), bn_[2].get()};
  }
  void set_capture(bool on) {
    for (auto* bn : bn_layers()) bn->set_capture(on);
  }

  int feature_dim() const { return widths_[2]; }      // d
  int feature_channels() const { return widths_[2]; }
  const std::array<int, 3>& widths() const { return widths_; }
  Linear<T>& head() { return head_; }
  Conv2d<T>& conv(int i) { return *conv_[i]; }

 private:
  std::array<int, 3> widths_;
  std::array<std::unique_ptr<Conv2d<T>>, 3> conv_;
  std::array<std::unique_ptr<BatchNorm2d<T>>, 3> bn_;
  std::array<ReLU<T>, 3> relu_;
  std::array<MaxPool2x2<T>, 2> pool_;
  GlobalAvgPool<T> gap_;
  Linear<T> head_;
  Activations acts_;
};

// Noise-to-image generator. One fully-connected layer feeds a (c0, H/4, W/4)
// map; two upsample+conv+BN+LeakyReLU blocks reach full resolution; the tail
// is conv, Tanh, then a non-affine BatchNorm (the BN deliberately follows the
// Tanh, so outputs are batch-renormalized rather than bounded).
template <typename T>
class Generator : public Module<T> {
 public:
  Generator(int noise_dim, int out_c, int h, int w, std::array<int, 3> widths)
      : noise_dim_(noise_dim),
        out_c_(out_c),
        h_(h),
        w_(w),
        widths_(widths),
        fc_(noise_dim, widths[0] * (h / 4) * (w / 4)),
        bn0_(widths[0]),
        conv1_(widths[0], widths[1], 3, 1, 1),
        bn1_(widths[1]),
        lrelu1_(T(0.2)),
        conv2_(widths[1], widths[2], 3, 1, 1),
        bn2_(widths[2]),
        lrelu2_(T(0.2)),
        conv3_(widths[2], out_c, 3, 1, 1),
        bn_out_(out_c, /*affine=*/false) {
    if (h % 4 || w % 4) throw ShapeError("Generator: height and width must be divisible by 4");
  }

  Tensor<T> forward(const Tensor<T>& z) override {
    if (z.ndim() != 2 || z.dim(1) != noise_dim_) throw ShapeError("Generator: bad noise batch " + z.shape_str());
    const int b = z.dim(0);
    Tensor<T> h = fc_.forward(z);
    h = h.reshaped({b, widths_[0], h_ / 4, w_ / 4});
    h = bn0_.forward(h);
    h = up1_.forward(h);
    h = conv1_.forward(h);
    h = bn1_.forward(h);
    h = lrelu1_.forward(h);
    h = up2_.forward(h);
    h = conv2_.forward(h);
    h = bn2_.forward(h);
    h = lrelu2_.forward(h);
    h = conv3_.forward(h);
    h = tanh_.forward(h);
    return bn_out_.forward(h);
  }

  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = bn_out_.backward(gy);
    g = tanh_.backward(g);
    g = conv3_.backward(g);
    g = lrelu2_.backward(g);
    g = bn2_.backward(g);
    g = conv2_.backward(g);
    g = up2_.backward(g);
    g = lrelu1_.backward(g);
    g = bn1_.backward(g);
    g = conv1_.backward(g);
    g = bn0_.backward(g);
    g = g.reshaped({g.dim(0), fc_.weight().value.dim(0)});
    return fc_.backward(g);
  }

  void collect_params(std::vector<Parameter<T>*>& out) override {
    fc_.collect_params(out);
    bn0_.collect_params(out);
    conv1_.collect_params(out);
    bn1_.collect_params(out);
    conv2_.collect_params(out);
    bn2_.collect_params(out);
    conv3_.collect_params(out);
    bn_out_.collect_params(out);
  }
  void collect_buffers(std::vector<Tensor<T>*>& out) override {
    bn0_.collect_buffers(out);
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    bn_out_.collect_buffers(out);
  }
  void set_mode(Mode m) override {
    this->mode_ = m;
    for (Module<T>* mod : std::vector<Module<T>*>{&fc_, &bn0_, &conv1_, &bn1_, &conv2_, &bn2_, &conv3_, &bn_out_})
      mod->set_mode(m);
  }

  int noise_dim() const { return noise_dim_; }
  int out_channels() const { return out_c_; }
  int out_height() const { return h_; }
  int out_width() const { return w_; }
  Linear<T>& fc() { return fc_; }
  Conv2d<T>& conv1() { return conv1_; }
  Conv2d<T>& conv2() { return conv2_; }
  Conv2d<T>& conv3() { return conv3_; }
  std::vector<BatchNorm2d<T>*> bn_layers() { return {&bn0_, &bn1_, &bn2_, &bn_out_}; }

 private:
  int noise_dim_, out_c_, h_, w_;
  std::array<int, 3> widths_;
  Linear<T> fc_;
  BatchNorm2d<T> bn0_;
  Upsample2x<T> up1_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  LeakyReLU<T> lrelu1_;
  Upsample2x<T> up2_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  LeakyReLU<T> lrelu2_;
  Conv2d<T> conv3_;
  Tanh<T> tanh_;
  BatchNorm2d<T> bn_out_;
};

// Fully-connected head on the student's pooled feature, solving the K-way
// augmented task. Shares no parameters with the student.
template <typename T>
class AuxClassifier : public Module<T> {
 public:
  AuxClassifier(int in_dim, int out_dim, int depth) : in_dim_(in_dim), out_dim_(out_dim), depth_(depth) {
    if (depth < 1 || depth > 3) throw ValueError("AuxClassifier: depth must be 1, 2 or 3");
    for (int i = 0; i < depth; ++i) {
      const int in = in_dim;
      const int out = (i == depth - 1) ? out_dim : in_dim;
      linears_.push_back(std::make_unique<Linear<T>>(in, out));
    }
    relus_.resize(static_cast<size_t>(depth > 1 ? depth - 1 : 0));
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = x;
    for (int i = 0; i < depth_; ++i) {
      h = linears_[static_cast<size_t>(i)]->forward(h);
      if (i < depth_ - 1) h = relus_[static_cast<size_t>(i)].forward(h);
    }
    return h;
  }
  Tensor<T> backward(const Tensor<T>& gy) override {
    Tensor<T> g = gy;
    for (int i = depth_ - 1; i >= 0; --i) {
      if (i < depth_ - 1) g = relus_[static_cast<size_t>(i)].backward(g);
      g = linears_[static_cast<size_t>(i)]->backward(g);
    }
    return g;
  }
  void collect_params(std::vector<Parameter<T>*>& out) override {
    for (auto& l : linears_) l->collect_params(out);
  }
  void set_mode(Mode m) override {
    this->mode_ = m;
    for (auto& l : linears_) l->set_mode(m);
  }
  void set_frozen_all(bool f) {
    this->set_frozen(f);
    for (auto& l : linears_) l->set_frozen(f);
  }

  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }
  int depth() const { return depth_; }

 private:
  int in_dim_, out_dim_, depth_;
  std::vector<std::unique_ptr<Linear<T>>> linears_;
  std::vector<ReLU<T>> relus_;
};

// Aligns student feature maps to teacher feature maps: pointwise channel
// projection plus nearest-neighbour spatial resize when geometries differ.
template <typename T>
class Projector : public Module<T> {
 public:
  Projector(int in_c, int out_c, int target_h, int target_w)
      : conv_(in_c, out_c, 1, 1, 0), resize_(target_h, target_w) {}

  Tensor<T> forward(const Tensor<T>& x) override { return resize_.forward(conv_.forward(x)); }
  Tensor<T> backward(const Tensor<T>& gy) override { return conv_.backward(resize_.backward(gy)); }
  void collect_params(std::vector<Parameter<T>*>& out) override { conv_.collect_params(out); }
  void set_mode(Mode m) override {
    this->mode_ = m;
    conv_.set_mode(m);
    resize_.set_mode(m);
  }
  Conv2d<T>& conv() { return conv_; }

 private:
  Conv2d<T> conv_;
  ResizeNearest<T> resize_;
};

// The actors of one distillation run. The teacher is frozen for the bundle's
// lifetime; the projector serves the feature loss and trains with the student.
template <typename T>
struct ModelBundle {
  ArchitectureConfig config;
  std::unique_ptr<TinyCnn<T>> teacher;
  std::unique_ptr<TinyCnn<T>> student;
  std::unique_ptr<Generator<T>> generator;
  std::unique_ptr<AuxClassifier<T>> aux;
  std::unique_ptr<Projector<T>> projector;
};

inline std::array<int, 3> tinycnn_widths(const std::string& arch) {
  if (arch == "tinycnn-t") return {32, 64, 128};
  if (arch == "tinycnn-s") return {16, 32, 64};
  if (arch == "tinycnn-p") return {4, 6, 8};  // probe scale for tests
  throw UnknownArchitectureError("unknown architecture: " + arch);
}

template <typename T>
void init_tinycnn(TinyCnn<T>& net, RngStream& rng) {
  for (int i = 0; i < 3; ++i) {
    he_normal_init(net.conv(i).weight(), net.conv(i).fan_in(), rng);
    zero_init(net.conv(i).bias());
  }
  he_normal_init(net.head().weight(), net.head().fan_in(), rng);
  zero_init(net.head().bias());
  for (auto* bn : net.bn_layers()) {
    bn->mutable_running_mean().fill(T(0));
    bn->mutable_running_var().fill(T(1));
  }
  for (auto* p : net.params()) p->zero_grad();
}

template <typename T>
void init_generator(Generator<T>& g, RngStream& rng) {
  he_normal_init(g.fc().weight(), g.fc().fan_in(), rng);
  zero_init(g.fc().bias());
  for (Conv2d<T>* c : {&g.conv1(), &g.conv2(), &g.conv3()}) {
    he_normal_init(c->weight(), c->fan_in(), rng);
    zero_init(c->bias());
  }
  for (auto* bn : g.bn_layers()) {
    std::vector<Parameter<T>*> affine;
    bn->collect_params(affine);
    if (affine.size() == 2) {
      affine[0]->value.fill(T(1));
      affine[1]->value.fill(T(0));
    }
    bn->mutable_running_mean().fill(T(0));
    bn->mutable_running_var().fill(T(1));
  }
  for (auto* p : g.params()) p->zero_grad();
}

template <typename T>
void init_aux(AuxClassifier<T>& aux, RngStream& rng) {
  std::vector<Parameter<T>*> ps;
  aux.collect_params(ps);
  for (size_t i = 0; i < ps.size(); i += 2) {
    const int fan_in = ps[i]->value.dim(1);
    he_normal_init(*ps[i], fan_in, rng);
    zero_init(*ps[i + 1]);
  }
}

template <typename T>
void init_projector(Projector<T>& p, RngStream& rng) {
  he_normal_init(p.conv().weight(), p.conv().fan_in(), rng);
  zero_init(p.conv().bias());
}

// Builds compatible teacher/student/generator/aux models for one geometry.
// The teacher comes back frozen in eval mode; loading a pretrained checkpoint
// into it is the harness's job.
template <typename T>
ModelBundle<T> build_models(const ArchitectureConfig& cfg, uint64_t master_seed) {
  ModelBundle<T> b;
  b.config = cfg;
  const auto tw = tinycnn_widths(cfg.teacher_arch);
  const auto sw = tinycnn_widths(cfg.student_arch);
  b.teacher = std::make_unique<TinyCnn<T>>(cfg.channels, cfg.num_classes, tw);
  b.student = std::make_unique<TinyCnn<T>>(cfg.channels, cfg.num_classes, sw);
  b.generator = std::make_unique<Generator<T>>(cfg.noise_dim, cfg.channels, cfg.height, cfg.width, cfg.generator_widths);
  b.aux = std::make_unique<AuxClassifier<T>>(b.student->feature_dim(), cfg.aux_label_count(), cfg.aux_depth);
  b.projector = std::make_unique<Projector<T>>(b.student->feature_channels(), b.teacher->feature_channels(),
                                               cfg.height / 4, cfg.width / 4);
  if (b.aux->in_dim() != b.student->feature_dim())
    throw ShapeError("build_models: aux input dim != student feature dim");
  if (b.generator->out_channels() != cfg.channels || b.generator->out_height() != cfg.height ||
      b.generator->out_width() != cfg.width)
    throw ShapeError("build_models: generator output geometry mismatch");

  auto r_t = RngStream::derive(master_seed, "init.teacher");
  auto r_s = RngStream::derive(master_seed, "init.student");
  auto r_g = RngStream::derive(master_seed, "init.generator");
  auto r_a = RngStream::derive(master_seed, "init.aux");
  auto r_p = RngStream::derive(master_seed, "init.projector");
  init_tinycnn(*b.teacher, r_t);
  init_tinycnn(*b.student, r_s);
  init_generator(*b.generator, r_g);
  init_aux(*b.aux, r_a);
  init_projector(*b.projector, r_p);

  b.teacher->set_frozen_all(true);
  b.teacher->set_mode(Mode::eval);
  return b;
}

}  // namespace dfkd
