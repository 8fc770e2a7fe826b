#pragma once

// Dense tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle to a graph node. Ops create a new node whose
// backward rule accumulates into the gradients of its parents; nodes only
// record parents when at least one input requires a gradient, so inference
// runs without building a graph. Scalar type is float for training and
// double for gradient verification.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace poselatent {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Recording is on by default; NoGradGuard turns it off for the current thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Mutable access is meant for leaves (parameters, inputs) outside of a
  // recorded forward pass.
  std::span<T> mutable_data() { return node_->value; }
  T item() const { return node_->value.at(0); }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  // Same values, no tape history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  // Seeds the output gradient with ones (scalar losses) or `seed`.
  void backward() const;
  void backward(std::span<const T> seed) const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& t, bool requires_grad = false) {
  std::vector<U> v(t.data().begin(), t.data().end());
  return Tensor<U>::from(t.shape(), std::move(v), requires_grad);
}

// ---- differentiable primitives -------------------------------------------

constexpr double kInstanceNormEps = 1e-5;
constexpr double kNormGuard = 1e-12;

// y = x W + b; x [B,n], W [n,m], b [m] (b may be undefined).
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) { return affine(x, w, Tensor<T>{}); }

// 3x3 cross-correlation, zero padding 1, stride 1 or 2. x [B,C,H,W],
// k [C',C,3,3], optional per-output-channel bias [C'].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, const Tensor<T>& bias = {});

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x);

// Per (batch, channel) spatial mean and population std with kInstanceNormEps
// under the root. Both outputs are [B,C].
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& f);
template <typename T>
Tensor<T> spatial_std(const Tensor<T>& f);
template <typename T>
struct InstanceStats {
  Tensor<T> mu;
  Tensor<T> sigma;
};
template <typename T>
InstanceStats<T> instance_stats(const Tensor<T>& f) {
  return {spatial_mean(f), spatial_std(f)};
}

// gs * (F - mu(F)) / sigma(F) + gb, gs/gb [B,C] broadcast over H,W.
template <typename T>
Tensor<T> adain_modulate(const Tensor<T>& f, const Tensor<T>& gs, const Tensor<T>& gb);

// out[b,k] = sum_ij W3[i,j,k] a[b,i] v[b,j]. W3 [d,d,d]; a is [d], [1,d] or
// [B,d]; v is [d] or [B,d]. A single `a` row is shared across the batch.
template <typename T>
Tensor<T> bilinear_contract(const Tensor<T>& w3, const Tensor<T>& a, const Tensor<T>& v);

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2));
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Columns [begin, end) of a [B,n] matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) { return x.detach(); }

// Row-wise x / ||x||; throws NumericError when a row norm is below kNormGuard.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x);
// [B,n] . [B,n] -> [B]
template <typename T>
Tensor<T> row_dot(const Tensor<T>& a, const Tensor<T>& b);
// Mean over rows of -log softmax(logits)[row, target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

// ---- optimizer ------------------------------------------------------------

struct AdamConfig {
  double lr = 0.0002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;
};

// One Adam step with bias correction over every parameter that carries a
// gradient. State slots are created lazily (zero) on the first step.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

// ---- verification -----------------------------------------------------------

using GradCheckOp = std::function<TensorD(std::span<const TensorD>)>;

// Max over input elements of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|),
// using central differences on a fixed random projection of the output.
// Only inputs with requires_grad are checked.
double grad_check(const GradCheckOp& op, std::vector<TensorD> inputs, double eps = 1e-6, std::uint64_t seed = 7);

}  // namespace poselatent
