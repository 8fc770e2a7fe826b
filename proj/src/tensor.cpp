#include "poselatent/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "poselatent/errors.hpp"
#include "poselatent/random.hpp"

namespace poselatent {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace {

std::atomic<std::uint64_t> g_seq{0};

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
std::shared_ptr<Node<T>> new_node(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1);
  if (!grad_enabled()) return n;
  for (const Tensor<T>* in : inputs) {
    if (in && in->defined() && in->requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor<T>* in : inputs) {
      if (in && in->defined()) n->parents.push_back(in->node());
    }
  }
  return n;
}

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T>
std::span<T> grad_of(const Tensor<T>& t) {
  auto& n = *t.node();
  n.ensure_grad();
  return n.grad;
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, v), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  return wrap(std::move(n));
}

template <typename T>
void Tensor<T>::backward() const {
  std::vector<T> ones(numel(), T(1));
  backward(ones);
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) const {
  if (seed.size() != numel()) throw DimensionError("backward seed size mismatch");
  if (!requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{node_.get()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  // Creation order is a topological order of the tape.
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
  for (Node<T>* n : order) {
    if (n->backward && !n->grad.empty()) n->backward();
  }
}

// ---- affine -----------------------------------------------------------------

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) {
    throw DimensionError("affine: cannot multiply x" + shape_str(x.shape()) + " by W" + shape_str(w.shape()));
  }
  const std::size_t rows = x.dim(0), n = x.dim(1), m = w.dim(1);
  if (b.defined() && b.numel() != m) {
    throw DimensionError("affine: bias" + shape_str(b.shape()) + " does not match W" + shape_str(w.shape()));
  }
  std::vector<T> y(rows * m);
  MapR<T> ym(y.data(), rows, m);
  ym.noalias() = CMapR<T>(x.data().data(), rows, n) * CMapR<T>(w.data().data(), n, m);
  if (b.defined()) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < m; ++j) y[r * m + j] += b[j];
    }
  }
  auto out = new_node<T>({rows, m}, std::move(y), {&x, &w, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, w, b, rows, n, m]() {
      CMapR<T> dy(self->grad.data(), rows, m);
      if (wants_grad(x)) {
        MapR<T>(grad_of(x).data(), rows, n).noalias() += dy * CMapR<T>(w.data().data(), n, m).transpose();
      }
      if (wants_grad(w)) {
        MapR<T>(grad_of(w).data(), n, m).noalias() += CMapR<T>(x.data().data(), rows, n).transpose() * dy;
      }
      if (wants_grad(b)) {
        auto gb = grad_of(b);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < m; ++j) gb[j] += self->grad[r * m + j];
        }
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- conv2d -------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, oh, ow, stride;
  std::size_t cols_rows() const { return in_ch * 9; }
  std::size_t cols_width() const { return batch * oh * ow; }
};

// Row-major [C*9, B*OH*OW] patch matrix.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t width = g.cols_width(), plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = cols + (c * 9 + ky * 3 + kx) * width;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* src = x + (b * g.in_ch + c) * g.h * g.w;
          T* dst = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(dst + oy * g.ow, dst + (oy + 1) * g.ow, T(0));
              continue;
            }
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - 1;
              dst[oy * g.ow + ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[iy * g.w + ix];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
  const std::size_t width = g.cols_width(), plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = cols + (c * 9 + ky * 3 + kx) * width;
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* dst = dx + (b * g.in_ch + c) * g.h * g.w;
          const T* src = row + b * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - 1;
              if (ix >= 0 && ix < static_cast<long>(g.w)) dst[iy * g.w + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, const Tensor<T>& bias) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (k.rank() != 4 || k.dim(2) != 3 || k.dim(3) != 3) {
    throw DimensionError("conv2d: kernel must be [C',C,3,3], got " + shape_str(k.shape()));
  }
  if (k.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: channel mismatch between input" + shape_str(x.shape()) + " and kernel" +
                         shape_str(k.shape()));
  }
  if (stride != 1 && stride != 2) throw ArgumentError("conv2d: stride must be 1 or 2");
  const auto s = static_cast<std::size_t>(stride);
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), (x.dim(2) + s - 1) / s, (x.dim(3) + s - 1) / s, s};
  if (bias.defined() && bias.numel() != g.out_ch) throw DimensionError("conv2d: bias size mismatch");

  auto cols = std::make_shared<std::vector<T>>(g.cols_rows() * g.cols_width());
  im2col(x.data().data(), g, cols->data());

  const std::size_t plane = g.oh * g.ow, width = g.cols_width();
  std::vector<T> ymat(g.out_ch * width);
  MapR<T>(ymat.data(), g.out_ch, width).noalias() =
      CMapR<T>(k.data().data(), g.out_ch, g.cols_rows()) * CMapR<T>(cols->data(), g.cols_rows(), width);

  std::vector<T> y(g.batch * g.out_ch * plane);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < g.out_ch; ++co) {
      const T* src = ymat.data() + co * width + b * plane;
      T* dst = y.data() + (b * g.out_ch + co) * plane;
      const T add = bias.defined() ? bias[co] : T(0);
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + add;
    }
  }

  auto out = new_node<T>({g.batch, g.out_ch, g.oh, g.ow}, std::move(y), {&x, &k, &bias});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, k, bias, g, cols]() {
      const std::size_t plane = g.oh * g.ow, width = g.cols_width();
      std::vector<T> dy(g.out_ch * width);
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t co = 0; co < g.out_ch; ++co) {
          const T* src = self->grad.data() + (b * g.out_ch + co) * plane;
          std::copy(src, src + plane, dy.data() + co * width + b * plane);
        }
      }
      CMapR<T> dym(dy.data(), g.out_ch, width);
      if (wants_grad(k)) {
        MapR<T>(grad_of(k).data(), g.out_ch, g.cols_rows()).noalias() +=
            dym * CMapR<T>(cols->data(), g.cols_rows(), width).transpose();
      }
      if (wants_grad(bias)) {
        auto gb = grad_of(bias);
        for (std::size_t co = 0; co < g.out_ch; ++co) {
          T acc = 0;
          for (std::size_t i = 0; i < width; ++i) acc += dy[co * width + i];
          gb[co] += acc;
        }
      }
      if (wants_grad(x)) {
        std::vector<T> dcols(g.cols_rows() * width);
        MapR<T>(dcols.data(), g.cols_rows(), width).noalias() =
            CMapR<T>(k.data().data(), g.out_ch, g.cols_rows()).transpose() * dym;
        col2im(dcols.data(), g, grad_of(x).data());
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- upsample -----------------------------------------------------------------

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample2x_nearest: input must be [B,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> y(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * h * w;
    T* dst = y.data() + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
    }
  }
  auto out = new_node<T>({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(y), {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, planes, h, w]() {
      auto gx = grad_of(x);
      for (std::size_t p = 0; p < planes; ++p) {
        const T* src = self->grad.data() + p * 4 * h * w;
        T* dst = gx.data() + p * h * w;
        for (std::size_t i = 0; i < 2 * h; ++i) {
          for (std::size_t j = 0; j < 2 * w; ++j) dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
        }
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- instance statistics / AdaIN ---------------------------------------------

namespace {

template <typename T>
void plane_stats(const T* f, std::size_t n, T& mu, T& sigma) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += f[i];
  mu = acc / static_cast<T>(n);
  T var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (f[i] - mu) * (f[i] - mu);
  var /= static_cast<T>(n);
  sigma = std::sqrt(var + static_cast<T>(kInstanceNormEps));
}

void require_map(std::size_t rank, const char* op) {
  if (rank != 4) throw DimensionError(std::string(op) + ": feature map must be [B,C,H,W]");
}

}  // namespace

template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& f) {
  require_map(f.rank(), "spatial_mean");
  const std::size_t planes = f.dim(0) * f.dim(1), n = f.dim(2) * f.dim(3);
  std::vector<T> mu(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T sigma;
    plane_stats(f.data().data() + p * n, n, mu[p], sigma);
  }
  auto out = new_node<T>({f.dim(0), f.dim(1)}, std::move(mu), {&f});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, f, planes, n]() {
      auto gf = grad_of(f);
      for (std::size_t p = 0; p < planes; ++p) {
        const T g = self->grad[p] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) gf[p * n + i] += g;
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> spatial_std(const Tensor<T>& f) {
  require_map(f.rank(), "spatial_std");
  const std::size_t planes = f.dim(0) * f.dim(1), n = f.dim(2) * f.dim(3);
  std::vector<T> mu(planes), sigma(planes);
  for (std::size_t p = 0; p < planes; ++p) plane_stats(f.data().data() + p * n, n, mu[p], sigma[p]);
  auto out = new_node<T>({f.dim(0), f.dim(1)}, sigma, {&f});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, f, planes, n, mu = std::move(mu), sigma = std::move(sigma)]() {
      auto gf = grad_of(f);
      const T* fv = f.data().data();
      for (std::size_t p = 0; p < planes; ++p) {
        const T g = self->grad[p] / (static_cast<T>(n) * sigma[p]);
        for (std::size_t i = 0; i < n; ++i) gf[p * n + i] += g * (fv[p * n + i] - mu[p]);
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> adain_modulate(const Tensor<T>& f, const Tensor<T>& gs, const Tensor<T>& gb) {
  require_map(f.rank(), "adain_modulate");
  const std::size_t batch = f.dim(0), ch = f.dim(1), n = f.dim(2) * f.dim(3), planes = batch * ch;
  if (gs.numel() != planes || gb.numel() != planes) {
    throw DimensionError("adain_modulate: modulation " + shape_str(gs.shape()) + "/" + shape_str(gb.shape()) +
                         " does not match feature map " + shape_str(f.shape()));
  }
  std::vector<T> xhat(f.numel()), sigma(planes), y(f.numel());
  const T* fv = f.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    T mu;
    plane_stats(fv + p * n, n, mu, sigma[p]);
    for (std::size_t i = 0; i < n; ++i) {
      xhat[p * n + i] = (fv[p * n + i] - mu) / sigma[p];
      y[p * n + i] = gs[p] * xhat[p * n + i] + gb[p];
    }
  }
  auto out = new_node<T>(f.shape(), std::move(y), {&f, &gs, &gb});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, f, gs, gb, planes, n, xhat = std::move(xhat), sigma = std::move(sigma)]() {
      const T* dy = self->grad.data();
      std::span<T> gf = wants_grad(f) ? grad_of(f) : std::span<T>{};
      std::span<T> ggs = wants_grad(gs) ? grad_of(gs) : std::span<T>{};
      std::span<T> ggb = wants_grad(gb) ? grad_of(gb) : std::span<T>{};
      for (std::size_t p = 0; p < planes; ++p) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t i = 0; i < n; ++i) {
          sum_dy += dy[p * n + i];
          sum_dy_xhat += dy[p * n + i] * xhat[p * n + i];
        }
        if (!ggb.empty()) ggb[p] += sum_dy;
        if (!ggs.empty()) ggs[p] += sum_dy_xhat;
        if (!gf.empty()) {
          // d xhat_j / d F_i = (delta_ij - 1/n - xhat_i xhat_j / n) / sigma
          const T s = gs[p];
          const T mean_g = s * sum_dy / static_cast<T>(n);
          const T mean_gx = s * sum_dy_xhat / static_cast<T>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const T gi = s * dy[p * n + i];
            gf[p * n + i] += (gi - mean_g - xhat[p * n + i] * mean_gx) / sigma[p];
          }
        }
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- bilinear contraction -------------------------------------------------------

template <typename T>
Tensor<T> bilinear_contract(const Tensor<T>& w3, const Tensor<T>& a, const Tensor<T>& v) {
  if (w3.rank() != 3 || w3.dim(0) != w3.dim(1) || w3.dim(1) != w3.dim(2)) {
    throw DimensionError("bilinear_contract: W must be [d,d,d], got " + shape_str(w3.shape()));
  }
  const std::size_t d = w3.dim(0);
  const bool v_vec = v.rank() == 1;
  const std::size_t batch = v_vec ? 1 : v.dim(0);
  if ((v_vec && v.dim(0) != d) || (!v_vec && (v.rank() != 2 || v.dim(1) != d))) {
    throw DimensionError("bilinear_contract: second operand " + shape_str(v.shape()) + " does not match d=" +
                         std::to_string(d));
  }
  const std::size_t a_rows = a.rank() == 1 ? 1 : a.dim(0);
  if (a.numel() != a_rows * d || (a_rows != 1 && a_rows != batch)) {
    throw DimensionError("bilinear_contract: first operand " + shape_str(a.shape()) + " does not match second " +
                         shape_str(v.shape()));
  }
  const std::size_t dd = d * d;
  // M[r] = sum_i a[r,i] W[i,:,:]  (one d x d matrix per row of a)
  auto mats = std::make_shared<std::vector<T>>(a_rows * dd);
  MapR<T>(mats->data(), a_rows, dd).noalias() =
      CMapR<T>(a.data().data(), a_rows, d) * CMapR<T>(w3.data().data(), d, dd);
  std::vector<T> y(batch * d);
  if (a_rows == 1) {
    MapR<T>(y.data(), batch, d).noalias() = CMapR<T>(v.data().data(), batch, d) * CMapR<T>(mats->data(), d, d);
  } else {
    for (std::size_t b = 0; b < batch; ++b) {
      MapR<T>(y.data() + b * d, 1, d).noalias() =
          CMapR<T>(v.data().data() + b * d, 1, d) * CMapR<T>(mats->data() + b * dd, d, d);
    }
  }
  Shape shape = v_vec ? Shape{d} : Shape{batch, d};
  auto out = new_node<T>(std::move(shape), std::move(y), {&w3, &a, &v});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, w3, a, v, d, dd, batch, a_rows, mats]() {
      CMapR<T> dy(self->grad.data(), batch, d);
      CMapR<T> vm(v.data().data(), batch, d);
      if (wants_grad(v)) {
        MapR<T> gv(grad_of(v).data(), batch, d);
        if (a_rows == 1) {
          gv.noalias() += dy * CMapR<T>(mats->data(), d, d).transpose();
        } else {
          for (std::size_t b = 0; b < batch; ++b) {
            gv.row(b).noalias() += dy.row(b) * CMapR<T>(mats->data() + b * dd, d, d).transpose();
          }
        }
      }
      if (!wants_grad(w3) && !wants_grad(a)) return;
      // dM[r][j,k] = sum_{b in r} v[b,j] dy[b,k]
      std::vector<T> dm(a_rows * dd);
      if (a_rows == 1) {
        MapR<T>(dm.data(), d, d).noalias() = vm.transpose() * dy;
      } else {
        for (std::size_t b = 0; b < batch; ++b) {
          MapR<T>(dm.data() + b * dd, d, d).noalias() = vm.row(b).transpose() * dy.row(b);
        }
      }
      CMapR<T> dmm(dm.data(), a_rows, dd);
      if (wants_grad(w3)) {
        MapR<T>(grad_of(w3).data(), d, dd).noalias() += CMapR<T>(a.data().data(), a_rows, d).transpose() * dmm;
      }
      if (wants_grad(a)) {
        MapR<T>(grad_of(a).data(), a_rows, d).noalias() += dmm * CMapR<T>(w3.data().data(), d, dd).transpose();
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- elementwise ----------------------------------------------------------------

namespace {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(x[i]);
  auto out = new_node<T>(x.shape(), std::move(y), {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, deriv]() {
      auto gx = grad_of(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self->grad[i] * deriv(x[i], self->value[i]);
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return unary(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  auto out = new_node<T>(a.shape(), std::move(y), {&a, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, a, b]() {
      for (const Tensor<T>* t : {&a, &b}) {
        if (!wants_grad(*t)) continue;
        auto g = grad_of(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  auto out = new_node<T>(a.shape(), std::move(y), {&a, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, a, b]() {
      if (wants_grad(a)) {
        auto g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
      }
      if (wants_grad(b)) {
        auto g = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self->grad[i];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  auto out = new_node<T>(a.shape(), std::move(y), {&a, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, a, b]() {
      if (wants_grad(a)) {
        auto g = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * b[i];
      }
      if (wants_grad(b)) {
        auto g = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i] * a[i];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- reductions -----------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto out = new_node<T>({1}, {acc}, {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x]() {
      auto g = grad_of(x);
      for (auto& gi : g) gi += self->grad[0];
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  require_same(pred, target, "mse");
  const std::size_t n = pred.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  auto out = new_node<T>({1}, {acc / static_cast<T>(n)}, {&pred, &target});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, pred, target, n]() {
      const T k = T(2) * self->grad[0] / static_cast<T>(n);
      if (wants_grad(pred)) {
        auto g = grad_of(pred);
        for (std::size_t i = 0; i < n; ++i) g[i] += k * (pred[i] - target[i]);
      }
      if (wants_grad(target)) {
        auto g = grad_of(target);
        for (std::size_t i = 0; i < n; ++i) g[i] -= k * (pred[i] - target[i]);
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- shape manipulation -----------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto out = new_node<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x]() {
      auto g = grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0), n = x.dim(1), w = end - begin;
  std::vector<T> y(rows * w);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(x.data().begin() + r * n + begin, x.data().begin() + r * n + end, y.begin() + r * w);
  }
  auto out = new_node<T>({rows, w}, std::move(y), {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, rows, n, w, begin]() {
      auto g = grad_of(x);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) g[r * n + begin + j] += self->grad[r * w + j];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), na = a.dim(1), nb = b.dim(1), n = na + nb;
  std::vector<T> y(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.data().begin() + r * na, a.data().begin() + (r + 1) * na, y.begin() + r * n);
    std::copy(b.data().begin() + r * nb, b.data().begin() + (r + 1) * nb, y.begin() + r * n + na);
  }
  auto out = new_node<T>({rows, n}, std::move(y), {&a, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, a, b, rows, na, nb, n]() {
      if (wants_grad(a)) {
        auto g = grad_of(a);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < na; ++j) g[r * na + j] += self->grad[r * n + j];
      }
      if (wants_grad(b)) {
        auto g = grad_of(b);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < nb; ++j) g[r * nb + j] += self->grad[r * n + na + j];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- normalization / similarity ----------------------------------------------------

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  const std::size_t n = x.numel() / rows;
  std::vector<T> y(x.numel()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += x[r * n + j] * x[r * n + j];
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > static_cast<T>(kNormGuard))) {
      throw NumericError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = x[r * n + j] / norms[r];
  }
  auto out = new_node<T>(x.shape(), std::move(y), {&x});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, x, rows, n, norms = std::move(norms)]() {
      auto g = grad_of(x);
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += self->value[r * n + j] * self->grad[r * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          g[r * n + j] += (self->grad[r * n + j] - self->value[r * n + j] * dot) / norms[r];
        }
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> row_dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "row_dot");
  if (a.rank() != 2) throw DimensionError("row_dot: expects [B,n] operands");
  const std::size_t rows = a.dim(0), n = a.dim(1);
  std::vector<T> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += a[r * n + j] * b[r * n + j];
    y[r] = acc;
  }
  auto out = new_node<T>({rows}, std::move(y), {&a, &b});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, a, b, rows, n]() {
      if (wants_grad(a)) {
        auto g = grad_of(a);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self->grad[r] * b[r * n + j];
      }
      if (wants_grad(b)) {
        auto g = grad_of(b);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self->grad[r] * a[r * n + j];
      }
    };
  }
  return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  std::vector<T> probs(rows * k);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= k) throw ArgumentError("cross_entropy: target " + std::to_string(targets[r]) + " out of range");
    const T* l = logits.data().data() + r * k;
    const T mx = *std::max_element(l, l + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(l[j] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(l[j] - log_z);
    loss += log_z - l[targets[r]];
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  auto out = new_node<T>({1}, {loss / static_cast<T>(rows)}, {&logits});
  if (out->requires_grad) {
    Node<T>* self = out.get();
    out->backward = [self, logits, rows, k, probs = std::move(probs), tgt = std::move(tgt)]() {
      auto g = grad_of(logits);
      const T s = self->grad[0] / static_cast<T>(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
          g[r * k + j] += s * (probs[r * k + j] - (j == tgt[r] ? T(1) : T(0)));
        }
      }
    };
  }
  return Tensor<T>::wrap(out);
}

// ---- Adam ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (state.m.size() < params.size()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  state.t += 1;
  const AdamConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    if (!p.has_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    if (m.size() != p.numel()) throw DimensionError("adam_step: state does not match parameter " + std::to_string(i));
    auto g = p.grad();
    auto w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<T>(c.beta1) * m[j] + static_cast<T>(1.0 - c.beta1) * g[j];
      v[j] = static_cast<T>(c.beta2) * v[j] + static_cast<T>(1.0 - c.beta2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      w[j] -= static_cast<T>(c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

// ---- gradient check -------------------------------------------------------------------

double grad_check(const GradCheckOp& op, std::vector<TensorD> inputs, double eps, std::uint64_t seed) {
  auto projected = [&](const TensorD& y, const std::vector<double>& r) {
    double acc = 0;
    for (std::size_t i = 0; i < r.size(); ++i) acc += r[i] * y[i];
    return acc;
  };
  auto check_finite = [](std::span<const double> v, const char* what) {
    for (double x : v) {
      if (!std::isfinite(x)) throw NumericError(std::string("grad_check: non-finite ") + what);
    }
  };

  for (auto& in : inputs) in.zero_grad();
  TensorD y = op(inputs);
  check_finite(y.data(), "forward output");
  Rng rng(seed);
  std::vector<double> r(y.numel());
  for (auto& ri : r) ri = rng.uniform(-1.0, 1.0);
  y.backward(r);

  double worst = 0.0;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<double> ad(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), ad.begin());
    check_finite(ad, "analytic gradient");
    auto w = in.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double fp = projected(op(inputs), r);
      w[i] = orig - eps;
      const double fm = projected(op(inputs), r);
      w[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(fd)) throw NumericError("grad_check: non-finite finite difference");
      const double err = std::abs(ad[i] - fd) / std::max(1e-8, std::abs(ad[i]) + std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// ---- instantiations ---------------------------------------------------------------------

#define POSELATENT_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                        \
  template Tensor<T> affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&);            \
  template Tensor<T> upsample2x_nearest(const Tensor<T>&);                                         \
  template Tensor<T> spatial_mean(const Tensor<T>&);                                               \
  template Tensor<T> spatial_std(const Tensor<T>&);                                                \
  template Tensor<T> adain_modulate(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> bilinear_contract(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> normalize_rows(const Tensor<T>&);                                             \
  template Tensor<T> row_dot(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);                \
  template void adam_step(std::span<Tensor<T>>, AdamState<T>&);

POSELATENT_INSTANTIATE(float)
POSELATENT_INSTANTIATE(double)

}  // namespace poselatent
