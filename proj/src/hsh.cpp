#include "poselatent/hsh.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

#include "poselatent/errors.hpp"

namespace poselatent {

using std::numbers::pi;

namespace {

double factorial(int n) {
  double f = 1;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

// P_l^m(x) for 0 <= m <= l <= lmax, no Condon-Shortley phase; index l*(lmax+1)+m.
void legendre_table(int lmax, double x, double s, std::vector<double>& out) {
  const int w = lmax + 1;
  out.assign(static_cast<std::size_t>(w * w), 0.0);
  double pmm = 1.0;
  for (int m = 0; m <= lmax; ++m) {
    if (m > 0) pmm *= (2 * m - 1) * s;
    out[m * w + m] = pmm;
    if (m + 1 <= lmax) out[(m + 1) * w + m] = x * (2 * m + 1) * pmm;
    for (int l = m + 2; l <= lmax; ++l) {
      out[l * w + m] = ((2 * l - 1) * x * out[(l - 1) * w + m] - (l + m - 1) * out[(l - 2) * w + m]) / (l - m);
    }
  }
}

double sph_norm(int l, int m) {
  return std::sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m));
}

// Precomputed constants for one max_n.
class HshEvaluator {
 public:
  explicit HshEvaluator(int max_n) : max_n_(max_n) {
    if (max_n < 0) throw ArgumentError("hsh max_n must be >= 0");
    const int w = max_n + 1;
    radial_norm_.resize(static_cast<std::size_t>(w * w));
    sph_norm_.resize(static_cast<std::size_t>(w * w));
    for (int n = 0; n <= max_n; ++n) {
      for (int l = 0; l <= n; ++l) {
        radial_norm_[n * w + l] = std::sqrt(factorial(n - l) * (n + 1) * factorial(l) * factorial(l) *
                                            std::pow(2.0, 2 * l + 1) / (pi * factorial(n + l + 1)));
      }
    }
    for (int l = 0; l <= max_n; ++l) {
      for (int m = 0; m <= l; ++m) sph_norm_[l * w + m] = sph_norm(l, m);
    }
  }

  void eval(const UnitQuaternion& q, double* out) {
    const int w = max_n_ + 1;
    const double cpsi = std::clamp(q.w, -1.0, 1.0);
    const double r = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
    const double spsi = r;
    double ct = 1.0, st = 0.0, cp = 1.0, sp = 0.0;
    if (r > 1e-15) {
      ct = q.z / r;
      const double rho = std::sqrt(q.x * q.x + q.y * q.y);
      st = rho / r;
      if (rho > 1e-15) cp = q.x / rho, sp = q.y / rho;
    }
    legendre_table(max_n_, ct, st, legendre_);
    cosm_.assign(static_cast<std::size_t>(w), 1.0);
    sinm_.assign(static_cast<std::size_t>(w), 0.0);
    for (int m = 1; m <= max_n_; ++m) {
      cosm_[m] = cosm_[m - 1] * cp - sinm_[m - 1] * sp;
      sinm_[m] = sinm_[m - 1] * cp + cosm_[m - 1] * sp;
    }
    // Gegenbauer C_k^{l+1}(cos psi) for k + l <= max_n
    gegen_.assign(static_cast<std::size_t>(w * w), 0.0);
    for (int l = 0; l <= max_n_; ++l) {
      const double alpha = l + 1;
      for (int k = 0; k + l <= max_n_; ++k) {
        double c;
        if (k == 0) {
          c = 1.0;
        } else if (k == 1) {
          c = 2 * alpha * cpsi;
        } else {
          c = (2 * cpsi * (k + alpha - 1) * gegen_[(k - 1) * w + l] - (k + 2 * alpha - 2) * gegen_[(k - 2) * w + l]) / k;
        }
        gegen_[k * w + l] = c;
      }
    }
    std::size_t idx = 0;
    for (int n = 0; n <= max_n_; ++n) {
      double spow = 1.0;
      for (int l = 0; l <= n; ++l) {
        const double radial = radial_norm_[n * w + l] * spow * gegen_[(n - l) * w + l];
        for (int m = -l; m <= l; ++m) {
          const int am = std::abs(m);
          const double base = sph_norm_[l * w + am] * legendre_[l * w + am];
          double y;
          if (m == 0) {
            y = base;
          } else if (m > 0) {
            y = std::numbers::sqrt2 * base * cosm_[am];
          } else {
            y = std::numbers::sqrt2 * base * sinm_[am];
          }
          out[idx++] = radial * y;
        }
        spow *= spsi;
      }
    }
  }

 private:
  int max_n_;
  std::vector<double> radial_norm_, sph_norm_, legendre_, cosm_, sinm_, gegen_;
};

}  // namespace

std::size_t hsh_basis_size(int max_n) {
  std::size_t n = 0;
  for (int i = 0; i <= max_n; ++i) n += static_cast<std::size_t>((i + 1) * (i + 1));
  return n;
}

double gegenbauer(int k, double alpha, double x) {
  if (k < 0) throw ArgumentError("gegenbauer degree must be >= 0");
  if (!(alpha > 0)) throw ArgumentError("gegenbauer alpha must be > 0");
  double prev = 1.0;
  if (k == 0) return prev;
  double cur = 2 * alpha * x;
  for (int j = 2; j <= k; ++j) {
    const double next = (2 * x * (j + alpha - 1) * cur - (j + 2 * alpha - 2) * prev) / j;
    prev = cur;
    cur = next;
  }
  return cur;
}

double real_sph_harm(int l, int m, double theta, double phi) {
  if (l < 0 || std::abs(m) > l) {
    throw ArgumentError("real_sph_harm: need |m| <= l, got l=" + std::to_string(l) + " m=" + std::to_string(m));
  }
  std::vector<double> table;
  legendre_table(l, std::cos(theta), std::sin(theta), table);
  const int am = std::abs(m);
  const double base = sph_norm(l, am) * table[l * (l + 1) + am];
  if (m == 0) return base;
  return std::numbers::sqrt2 * base * (m > 0 ? std::cos(am * phi) : std::sin(am * phi));
}

std::vector<double> hsh_basis(const UnitQuaternion& q, int max_n) {
  HshEvaluator ev(max_n);
  std::vector<double> out(hsh_basis_size(max_n));
  ev.eval(q, out.data());
  return out;
}

std::vector<double> encode_rotation(const UnitQuaternion& q, const HshConfig& cfg) {
  const std::size_t full = hsh_basis_size(cfg.max_n);
  if (cfg.dim < 1 || static_cast<std::size_t>(cfg.dim) > full) {
    throw ArgumentError("hsh dim " + std::to_string(cfg.dim) + " exceeds the basis size " + std::to_string(full) +
                        " for max_n=" + std::to_string(cfg.max_n));
  }
  auto v = hsh_basis(q.canonical(), cfg.max_n);
  v.resize(static_cast<std::size_t>(cfg.dim));
  return v;
}

std::vector<float> encode_rotations(const RotationSet& set, const HshConfig& cfg) {
  const std::size_t full = hsh_basis_size(cfg.max_n);
  if (cfg.dim < 1 || static_cast<std::size_t>(cfg.dim) > full) {
    throw ArgumentError("hsh dim " + std::to_string(cfg.dim) + " exceeds the basis size " + std::to_string(full));
  }
  HshEvaluator ev(cfg.max_n);
  std::vector<double> buf(full);
  std::vector<float> out(set.size() * static_cast<std::size_t>(cfg.dim));
  for (std::size_t i = 0; i < set.size(); ++i) {
    ev.eval(set[i].canonical(), buf.data());
    for (int j = 0; j < cfg.dim; ++j) out[i * cfg.dim + j] = static_cast<float>(buf[j]);
  }
  return out;
}

double orthonormality_check(const HshConfig& cfg, std::size_t n_samples, std::uint64_t seed) {
  if (n_samples == 0) throw ArgumentError("orthonormality_check needs n_samples > 0");
  const std::size_t full = hsh_basis_size(cfg.max_n);
  if (cfg.dim < 1 || static_cast<std::size_t>(cfg.dim) > full) {
    throw ArgumentError("hsh dim " + std::to_string(cfg.dim) + " exceeds the basis size " + std::to_string(full));
  }
  const auto dim = static_cast<Eigen::Index>(cfg.dim);
  HshEvaluator ev(cfg.max_n);
  Rng rng(seed);
  constexpr std::size_t kChunk = 4096;
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> chunk(kChunk, full);
  for (std::size_t done = 0; done < n_samples; done += kChunk) {
    const std::size_t rows = std::min(kChunk, n_samples - done);
    for (std::size_t r = 0; r < rows; ++r) ev.eval(UnitQuaternion::random(rng), chunk.row(r).data());
    const auto block = chunk.topLeftCorner(static_cast<Eigen::Index>(rows), dim);
    gram.noalias() += block.transpose() * block;
  }
  gram *= 2 * pi * pi / static_cast<double>(n_samples);
  return (gram - Eigen::MatrixXd::Identity(dim, dim)).cwiseAbs().maxCoeff();
}

}  // namespace poselatent
