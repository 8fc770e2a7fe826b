#include "poselatent/so3.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "poselatent/errors.hpp"

namespace poselatent {

using std::numbers::pi;

UnitQuaternion::UnitQuaternion(double w_, double x_, double y_, double z_) {
  const double n = std::sqrt(w_ * w_ + x_ * x_ + y_ * y_ + z_ * z_);
  if (!(n > 1e-300)) throw ArgumentError("quaternion has zero norm");
  w = w_ / n, x = x_ / n, y = y_ / n, z = z_ / n;
}

UnitQuaternion UnitQuaternion::from_matrix(const Eigen::Matrix3d& r) {
  Eigen::Quaterniond q(r);
  return UnitQuaternion(q.w(), q.x(), q.y(), q.z());
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Eigen::Vector3d& axis, double angle) {
  const Eigen::Vector3d a = axis.normalized();
  const double s = std::sin(angle / 2);
  return UnitQuaternion(std::cos(angle / 2), s * a.x(), s * a.y(), s * a.z());
}

UnitQuaternion UnitQuaternion::random(Rng& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1 - u1), b = std::sqrt(u1);
  return UnitQuaternion(a * std::sin(2 * pi * u2), a * std::cos(2 * pi * u2), b * std::sin(2 * pi * u3),
                        b * std::cos(2 * pi * u3));
}

Eigen::Matrix3d UnitQuaternion::matrix() const {
  Eigen::Matrix3d m;
  m << 1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),  //
      2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),   //
      2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y);
  return m;
}

UnitQuaternion UnitQuaternion::canonical() const {
  const std::array<double, 4> c{w, x, y, z};
  for (double v : c) {
    if (v > 0) return *this;
    if (v < 0) return negated();
  }
  return *this;
}

UnitQuaternion operator*(const UnitQuaternion& a, const UnitQuaternion& b) {
  return UnitQuaternion(a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w);
}

std::string to_string(RotationProvenance p) {
  switch (p) {
    case RotationProvenance::equidistant: return "equidistant";
    case RotationProvenance::kmeans: return "kmeans";
    case RotationProvenance::explicit_list: return "explicit";
  }
  return "explicit";
}

RotationProvenance provenance_from_string(const std::string& s) {
  if (s == "equidistant") return RotationProvenance::equidistant;
  if (s == "kmeans") return RotationProvenance::kmeans;
  if (s == "explicit") return RotationProvenance::explicit_list;
  throw ArgumentError("unknown rotation provenance '" + s + "'");
}

SymmetryGroup SymmetryGroup::cyclic(int k, const Eigen::Vector3d& axis) {
  if (k < 2) throw ArgumentError("cyclic symmetry order must be >= 2");
  SymmetryGroup g;
  g.kind = Kind::cyclic;
  g.order = k;
  g.axis = axis.normalized();
  return g;
}

SymmetryGroup SymmetryGroup::continuous(const Eigen::Vector3d& axis) {
  SymmetryGroup g;
  g.kind = Kind::continuous;
  g.axis = axis.normalized();
  return g;
}

std::vector<UnitQuaternion> SymmetryGroup::elements(int continuous_steps) const {
  const int n = kind == Kind::trivial ? 1 : kind == Kind::cyclic ? order : continuous_steps;
  std::vector<UnitQuaternion> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(UnitQuaternion::from_axis_angle(axis, 2 * pi * i / n));
  return out;
}

std::string SymmetryGroup::describe() const {
  switch (kind) {
    case Kind::trivial: return "trivial";
    case Kind::cyclic: return "cyclic-" + std::to_string(order);
    case Kind::continuous: return "continuous";
  }
  return "trivial";
}

UnitQuaternion quat_from_view(const ViewAngles& v) {
  const Eigen::Vector3d z = Eigen::Vector3d::UnitZ(), y = Eigen::Vector3d::UnitY();
  const UnitQuaternion q =
      UnitQuaternion::from_axis_angle(z, v.phi) * UnitQuaternion::from_axis_angle(y, v.theta) *
      UnitQuaternion::from_axis_angle(z, v.beta);
  return q.canonical();
}

ViewAngles view_angles(const UnitQuaternion& q) {
  const Eigen::Matrix3d r = q.matrix();
  ViewAngles v;
  v.theta = std::acos(std::clamp(r(2, 2), -1.0, 1.0));
  if (std::hypot(r(0, 2), r(1, 2)) > 1e-12) {
    v.phi = std::atan2(r(1, 2), r(0, 2));
    v.beta = std::atan2(r(2, 1), -r(2, 0));
  } else if (r(2, 2) > 0) {
    v.beta = std::atan2(r(1, 0), r(0, 0));
  } else {
    v.beta = std::atan2(r(1, 0), r(1, 1));
  }
  return v;
}

double geodesic_distance(const UnitQuaternion& a, const UnitQuaternion& b) {
  return 2.0 * std::acos(std::min(1.0, std::abs(a.dot(b))));
}

std::vector<ViewDirection> sample_equidistant_views(int level) {
  if (level < 0 || level > 6) throw ArgumentError("icosahedron subdivision level must be in [0, 6]");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> verts = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                                        {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<std::array<int, 3>> faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                           {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                           {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                           {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int id = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces = std::move(next);
  }
  std::vector<ViewDirection> views;
  views.reserve(verts.size());
  for (const auto& v : verts) {
    const double theta = std::acos(std::clamp(v.z(), -1.0, 1.0));
    double phi = std::atan2(v.y(), v.x());
    if (phi < 0) phi += 2 * pi;
    views.push_back({theta, phi});
  }
  std::sort(views.begin(), views.end(), [](const ViewDirection& a, const ViewDirection& b) {
    return a.theta != b.theta ? a.theta < b.theta : a.phi < b.phi;
  });
  return views;
}

RotationSet build_reference_rotations(const std::vector<ViewDirection>& views, int n_inplane) {
  if (n_inplane < 1) throw ArgumentError("n_inplane must be >= 1");
  if (views.empty()) throw ArgumentError("reference rotations need at least one view");
  RotationSet set;
  set.provenance = RotationProvenance::equidistant;
  set.n_inplane = n_inplane;
  set.rotations.reserve(views.size() * static_cast<std::size_t>(n_inplane));
  for (const auto& v : views) {
    for (int k = 0; k < n_inplane; ++k) {
      set.rotations.push_back(quat_from_view({2 * pi * k / n_inplane, v.theta, v.phi}));
    }
  }
  return set;
}

namespace {

double chordal(const UnitQuaternion& p, const UnitQuaternion& q) {
  const double dm = (p.w - q.w) * (p.w - q.w) + (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y) +
                    (p.z - q.z) * (p.z - q.z);
  const double dp = (p.w + q.w) * (p.w + q.w) + (p.x + q.x) * (p.x + q.x) + (p.y + q.y) * (p.y + q.y) +
                    (p.z + q.z) * (p.z + q.z);
  return std::sqrt(std::min(dm, dp));
}

}  // namespace

RotationSet quat_kmeans(const RotationSet& data, std::size_t k, std::uint64_t seed, int iters,
                        std::vector<double>* history) {
  const std::size_t n = data.size();
  if (k == 0 || k > n) {
    throw ArgumentError("quat_kmeans: k=" + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  }
  Rng rng(seed);
  std::vector<UnitQuaternion> centers;
  centers.reserve(k);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::vector<char> used(n, 0);
  std::size_t first = rng.below(n);
  centers.push_back(data[first]);
  used[first] = 1;
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = chordal(data[i], centers.back());
      nearest[i] = std::min(nearest[i], d * d);
      total += used[i] ? 0.0 : nearest[i];
    }
    std::size_t pick = n;
    if (total > 0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (used[i]) continue;
        target -= nearest[i];
        if (target < 0) {
          pick = i;
          break;
        }
      }
    }
    if (pick == n) {
      // All remaining points coincide with a center (or rounding ran off the end).
      for (std::size_t i = n; i-- > 0;) {
        if (!used[i]) {
          pick = i;
          break;
        }
      }
    }
    used[pick] = 1;
    centers.push_back(data[pick]);
  }

  std::vector<std::size_t> assign(n, k);
  for (int it = 0; it < iters; ++it) {
    bool changed = false;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = chordal(data[i], centers[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double d = chordal(data[i], centers[c]);
        if (d < best_d) best_d = d, best = c;
      }
      total += best_d * best_d;
      if (assign[i] != best) changed = true, assign[i] = best;
    }
    if (history) history->push_back(total);
    if (!changed) break;
    std::vector<Eigen::Vector4d> acc(k, Eigen::Vector4d::Zero());
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = centers[assign[i]];
      const double s = data[i].dot(c) < 0 ? -1.0 : 1.0;
      acc[assign[i]] += s * Eigen::Vector4d(data[i].w, data[i].x, data[i].y, data[i].z);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (acc[c].norm() > 1e-12) centers[c] = UnitQuaternion(acc[c][0], acc[c][1], acc[c][2], acc[c][3]);
    }
  }
  RotationSet out;
  out.provenance = RotationProvenance::kmeans;
  out.seed = seed;
  for (auto& c : centers) c = c.canonical();
  out.rotations = std::move(centers);
  return out;
}

double symmetry_aware_error(const UnitQuaternion& q_est, const UnitQuaternion& q_gt, const SymmetryGroup& sym) {
  double best = pi;
  for (const auto& s : sym.elements()) best = std::min(best, geodesic_distance(q_est, q_gt * s));
  return best;
}

RotationSet random_rotations(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  RotationSet set;
  set.seed = seed;
  set.rotations.reserve(n);
  for (std::size_t i = 0; i < n; ++i) set.rotations.push_back(UnitQuaternion::random(rng).canonical());
  return set;
}

}  // namespace poselatent
