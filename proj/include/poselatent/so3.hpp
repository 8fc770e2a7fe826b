#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "poselatent/random.hpp"

namespace poselatent {

// Unit quaternion (w, x, y, z). q and -q are the same rotation.
struct UnitQuaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  UnitQuaternion() = default;
  // Normalizes the input; throws ArgumentError on a zero vector.
  UnitQuaternion(double w, double x, double y, double z);

  static UnitQuaternion from_matrix(const Eigen::Matrix3d& r);
  static UnitQuaternion from_axis_angle(const Eigen::Vector3d& axis, double angle);
  // Haar-uniform sample (Shoemake), not canonicalized.
  static UnitQuaternion random(Rng& rng);

  Eigen::Matrix3d matrix() const;
  Eigen::Vector3d rotate(const Eigen::Vector3d& v) const { return matrix() * v; }
  UnitQuaternion conjugate() const { return raw(w, -x, -y, -z); }
  UnitQuaternion negated() const { return raw(-w, -x, -y, -z); }
  // Sign convention: w >= 0; when w == 0 the first nonzero of x, y, z is positive.
  UnitQuaternion canonical() const;
  double dot(const UnitQuaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }

  // Builds without renormalizing; caller guarantees unit norm.
  static UnitQuaternion raw(double w, double x, double y, double z) {
    UnitQuaternion q;
    q.w = w, q.x = x, q.y = y, q.z = z;
    return q;
  }
};

UnitQuaternion operator*(const UnitQuaternion& a, const UnitQuaternion& b);

// In-plane (beta), zenith (theta), azimuth (phi) in radians.
struct ViewAngles {
  double beta = 0.0;
  double theta = 0.0;
  double phi = 0.0;
};

struct ViewDirection {
  double theta = 0.0;
  double phi = 0.0;
};

enum class RotationProvenance { equidistant, kmeans, explicit_list };

std::string to_string(RotationProvenance p);
RotationProvenance provenance_from_string(const std::string& s);

struct RotationSet {
  std::vector<UnitQuaternion> rotations;
  RotationProvenance provenance = RotationProvenance::explicit_list;
  int level = -1;
  int n_inplane = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return rotations.size(); }
  const UnitQuaternion& operator[](std::size_t i) const { return rotations[i]; }
};

struct SymmetryGroup {
  enum class Kind { trivial, cyclic, continuous };
  Kind kind = Kind::trivial;
  int order = 1;  // cyclic only
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();

  static SymmetryGroup trivial() { return {}; }
  static SymmetryGroup cyclic(int k, const Eigen::Vector3d& axis = Eigen::Vector3d::UnitZ());
  static SymmetryGroup continuous(const Eigen::Vector3d& axis = Eigen::Vector3d::UnitZ());

  // Group elements; continuous groups are discretized into `continuous_steps`.
  std::vector<UnitQuaternion> elements(int continuous_steps = 360) const;
  std::string describe() const;
};

// Rz(phi) * Ry(theta) * Rz(beta), sign-canonicalized.
UnitQuaternion quat_from_view(const ViewAngles& v);

// Inverse of quat_from_view with beta, phi in (-pi, pi]. At theta = 0 or pi
// only beta +- phi is defined and phi is reported as 0.
ViewAngles view_angles(const UnitQuaternion& q);

// 2 arccos(min(1, |q1 . q2|)) in [0, pi].
double geodesic_distance(const UnitQuaternion& a, const UnitQuaternion& b);

// Vertices of an icosahedron subdivided `level` times (10 * 4^level + 2 of
// them), as zenith/azimuth sorted by theta then phi. level must be <= 6.
std::vector<ViewDirection> sample_equidistant_views(int level);

// Cross product of views with n_inplane equally spaced in-plane angles in
// [0, 2pi); view-major ordering.
RotationSet build_reference_rotations(const std::vector<ViewDirection>& views, int n_inplane);

// Double-cover aware k-means with k-means++ seeding. The per-iteration total
// of squared within-cluster distances is appended to `history` when given.
RotationSet quat_kmeans(const RotationSet& data, std::size_t k, std::uint64_t seed, int iters = 100,
                        std::vector<double>* history = nullptr);

// min_s geodesic_distance(q_est, q_gt * s) over the symmetry group.
double symmetry_aware_error(const UnitQuaternion& q_est, const UnitQuaternion& q_gt, const SymmetryGroup& sym);

// Haar-uniform rotations, canonicalized.
RotationSet random_rotations(std::size_t n, std::uint64_t seed);

}  // namespace poselatent
