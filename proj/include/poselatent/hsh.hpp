#pragma once

// Rotation encoding with real 4D hyperspherical harmonics.
//
// A unit quaternion q = (w, x, y, z) is written in hyperspherical
// coordinates as w = cos(psi), (x, y, z) = sin(psi) (sin T cos P, sin T sin P,
// cos T) with psi in [0, pi]. The basis is
//
//   Z_nlm(q) = N_nl sin^l(psi) C_{n-l}^{l+1}(cos psi) Y_lm(T, P)
//
// for 0 <= l <= n <= max_n, -l <= m <= l, orthonormal on S^3 (volume 2 pi^2).
// Y_lm are real orthonormal spherical harmonics without the Condon-Shortley
// phase. Components are flattened in lexicographic (n, l, m) order and the
// vector is truncated to `dim` entries.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "poselatent/so3.hpp"

namespace poselatent {

struct HshConfig {
  int max_n = 6;
  int dim = 128;
};

// sum_{n<=max_n} (n+1)^2
std::size_t hsh_basis_size(int max_n);

double gegenbauer(int k, double alpha, double x);

// Real orthonormal spherical harmonic on S^2 (no Condon-Shortley phase).
// Throws ArgumentError when |m| > l.
double real_sph_harm(int l, int m, double theta, double phi);

// Full basis (hsh_basis_size(max_n) values) at q, no sign canonicalization.
std::vector<double> hsh_basis(const UnitQuaternion& q, int max_n);

// Encodes the canonicalized rotation; throws ArgumentError when cfg.dim
// exceeds the basis size.
std::vector<double> encode_rotation(const UnitQuaternion& q, const HshConfig& cfg);

// Row-major [N, cfg.dim] matrix of encodings.
std::vector<float> encode_rotations(const RotationSet& set, const HshConfig& cfg);

// Max |G - I| entry of the Monte Carlo Gram matrix of the first cfg.dim basis
// functions, with q drawn uniformly from S^3 (the double cover of Haar
// measure on SO(3)).
double orthonormality_check(const HshConfig& cfg, std::size_t n_samples, std::uint64_t seed);

}  // namespace poselatent
