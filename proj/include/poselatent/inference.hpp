#pragma once

// Pose codebooks, nearest-code rotation retrieval and translation estimation.

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "poselatent/hsh.hpp"
#include "poselatent/model.hpp"
#include "poselatent/so3.hpp"
#include "poselatent/synthscene.hpp"

namespace poselatent {

enum class CodebookMode { conditioned, rendered };

std::string to_string(CodebookMode m);
CodebookMode codebook_mode_from_string(const std::string& s);

// Where a rendered codebook row was observed, for the pinhole translation model.
struct RenderMeta {
  double bbox_diagonal_px = 0;
  double distance_mm = 0;
};

struct PoseCodebook {
  std::vector<float> codes;  // row-major [N, d]
  std::size_t d = 0;
  RotationSet rotations;
  CodebookMode mode = CodebookMode::conditioned;
  std::vector<RenderMeta> render_meta;  // rendered mode only
  std::string object_id;
  HshConfig hsh;

  std::size_t size() const { return d ? codes.size() / d : 0; }
  std::span<const float> row(std::size_t i) const { return {codes.data() + i * d, d}; }
  // Row count matches the rotations, codes are finite.
  void validate() const;
};

struct PoseEstimate {
  UnitQuaternion rotation;
  std::optional<Eigen::Vector3d> translation;  // mm
  std::optional<double> scale;
  double score = 0;
  std::size_t index = 0;
  std::vector<std::pair<std::size_t, double>> top_k;  // descending score
};

nlohmann::json to_json(const PoseEstimate& e);

struct LatentCodes {
  std::vector<float> z_o, z_p;  // row-major [N, d]
  std::size_t n = 0, d = 0;
};

// Encodes N images [N, 3, H, W] in chunks without recording gradients.
LatentCodes encode_images(const Network<float>& net, std::span<const float> rgb, std::size_t n,
                          std::size_t chunk = 256);

// Rows are condition_pose(z_o / ||z_o||, encode_rotation(q)); training conditions on unit
// codes too. z_o has d entries and is ignored by the mlp_nocond variant.
PoseCodebook build_codebook_conditioned(const Network<float>& net, std::span<const float> z_o,
                                        const RotationSet& rotations);
// Same, reusing FC_h features of the rotation set ([N, d], see rotation_features).
PoseCodebook build_codebook_conditioned(const Network<float>& net, std::span<const float> z_o,
                                        const RotationSet& rotations, const TensorF& features);
TensorF codebook_rotation_features(const Network<float>& net, const RotationSet& rotations);

// Rows are the z_p of renders at (q, (0, 0, camera.z_ref)).
PoseCodebook build_codebook_rendered(const Network<float>& net, const Mesh& mesh, const RotationSet& rotations,
                                     const Camera& camera, const Eigen::Vector3d& light_dir = default_light_dir());

// Exact cosine argmax over every row; ties go to the lowest row index.
// Throws NumericError on a zero query.
PoseEstimate retrieve_rotation(std::span<const float> z_p, const PoseCodebook& codebook, std::size_t k = 5);

void save_codebook(const std::filesystem::path& path, const PoseCodebook& cb);
PoseCodebook load_codebook(const std::filesystem::path& path);

struct BoundingBox2D {
  double u = 0, v = 0;  // center, px
  double diagonal = 0;  // px
};

// Box of the pixels with depth > 0; nullopt when there are none.
std::optional<BoundingBox2D> depth_bbox(std::span<const float> depth, int height, int width);

Eigen::Vector3d estimate_translation_pinhole(const BoundingBox2D& detected, const RenderMeta& row,
                                             const Camera& camera);

using PointCloud = std::vector<Eigen::Vector3d>;

struct IcpResult {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double scale = 1;
  double mean_distance = 0;
  int iterations = 0;  // accepted updates

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * (rotation * p) + translation; }
};

// Point-to-point ICP moving src onto dst: nearest neighbours from a uniform
// grid, closed-form least-squares fit per iteration, stop once the mean
// correspondence distance improves by less than tol. An update that would
// increase the distance is discarded. With `fit_scale` the per-iteration fit
// is a similarity transform. Throws RefinementError when either cloud has
// fewer than 3 points or rank < 3.
IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, int max_iters = 30, double tol = 1e-4,
                     bool fit_scale = false);

// Points of the pixels with depth > 0. subdivide > 1 adds a
// subdivide x subdivide lattice inside every smooth pixel quad.
PointCloud back_project(std::span<const float> depth, const Camera& camera, int subdivide = 1);

struct DepthAlignment {
  double scale = 1;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // correction found by ICP
  double rough_scale = 1;
  Eigen::Vector3d rough_translation = Eigen::Vector3d::Zero();
  bool refined = false;
  double mean_distance = 0;
};

// observed ~ rotation * (scale * predicted) + translation for the points
// back-projected from both maps. The bounding-box guess seeds ICP; when ICP
// rejects the clouds the rough guess is returned with refined = false.
// Throws EstimationError when either map has fewer than 20 valid pixels.
DepthAlignment estimate_translation_depth(std::span<const float> depth_pred, std::span<const float> depth_obs,
                                          const Camera& camera, int icp_iters = 30);

}  // namespace poselatent
