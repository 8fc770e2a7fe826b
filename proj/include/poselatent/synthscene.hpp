#pragma once

// Procedural objects, a z-buffer rasterizer and the dataset writer.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "poselatent/random.hpp"
#include "poselatent/so3.hpp"

namespace poselatent {

struct Mesh {
  std::vector<Eigen::Vector3d> vertices;  // mm, object frame
  std::vector<Eigen::Vector3d> normals;   // per vertex
  std::vector<Eigen::Vector3d> colors;    // per vertex, [0,1]
  std::vector<std::array<std::uint32_t, 3>> triangles;

  Eigen::Vector3d bbox_min() const;
  Eigen::Vector3d bbox_max() const;
  Eigen::Vector3d extent() const { return bbox_max() - bbox_min(); }
  // Throws ValidationError on out-of-range indices or zero-area triangles.
  void validate() const;
};

enum class ObjectKind { cylinder, box, cone, lprism, mug };

std::string to_string(ObjectKind k);
ObjectKind object_kind_from_string(const std::string& s);

// Size fields used per kind:
//   box      width (x), depth (y), height (z)
//   cylinder radius, height
//   cone     radius, height
//   lprism   width and depth are the two arm lengths, thickness the arm width,
//            height the extrusion
//   mug      radius, height, thickness (handle tube radius)
struct ObjectSpec {
  std::string id;
  ObjectKind kind = ObjectKind::box;
  double width = 0, depth = 0, height = 0, radius = 0, thickness = 0;
  SymmetryGroup symmetry;
  Eigen::Vector3d color{0.7, 0.7, 0.7};

  // The rotational symmetry the primitive actually has.
  static SymmetryGroup natural_symmetry(const ObjectSpec& s);
  // Checks sizes and that `symmetry` matches the kind.
  void validate() const;
};

nlohmann::json to_json(const SymmetryGroup& g);
SymmetryGroup symmetry_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ObjectSpec& s);
ObjectSpec object_spec_from_json(const nlohmann::json& j);

// Five objects covering continuous, cyclic and trivial symmetry.
std::vector<ObjectSpec> default_corpus();

Mesh make_primitive(const ObjectSpec& spec);

struct Camera {
  double fx = 140, fy = 140, cx = 16, cy = 16;
  int height = 32, width = 32;
  double z_ref = 500;  // mm

  void validate() const;
  std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
};

nlohmann::json to_json(const Camera& c);
Camera camera_from_json(const nlohmann::json& j);

struct Pose {
  UnitQuaternion rotation;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  // mm
};

struct Sample {
  std::vector<float> rgb;    // [3, H, W]
  std::vector<float> depth;  // [H, W], mm, 0 = background
  int object = -1;
  Pose pose;
  Camera camera;
};

// Light direction in camera coordinates, pointing from the surface towards the light.
inline Eigen::Vector3d default_light_dir() { return Eigen::Vector3d(0.35, -0.45, -1.0).normalized(); }

// Pixel (row i, column j) samples the image point u = j, v = i.
Sample rasterize(const Mesh& mesh, const Pose& pose, const Camera& camera,
                 const Eigen::Vector3d& light_dir = default_light_dir(),
                 const Eigen::Vector3d& background = Eigen::Vector3d::Zero());

struct AugmentParams {
  bool replace_background = false;
  Eigen::Vector3d background{0, 0, 0};
  double brightness = 1.0;
  Eigen::Vector3d channel{1, 1, 1};
  double contrast = 1.0;
  double scale = 1.0;  // in-plane zoom about the image center

  static AugmentParams identity() { return {}; }
  static AugmentParams sample(Rng& rng);
};

// rgb [3,H,W] in [0,1]; depth [H,W] marks the background (depth == 0).
std::vector<float> apply_augment(const std::vector<float>& rgb, const std::vector<float>& depth, int height, int width,
                                 const AugmentParams& p);
std::vector<float> augment(const std::vector<float>& rgb, const std::vector<float>& depth, int height, int width,
                           Rng& rng);

struct DatasetConfig {
  std::vector<ObjectSpec> objects;
  RotationSet rotations;
  Camera camera;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.05;
  std::size_t shard_size = 1000;
  Eigen::Vector3d light_dir = default_light_dir();
};

// Renders every (object, rotation) pair at translation (0, 0, z_ref) and
// writes manifest.json plus shard_%04d.fta files. Returns the manifest.
nlohmann::json generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

// {"kind": "random", "count", "seed"} | {"kind": "equidistant", "level",
// "n_inplane"} | {"kind": "kmeans", "count", "pool", "seed"} |
// {"kind": "explicit", "quaternions": [[w, x, y, z], ...]}.
RotationSet rotation_set_from_json(const nlohmann::json& j);

// {"objects": [id or spec, ...], "rotations": {"kind": "random" | "equidistant"
// | "kmeans" | "explicit", ...}, "camera", "seed", "holdout_fraction",
// "shard_size", "light_dir"}. Unknown keys are rejected.
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

enum class Split { train, holdout };

// In-memory dataset; image tensors are contiguous [N,3,H,W] and [N,1,H,W].
struct Dataset {
  std::vector<ObjectSpec> objects;
  Camera camera;
  std::vector<float> rgb;
  std::vector<float> depth;
  std::vector<int> object;
  std::vector<std::size_t> rotation_index;
  std::vector<UnitQuaternion> rotation;
  std::vector<std::uint64_t> seed;
  std::vector<Split> split;
  RotationSet rotations;
  nlohmann::json manifest;

  std::size_t size() const { return object.size(); }
  std::size_t image_numel() const { return 3 * camera.pixels(); }
  std::vector<std::size_t> indices(Split s) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Builds the same samples in memory without touching disk.
Dataset render_dataset(const DatasetConfig& cfg);

}  // namespace poselatent
