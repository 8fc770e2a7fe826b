#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "poselatent/errors.hpp"
#include "poselatent/synthscene.hpp"

using namespace poselatent;
using std::numbers::pi;
namespace fs = std::filesystem;

namespace {

ObjectSpec spec_of(const std::string& id) {
  for (auto& s : default_corpus()) {
    if (s.id == id) return s;
  }
  throw std::runtime_error("no object " + id);
}

// Smallest max-distance for matching the rotated vertex set onto the original.
bool maps_onto_itself(const Mesh& m, const UnitQuaternion& q, double tol) {
  const Eigen::Matrix3d R = q.matrix();
  for (const auto& v : m.vertices) {
    const Eigen::Vector3d r = R * v;
    bool hit = false;
    for (const auto& w : m.vertices) {
      if ((r - w).norm() < tol) {
        hit = true;
        break;
      }
    }
    if (!hit) return false;
  }
  return true;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a[i] - b[i])));
  return m;
}

double max_rel_depth_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]) / std::max(1.0f, std::max(a[i], b[i]));
    m = std::max(m, d);
  }
  return m;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("poselatent_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("primitive geometry") {
  ObjectSpec b;
  b.id = "b", b.kind = ObjectKind::box, b.width = 40, b.depth = 40, b.height = 80;
  b.symmetry = ObjectSpec::natural_symmetry(b);
  auto box = make_primitive(b);
  CHECK(box.triangles.size() == 12);
  CHECK((box.extent() - Eigen::Vector3d(40, 40, 80)).norm() == 0.0);

  ObjectSpec c;
  c.id = "c", c.kind = ObjectKind::cylinder, c.radius = 20, c.height = 60;
  c.symmetry = ObjectSpec::natural_symmetry(c);
  auto cyl = make_primitive(c);
  CHECK((cyl.extent() - Eigen::Vector3d(40, 40, 60)).norm() < 1e-12);

  for (const auto& s : default_corpus()) {
    auto m = make_primitive(s);
    CHECK_NOTHROW(m.validate());
    const Eigen::Vector3d center = 0.5 * (m.bbox_min() + m.bbox_max());
    CHECK(center.norm() < 1e-3);
  }

  ObjectSpec bad = c;
  bad.radius = -1;
  CHECK_THROWS_AS(make_primitive(bad), ArgumentError);
  ObjectSpec wrong_sym = c;
  wrong_sym.symmetry = SymmetryGroup::trivial();
  CHECK_THROWS_AS(wrong_sym.validate(), ValidationError);
}

TEST_CASE("lprism has no rotational symmetry about z") {
  auto m = make_primitive(spec_of("lprism"));
  for (int deg = 1; deg < 360; ++deg) {
    auto q = UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitZ(), deg * pi / 180);
    CHECK_FALSE(maps_onto_itself(m, q, 0.1));
  }
}

TEST_CASE("declared symmetries map the vertex sets onto themselves") {
  auto box = make_primitive(spec_of("box"));
  CHECK(maps_onto_itself(box, UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitZ(), pi / 2), 1e-6));
  auto cyl = make_primitive(spec_of("cylinder"));
  CHECK(maps_onto_itself(cyl, UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitZ(), 7.5 * pi / 180), 1e-6));
  // the tinted cap breaks the upside-down flip
  auto flip = UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitX(), pi);
  auto r1 = rasterize(cyl, {UnitQuaternion{}, {0, 0, 500}}, Camera{});
  auto r2 = rasterize(cyl, {flip, {0, 0, 500}}, Camera{});
  CHECK(max_abs_diff(r1.rgb, r2.rgb) > 0.05);
}

TEST_CASE("rasterize basics") {
  Camera cam;
  auto empty = rasterize(Mesh{}, {UnitQuaternion{}, {0, 0, 500}}, cam, default_light_dir(), {0.1, 0.2, 0.3});
  for (std::size_t i = 0; i < cam.pixels(); ++i) {
    CHECK(empty.depth[i] == 0.0f);
    CHECK(empty.rgb[i] == 0.1f);
    CHECK(empty.rgb[2 * cam.pixels() + i] == 0.3f);
  }

  Mesh sq;
  const Eigen::Vector3d n(0, 0, -1), col(1, 1, 1);
  for (auto [x, y] : {std::pair{-10.0, -10.0}, {10.0, -10.0}, {10.0, 10.0}, {-10.0, 10.0}}) {
    sq.vertices.emplace_back(x, y, 0);
    sq.normals.push_back(n);
    sq.colors.push_back(col);
  }
  sq.triangles = {{0, 1, 2}, {0, 2, 3}};
  auto s = rasterize(sq, {UnitQuaternion{}, {0, 0, 1000}}, cam);
  CHECK(s.depth[16 * 32 + 16] == 1000.0f);
  // square spans +-10 mm at 1 m: +-1.4 px around the principal point
  CHECK(s.depth[16 * 32 + 18] == 0.0f);
  CHECK(s.depth[17 * 32 + 17] == 1000.0f);

  CHECK_THROWS_AS(rasterize(sq, {UnitQuaternion{}, {0, 0, -100}}, cam), RenderError);
}

TEST_CASE("depth is perspective correct on a tilted plane") {
  Mesh sq;
  for (auto [x, y] : {std::pair{-40.0, -40.0}, {40.0, -40.0}, {40.0, 40.0}, {-40.0, 40.0}}) {
    sq.vertices.emplace_back(x, y, 0);
    sq.normals.emplace_back(0, 0, 1);
    sq.colors.emplace_back(0.5, 0.5, 0.5);
  }
  sq.triangles = {{0, 1, 2}, {0, 2, 3}};
  Camera cam;
  const auto q = UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitY(), 0.6);
  const Eigen::Vector3d t(0, 0, 400);
  auto s = rasterize(sq, {q, t}, cam);
  // plane through t with normal R*z; intersect each pixel ray
  const Eigen::Vector3d pn = q.matrix() * Eigen::Vector3d::UnitZ();
  int covered = 0;
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      const float d = s.depth[i * cam.width + j];
      if (d == 0) continue;
      ++covered;
      const Eigen::Vector3d ray((j - cam.cx) / cam.fx, (i - cam.cy) / cam.fy, 1);
      const double z = pn.dot(t) / pn.dot(ray);
      CHECK(d == doctest::Approx(z).epsilon(1e-6));
    }
  }
  CHECK(covered > 100);
}

TEST_CASE("renders are invariant under declared symmetries") {
  Rng rng(31);
  Camera cam;
  for (const auto& spec : default_corpus()) {
    if (spec.symmetry.kind == SymmetryGroup::Kind::trivial) continue;
    auto mesh = make_primitive(spec);
    std::vector<UnitQuaternion> elems;
    if (spec.symmetry.kind == SymmetryGroup::Kind::cyclic) {
      elems = spec.symmetry.elements();
    } else {
      for (int k : {1, 5, 12, 31}) elems.push_back(UnitQuaternion::from_axis_angle(spec.symmetry.axis, k * 7.5 * pi / 180));
    }
    for (int trial = 0; trial < 3; ++trial) {
      const auto p = UnitQuaternion::random(rng);
      auto base = rasterize(mesh, {p, {0, 0, cam.z_ref}}, cam);
      for (const auto& s : elems) {
        auto other = rasterize(mesh, {p * s, {0, 0, cam.z_ref}}, cam);
        INFO(spec.id << " element " << s.w << "," << s.z);
        CHECK(max_abs_diff(base.rgb, other.rgb) < 1e-5);
        CHECK(max_rel_depth_diff(base.depth, other.depth) < 1e-5);
      }
    }
  }
}

TEST_CASE("depth and rgb silhouettes coincide") {
  Rng rng(37);
  Camera cam;
  for (const auto& spec : default_corpus()) {
    auto mesh = make_primitive(spec);
    auto s = rasterize(mesh, {UnitQuaternion::random(rng), {0, 0, cam.z_ref}}, cam);
    const std::size_t P = cam.pixels();
    for (std::size_t px = 0; px < P; ++px) {
      const bool shaded = s.rgb[px] + s.rgb[P + px] + s.rgb[2 * P + px] > 0;
      CHECK(shaded == (s.depth[px] > 0));
    }
  }
}

TEST_CASE("camera roll rotates the image") {
  Camera cam;
  cam.height = cam.width = 64;
  cam.fx = cam.fy = 280;
  cam.cx = cam.cy = 32;
  const Eigen::Vector3d light(0, 0, -1);
  Rng rng(41);
  auto mesh = make_primitive(spec_of("lprism"));
  for (double beta : {0.4, -1.1, 2.5}) {
    const auto p = UnitQuaternion::random(rng);
    const auto roll = UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitZ(), beta);
    auto a = rasterize(mesh, {p, {0, 0, 500}}, cam, light);
    auto b = rasterize(mesh, {roll * p, {0, 0, 500}}, cam, light);
    // b(u) should equal a(R(-beta)(u - c) + c), sampled bilinearly
    const std::size_t P = cam.pixels();
    double total = 0;
    for (int i = 0; i < cam.height; ++i) {
      for (int j = 0; j < cam.width; ++j) {
        const double du = j - cam.cx, dv = i - cam.cy;
        const double su = std::cos(beta) * du + std::sin(beta) * dv + cam.cx;
        const double sv = -std::sin(beta) * du + std::cos(beta) * dv + cam.cy;
        const int j0 = static_cast<int>(std::floor(su)), i0 = static_cast<int>(std::floor(sv));
        const double fu = su - j0, fv = sv - i0;
        for (int c = 0; c < 3; ++c) {
          auto at = [&](int ii, int jj) -> double {
            if (ii < 0 || jj < 0 || ii >= cam.height || jj >= cam.width) return 0.0;
            return a.rgb[c * P + ii * cam.width + jj];
          };
          const double v = (1 - fv) * ((1 - fu) * at(i0, j0) + fu * at(i0, j0 + 1)) +
                           fv * ((1 - fu) * at(i0 + 1, j0) + fu * at(i0 + 1, j0 + 1));
          total += std::abs(v - b.rgb[c * P + i * cam.width + j]);
        }
      }
    }
    const double mad = total / (3.0 * P);
    INFO("beta " << beta << " mean abs diff " << mad);
    CHECK(mad < 2e-2);
  }
}

TEST_CASE("augmentation") {
  Camera cam;
  auto mesh = make_primitive(spec_of("mug"));
  auto s = rasterize(mesh, {UnitQuaternion{}, {0, 0, 500}}, cam);
  auto same = apply_augment(s.rgb, s.depth, cam.height, cam.width, AugmentParams::identity());
  CHECK(same == s.rgb);

  Rng r1(5), r2(5);
  CHECK(augment(s.rgb, s.depth, 32, 32, r1) == augment(s.rgb, s.depth, 32, 32, r2));

  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    auto out = augment(s.rgb, s.depth, 32, 32, rng);
    bool ok = true;
    for (float v : out) ok = ok && v >= 0.0f && v <= 1.0f && std::isfinite(v);
    REQUIRE(ok);
  }

  AugmentParams bg;
  bg.replace_background = true;
  bg.background = {0.25, 0.5, 0.75};
  auto swapped = apply_augment(s.rgb, s.depth, 32, 32, bg);
  CHECK(swapped[0] == 0.25f);
  CHECK(swapped[2 * 1024] == 0.75f);
  CHECK_THROWS_AS(apply_augment(s.rgb, s.depth, 16, 16, bg), DimensionError);
}

TEST_CASE("dataset generation") {
  DatasetConfig cfg;
  cfg.objects = default_corpus();
  cfg.rotations = random_rotations(100, 3);
  cfg.seed = 9;
  cfg.holdout_fraction = 0.1;
  cfg.shard_size = 128;
  const auto dir = scratch("ds_a");
  const auto manifest = generate_dataset(cfg, dir);
  CHECK(manifest["n_samples"] == 500);
  CHECK(manifest["samples"].size() == 500);
  CHECK(manifest["n_holdout"] == 50);
  CHECK(manifest["format"] == "poselatent-ds/1");
  CHECK(manifest["shards"].size() == 4);

  auto ds = load_dataset(dir);
  CHECK(ds.size() == 500);
  CHECK(ds.indices(Split::holdout).size() == 50);
  auto mem = render_dataset(cfg);
  CHECK(ds.rgb == mem.rgb);
  CHECK(ds.depth == mem.depth);
  CHECK(ds.split == mem.split);
  CHECK(ds.objects.size() == 5);
  CHECK(geodesic_distance(ds.rotation[123], cfg.rotations[23]) < 1e-12);

  const auto dir2 = scratch("ds_b");
  generate_dataset(cfg, dir2);
  for (const auto& sh : manifest["shards"]) {
    CHECK(slurp(dir / sh["file"].get<std::string>()) == slurp(dir2 / sh["file"].get<std::string>()));
  }
  CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));

  CHECK_THROWS_AS(generate_dataset(cfg, "/proc/poselatent_no_such_dir"), IoError);
  CHECK_THROWS_AS(load_dataset(scratch("missing")), IoError);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("dataset config parsing") {
  const auto c = dataset_config_from_json(nlohmann::json::parse(R"({
    "objects": ["cylinder", "mug"],
    "rotations": {"kind": "equidistant", "level": 1, "n_inplane": 4},
    "seed": 3, "holdout_fraction": 0.1, "light_dir": [0, 0, -2]
  })"));
  CHECK(c.objects.size() == 2);
  CHECK(c.objects[1].id == "mug");
  CHECK(c.rotations.size() == 42 * 4);
  CHECK(c.rotations.level == 1);
  CHECK(c.light_dir.z() == doctest::Approx(-1));
  CHECK(c.seed == 3);

  const auto r = dataset_config_from_json(nlohmann::json::parse(
      R"({"objects": ["box"], "rotations": {"kind": "random", "count": 5, "seed": 2}})"));
  CHECK(r.rotations.size() == 5);
  CHECK(r.rotations[0].w == random_rotations(5, 2)[0].w);

  auto field_of = [](const char* text) {
    try {
      dataset_config_from_json(nlohmann::json::parse(text));
    } catch (const ValidationError& e) {
      return e.field;
    }
    return std::string("none");
  };
  CHECK(field_of(R"({"objects": ["box"], "rotations": {"kind": "random", "count": 5}, "extra": 1})") == "extra");
  CHECK(field_of(R"({"objects": ["teapot"], "rotations": {"kind": "random", "count": 5}})") == "objects");
  CHECK(field_of(R"({"objects": ["box", "box"], "rotations": {"kind": "random", "count": 5}})") == "objects");
  CHECK(field_of(R"({"objects": ["box"], "rotations": {"kind": "spiral"}})") == "rotations.kind");
  CHECK(field_of(R"({"objects": ["box"], "rotations": {"kind": "random", "count": 5}, "holdout_fraction": 1})") ==
        "holdout_fraction");
  CHECK(field_of(R"({"objects": ["box"], "rotations": {"kind": "explicit", "quaternions": [[0, 0, 0, 0]]}})") ==
        "rotations");
  CHECK(field_of(R"({"objects": ["box"], "rotations": {"kind": "random", "count": "5"}})") == "rotations");
  CHECK(field_of(R"({"objects": "box", "rotations": {"kind": "random", "count": 5}})") == "objects");
}
