#include "poselatent/synthscene.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>

#include "poselatent/errors.hpp"
#include "poselatent/fta.hpp"

namespace poselatent {

using std::numbers::pi;
using Vec3 = Eigen::Vector3d;

namespace {

constexpr int kSegments = 48;
constexpr const char* kDatasetFormat = "poselatent-ds/1";

class MeshBuilder {
 public:
  std::uint32_t vertex(const Vec3& p, const Vec3& n, const Vec3& c) {
    mesh_.vertices.push_back(p);
    mesh_.normals.push_back(n.normalized());
    mesh_.colors.push_back(c);
    return static_cast<std::uint32_t>(mesh_.vertices.size() - 1);
  }
  void tri(std::uint32_t a, std::uint32_t b, std::uint32_t c) { mesh_.triangles.push_back({a, b, c}); }

  // Flat convex polygon given counter-clockwise around `n`.
  void polygon(const std::vector<Vec3>& pts, const Vec3& n, const Vec3& c) {
    std::vector<std::uint32_t> idx;
    for (const auto& p : pts) idx.push_back(vertex(p, n, c));
    for (std::size_t k = 1; k + 1 < idx.size(); ++k) tri(idx[0], idx[k], idx[k + 1]);
  }

  // Disc of radius r at height z, facing +z or -z, as a fan around the axis.
  void disc(double r, double z, bool up, const Vec3& c) {
    const Vec3 n(0, 0, up ? 1 : -1);
    const auto center = vertex(Vec3(0, 0, z), n, c);
    std::vector<std::uint32_t> ring;
    for (int k = 0; k < kSegments; ++k) {
      const double a = 2 * pi * k / kSegments;
      ring.push_back(vertex(Vec3(r * std::cos(a), r * std::sin(a), z), n, c));
    }
    for (int k = 0; k < kSegments; ++k) {
      const auto a = ring[k], b = ring[(k + 1) % kSegments];
      if (up) {
        tri(center, a, b);
      } else {
        tri(center, b, a);
      }
    }
  }

  Mesh& mesh() { return mesh_; }

 private:
  Mesh mesh_;
};

Vec3 tint(const Vec3& c) { return 0.45 * c + Vec3::Constant(0.5); }

void cylinder(MeshBuilder& mb, double r, double h, const Vec3& color) {
  std::vector<std::uint32_t> lo, hi;
  for (int k = 0; k < kSegments; ++k) {
    const double a = 2 * pi * k / kSegments;
    const Vec3 n(std::cos(a), std::sin(a), 0);
    lo.push_back(mb.vertex(Vec3(r * n.x(), r * n.y(), -h / 2), n, color));
    hi.push_back(mb.vertex(Vec3(r * n.x(), r * n.y(), h / 2), n, color));
  }
  for (int k = 0; k < kSegments; ++k) {
    const int k1 = (k + 1) % kSegments;
    mb.tri(lo[k], lo[k1], hi[k1]);
    mb.tri(lo[k], hi[k1], hi[k]);
  }
  mb.disc(r, -h / 2, false, color);
  // The lighter top cap removes the flip symmetry of the bare solid.
  mb.disc(r, h / 2, true, tint(color));
}

void cone(MeshBuilder& mb, double r, double h, const Vec3& color) {
  std::vector<std::uint32_t> base;
  for (int k = 0; k < kSegments; ++k) {
    const double a = 2 * pi * k / kSegments;
    base.push_back(mb.vertex(Vec3(r * std::cos(a), r * std::sin(a), -h / 2),
                             Vec3(h * std::cos(a), h * std::sin(a), r), color));
  }
  for (int k = 0; k < kSegments; ++k) {
    const double mid = 2 * pi * (k + 0.5) / kSegments;
    const auto apex = mb.vertex(Vec3(0, 0, h / 2), Vec3(h * std::cos(mid), h * std::sin(mid), r), color);
    mb.tri(base[k], base[(k + 1) % kSegments], apex);
  }
  mb.disc(r, -h / 2, false, color);
}

void box(MeshBuilder& mb, double sx, double sy, double sz, const Vec3& color) {
  const double x = sx / 2, y = sy / 2, z = sz / 2;
  mb.polygon({{-x, -y, z}, {x, -y, z}, {x, y, z}, {-x, y, z}}, Vec3::UnitZ(), tint(color));
  mb.polygon({{-x, -y, -z}, {-x, y, -z}, {x, y, -z}, {x, -y, -z}}, -Vec3::UnitZ(), color);
  mb.polygon({{x, -y, -z}, {x, y, -z}, {x, y, z}, {x, -y, z}}, Vec3::UnitX(), color);
  mb.polygon({{-x, -y, -z}, {-x, -y, z}, {-x, y, z}, {-x, y, -z}}, -Vec3::UnitX(), color);
  mb.polygon({{-x, y, -z}, {-x, y, z}, {x, y, z}, {x, y, -z}}, Vec3::UnitY(), color);
  mb.polygon({{-x, -y, -z}, {x, -y, -z}, {x, -y, z}, {-x, -y, z}}, -Vec3::UnitY(), color);
}

void lprism(MeshBuilder& mb, double wx, double wy, double t, double h, const Vec3& color) {
  const std::vector<Eigen::Vector2d> outline{{0, 0}, {wx, 0}, {wx, t}, {t, t}, {t, wy}, {0, wy}};
  const double z0 = -h / 2, z1 = h / 2;
  std::vector<std::uint32_t> top, bottom;
  for (const auto& p : outline) {
    top.push_back(mb.vertex(Vec3(p.x(), p.y(), z1), Vec3::UnitZ(), color));
    bottom.push_back(mb.vertex(Vec3(p.x(), p.y(), z0), -Vec3::UnitZ(), color));
  }
  // Fan from the outer corner stays inside the L.
  for (std::size_t k = 1; k + 1 < outline.size(); ++k) {
    mb.tri(top[0], top[k], top[k + 1]);
    mb.tri(bottom[0], bottom[k + 1], bottom[k]);
  }
  for (std::size_t k = 0; k < outline.size(); ++k) {
    const auto& a = outline[k];
    const auto& b = outline[(k + 1) % outline.size()];
    const Eigen::Vector2d e = b - a;
    const Vec3 n(e.y(), -e.x(), 0);
    mb.polygon({{a.x(), a.y(), z0}, {b.x(), b.y(), z0}, {b.x(), b.y(), z1}, {a.x(), a.y(), z1}}, n, color);
  }
}

// Half-torus handle on the +x side of a cylinder of radius r.
void handle(MeshBuilder& mb, double r, double major, double tube, const Vec3& color) {
  constexpr int kArc = 16, kTube = 12;
  std::vector<std::vector<std::uint32_t>> rings;
  auto center = [&](double s) { return Vec3(r + major * std::cos(s), 0, major * std::sin(s)); };
  for (int i = 0; i <= kArc; ++i) {
    const double s = -pi / 2 + pi * i / kArc;
    const Vec3 n1(std::cos(s), 0, std::sin(s)), n2 = Vec3::UnitY();
    std::vector<std::uint32_t> ring;
    for (int k = 0; k < kTube; ++k) {
      const double f = 2 * pi * k / kTube;
      const Vec3 n = std::cos(f) * n1 + std::sin(f) * n2;
      ring.push_back(mb.vertex(center(s) + tube * n, n, color));
    }
    rings.push_back(std::move(ring));
  }
  for (int i = 0; i < kArc; ++i) {
    for (int k = 0; k < kTube; ++k) {
      const int k1 = (k + 1) % kTube;
      mb.tri(rings[i][k], rings[i + 1][k], rings[i + 1][k1]);
      mb.tri(rings[i][k], rings[i + 1][k1], rings[i][k1]);
    }
  }
  for (int end = 0; end < 2; ++end) {
    const double s = end == 0 ? -pi / 2 : pi / 2;
    const Vec3 tangent(-std::sin(s), 0, std::cos(s));
    const Vec3 n = end == 0 ? Vec3(-tangent) : tangent;
    const auto c = mb.vertex(center(s), n, color);
    const auto& src = rings[end == 0 ? 0 : kArc];
    std::vector<std::uint32_t> cap;
    for (auto idx : src) cap.push_back(mb.vertex(mb.mesh().vertices[idx], n, color));
    for (int k = 0; k < kTube; ++k) mb.tri(c, cap[k], cap[(k + 1) % kTube]);
  }
}

void recenter(Mesh& m) {
  const Vec3 c = 0.5 * (m.bbox_min() + m.bbox_max());
  for (auto& v : m.vertices) v -= c;
}

[[noreturn]] void invalid(const std::string& field, const std::string& msg) { throw ValidationError(field, msg); }

double edge(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

std::uint64_t split_hash(std::uint64_t seed, std::size_t object, std::size_t rotation) {
  return mix_seed(mix_seed(seed, 0x5151), (static_cast<std::uint64_t>(object) << 32) ^ rotation);
}

nlohmann::json quat_json(const UnitQuaternion& q) { return {q.w, q.x, q.y, q.z}; }

UnitQuaternion quat_from(const nlohmann::json& j) {
  return UnitQuaternion::raw(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                             j.at(3).get<double>());
}

}  // namespace

Vec3 Mesh::bbox_min() const {
  if (vertices.empty()) return Vec3::Zero();
  Vec3 m = vertices.front();
  for (const auto& v : vertices) m = m.cwiseMin(v);
  return m;
}

Vec3 Mesh::bbox_max() const {
  if (vertices.empty()) return Vec3::Zero();
  Vec3 m = vertices.front();
  for (const auto& v : vertices) m = m.cwiseMax(v);
  return m;
}

void Mesh::validate() const {
  if (normals.size() != vertices.size() || colors.size() != vertices.size()) {
    invalid("mesh", "normals and colors must have one entry per vertex");
  }
  for (std::size_t t = 0; t < triangles.size(); ++t) {
    for (auto i : triangles[t]) {
      if (i >= vertices.size()) invalid("mesh.triangles", "index out of range in triangle " + std::to_string(t));
    }
    const auto& [a, b, c] = triangles[t];
    if ((vertices[b] - vertices[a]).cross(vertices[c] - vertices[a]).norm() <= 1e-12) {
      invalid("mesh.triangles", "degenerate triangle " + std::to_string(t));
    }
  }
}

std::string to_string(ObjectKind k) {
  switch (k) {
    case ObjectKind::cylinder: return "cylinder";
    case ObjectKind::box: return "box";
    case ObjectKind::cone: return "cone";
    case ObjectKind::lprism: return "lprism";
    case ObjectKind::mug: return "mug";
  }
  return "box";
}

ObjectKind object_kind_from_string(const std::string& s) {
  if (s == "cylinder") return ObjectKind::cylinder;
  if (s == "box") return ObjectKind::box;
  if (s == "cone") return ObjectKind::cone;
  if (s == "lprism") return ObjectKind::lprism;
  if (s == "mug") return ObjectKind::mug;
  throw ValidationError("kind", "unknown object kind '" + s + "'");
}

SymmetryGroup ObjectSpec::natural_symmetry(const ObjectSpec& s) {
  switch (s.kind) {
    case ObjectKind::cylinder:
    case ObjectKind::cone: return SymmetryGroup::continuous();
    case ObjectKind::box: return SymmetryGroup::cyclic(s.width == s.depth ? 4 : 2);
    case ObjectKind::lprism:
    case ObjectKind::mug: return SymmetryGroup::trivial();
  }
  return SymmetryGroup::trivial();
}

void ObjectSpec::validate() const {
  auto positive = [](double v, const char* field) {
    if (!(v > 0) || !std::isfinite(v)) invalid(field, std::string(field) + " must be positive");
  };
  switch (kind) {
    case ObjectKind::box:
      positive(width, "width"), positive(depth, "depth"), positive(height, "height");
      break;
    case ObjectKind::cylinder:
    case ObjectKind::cone:
      positive(radius, "radius"), positive(height, "height");
      break;
    case ObjectKind::lprism:
      positive(width, "width"), positive(depth, "depth"), positive(height, "height"), positive(thickness, "thickness");
      if (thickness >= std::min(width, depth)) invalid("thickness", "lprism arm thickness must be below both arm lengths");
      if (width == depth) invalid("depth", "lprism arms must differ in length to avoid a flip symmetry");
      break;
    case ObjectKind::mug:
      positive(radius, "radius"), positive(height, "height"), positive(thickness, "thickness");
      if (0.3 * height + thickness >= 0.5 * height) invalid("thickness", "mug handle does not fit the body height");
      break;
  }
  for (int c = 0; c < 3; ++c) {
    if (!(color[c] >= 0 && color[c] <= 1)) invalid("color", "color channels must lie in [0,1]");
  }
  const SymmetryGroup nat = natural_symmetry(*this);
  if (symmetry.kind != nat.kind || (nat.kind == SymmetryGroup::Kind::cyclic && symmetry.order != nat.order) ||
      (symmetry.axis - nat.axis).norm() > 1e-9) {
    invalid("symmetry", "object '" + id + "' of kind " + to_string(kind) + " has symmetry " + nat.describe() +
                            ", declared " + symmetry.describe());
  }
}

nlohmann::json to_json(const SymmetryGroup& g) {
  const char* kind = g.kind == SymmetryGroup::Kind::trivial    ? "trivial"
                     : g.kind == SymmetryGroup::Kind::cyclic ? "cyclic"
                                                             : "continuous";
  nlohmann::json j{{"kind", kind}, {"axis", {g.axis.x(), g.axis.y(), g.axis.z()}}};
  if (g.kind == SymmetryGroup::Kind::cyclic) j["order"] = g.order;
  return j;
}

SymmetryGroup symmetry_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  Vec3 axis = Vec3::UnitZ();
  if (j.contains("axis")) axis = Vec3(j["axis"].at(0), j["axis"].at(1), j["axis"].at(2));
  if (kind == "trivial") return SymmetryGroup::trivial();
  if (kind == "continuous") return SymmetryGroup::continuous(axis);
  if (kind.rfind("cyclic", 0) == 0) {
    int order = 0;
    if (j.contains("order")) {
      order = j["order"].get<int>();
    } else if (kind.size() > 7 && kind[6] == '-') {
      try {
        order = std::stoi(kind.substr(7));
      } catch (const std::exception&) {
      }
    }
    if (order < 2) throw ValidationError("symmetry.order", "cyclic symmetry needs an order of at least 2");
    return SymmetryGroup::cyclic(order, axis);
  }
  throw ValidationError("symmetry.kind", "unknown symmetry '" + kind + "'");
}

nlohmann::json to_json(const ObjectSpec& s) {
  return {{"id", s.id},
          {"kind", to_string(s.kind)},
          {"width", s.width},
          {"depth", s.depth},
          {"height", s.height},
          {"radius", s.radius},
          {"thickness", s.thickness},
          {"symmetry", to_json(s.symmetry)},
          {"color", {s.color.x(), s.color.y(), s.color.z()}}};
}

ObjectSpec object_spec_from_json(const nlohmann::json& j) {
  ObjectSpec s;
  s.id = j.at("id").get<std::string>();
  s.kind = object_kind_from_string(j.at("kind").get<std::string>());
  s.width = j.value("width", 0.0);
  s.depth = j.value("depth", 0.0);
  s.height = j.value("height", 0.0);
  s.radius = j.value("radius", 0.0);
  s.thickness = j.value("thickness", 0.0);
  s.symmetry = j.contains("symmetry") ? symmetry_from_json(j["symmetry"]) : ObjectSpec::natural_symmetry(s);
  if (j.contains("color")) s.color = Vec3(j["color"].at(0), j["color"].at(1), j["color"].at(2));
  s.validate();
  return s;
}

std::vector<ObjectSpec> default_corpus() {
  std::vector<ObjectSpec> out;
  auto add = [&](ObjectSpec s) {
    s.symmetry = ObjectSpec::natural_symmetry(s);
    s.validate();
    out.push_back(std::move(s));
  };
  ObjectSpec s;
  s = {};
  s.id = "cylinder", s.kind = ObjectKind::cylinder, s.radius = 20, s.height = 60, s.color = {0.85, 0.3, 0.25};
  add(s);
  s = {};
  s.id = "box", s.kind = ObjectKind::box, s.width = 40, s.depth = 40, s.height = 70, s.color = {0.3, 0.7, 0.35};
  add(s);
  s = {};
  s.id = "cone", s.kind = ObjectKind::cone, s.radius = 25, s.height = 60, s.color = {0.3, 0.45, 0.9};
  add(s);
  s = {};
  s.id = "lprism", s.kind = ObjectKind::lprism, s.width = 64, s.depth = 40, s.thickness = 16, s.height = 28;
  s.color = {0.9, 0.75, 0.25};
  add(s);
  s = {};
  s.id = "mug", s.kind = ObjectKind::mug, s.radius = 22, s.height = 56, s.thickness = 5, s.color = {0.7, 0.4, 0.8};
  add(s);
  return out;
}

Mesh make_primitive(const ObjectSpec& spec) {
  try {
    spec.validate();
  } catch (const ValidationError& e) {
    throw ArgumentError(e.what());
  }
  MeshBuilder mb;
  switch (spec.kind) {
    case ObjectKind::box: box(mb, spec.width, spec.depth, spec.height, spec.color); break;
    case ObjectKind::cylinder: cylinder(mb, spec.radius, spec.height, spec.color); break;
    case ObjectKind::cone: cone(mb, spec.radius, spec.height, spec.color); break;
    case ObjectKind::lprism: lprism(mb, spec.width, spec.depth, spec.thickness, spec.height, spec.color); break;
    case ObjectKind::mug:
      cylinder(mb, spec.radius, spec.height, spec.color);
      handle(mb, spec.radius, 0.3 * spec.height, spec.thickness, spec.color);
      break;
  }
  Mesh m = std::move(mb.mesh());
  recenter(m);
  m.validate();
  return m;
}

void Camera::validate() const {
  if (!(fx > 0) || !(fy > 0)) invalid("camera.fx", "focal lengths must be positive");
  if (height < 1 || width < 1) invalid("camera.height", "image size must be positive");
  if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height)) {
    invalid("camera.cx", "principal point must lie inside the image");
  }
  if (!(z_ref > 0)) invalid("camera.z_ref", "z_ref must be positive");
}

nlohmann::json to_json(const Camera& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx},         {"cy", c.cy},
          {"height", c.height}, {"width", c.width}, {"z_ref", c.z_ref}};
}

Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.fx = j.value("fx", c.fx);
  c.fy = j.value("fy", c.fy);
  c.cx = j.value("cx", c.cx);
  c.cy = j.value("cy", c.cy);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.z_ref = j.value("z_ref", c.z_ref);
  c.validate();
  return c;
}

Sample rasterize(const Mesh& mesh, const Pose& pose, const Camera& camera, const Vec3& light_dir,
                 const Vec3& background) {
  camera.validate();
  const int H = camera.height, W = camera.width;
  const std::size_t P = camera.pixels();
  Sample s;
  s.pose = pose;
  s.camera = camera;
  s.rgb.resize(3 * P);
  for (int c = 0; c < 3; ++c) std::fill_n(s.rgb.begin() + c * P, P, static_cast<float>(background[c]));
  s.depth.assign(P, 0.0f);
  std::vector<double> zbuf(P, std::numeric_limits<double>::infinity());

  const Eigen::Matrix3d R = pose.rotation.matrix();
  const Vec3 light = light_dir.normalized();
  const std::size_t n = mesh.vertices.size();
  std::vector<Vec3> pc(n), nc(n);
  std::vector<Eigen::Vector2d> uv(n);
  for (std::size_t i = 0; i < n; ++i) {
    pc[i] = R * mesh.vertices[i] + pose.translation;
    if (!(pc[i].z() > 1e-6)) {
      throw RenderError("vertex " + std::to_string(i) + " lies at or behind the camera (z = " +
                        std::to_string(pc[i].z()) + " mm)");
    }
    nc[i] = R * mesh.normals[i];
    uv[i] = {camera.fx * pc[i].x() / pc[i].z() + camera.cx, camera.fy * pc[i].y() / pc[i].z() + camera.cy};
  }

  for (const auto& t : mesh.triangles) {
    const auto& a = uv[t[0]];
    const auto& b = uv[t[1]];
    const auto& c = uv[t[2]];
    const double area = edge(a, b, c);
    if (std::abs(area) < 1e-12) continue;
    const int j0 = std::max(0, static_cast<int>(std::ceil(std::min({a.x(), b.x(), c.x()}))));
    const int j1 = std::min(W - 1, static_cast<int>(std::floor(std::max({a.x(), b.x(), c.x()}))));
    const int i0 = std::max(0, static_cast<int>(std::ceil(std::min({a.y(), b.y(), c.y()}))));
    const int i1 = std::min(H - 1, static_cast<int>(std::floor(std::max({a.y(), b.y(), c.y()}))));
    const double iz0 = 1 / pc[t[0]].z(), iz1 = 1 / pc[t[1]].z(), iz2 = 1 / pc[t[2]].z();
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        const Eigen::Vector2d p(j, i);
        const double w0 = edge(b, c, p) / area, w1 = edge(c, a, p) / area, w2 = edge(a, b, p) / area;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double iz = w0 * iz0 + w1 * iz1 + w2 * iz2;
        const double z = 1 / iz;
        const std::size_t px = static_cast<std::size_t>(i) * W + j;
        if (!(z < zbuf[px])) continue;
        zbuf[px] = z;
        const double b0 = w0 * iz0 / iz, b1 = w1 * iz1 / iz, b2 = w2 * iz2 / iz;
        Vec3 nrm = b0 * nc[t[0]] + b1 * nc[t[1]] + b2 * nc[t[2]];
        const double len = nrm.norm();
        nrm = len > 0 ? Vec3(nrm / len) : Vec3(0, 0, -1);
        const Vec3 ray((j - camera.cx) / camera.fx, (i - camera.cy) / camera.fy, 1);
        if (nrm.dot(ray) > 0) nrm = -nrm;
        const double shade = std::max(0.2, nrm.dot(light));
        const Vec3 col =
            (b0 * mesh.colors[t[0]] + b1 * mesh.colors[t[1]] + b2 * mesh.colors[t[2]]) * shade;
        for (int ch = 0; ch < 3; ++ch) s.rgb[ch * P + px] = static_cast<float>(std::clamp(col[ch], 0.0, 1.0));
        s.depth[px] = static_cast<float>(z);
      }
    }
  }
  return s;
}

AugmentParams AugmentParams::sample(Rng& rng) {
  AugmentParams p;
  p.replace_background = rng.uniform() < 0.5;
  p.background = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
  p.brightness = rng.uniform(0.7, 1.3);
  p.channel = Vec3(rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2), rng.uniform(0.8, 1.2));
  p.contrast = rng.uniform(0.8, 1.2);
  p.scale = rng.uniform(0.85, 1.15);
  return p;
}

std::vector<float> apply_augment(const std::vector<float>& rgb, const std::vector<float>& depth, int height, int width,
                                 const AugmentParams& p) {
  const std::size_t P = static_cast<std::size_t>(height) * width;
  if (rgb.size() != 3 * P || depth.size() != P) {
    throw DimensionError("augment: expected rgb of " + std::to_string(3 * P) + " and depth of " + std::to_string(P) +
                         " values");
  }
  std::vector<float> img = rgb;
  const Vec3 fill = p.replace_background ? p.background : Vec3::Zero();
  if (p.replace_background) {
    for (std::size_t px = 0; px < P; ++px) {
      if (depth[px] == 0.0f) {
        for (int c = 0; c < 3; ++c) img[c * P + px] = static_cast<float>(p.background[c]);
      }
    }
  }
  if (p.scale != 1.0) {
    std::vector<float> src = img;
    const double ci = (height - 1) / 2.0, cj = (width - 1) / 2.0;
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const double si = ci + (i - ci) / p.scale, sj = cj + (j - cj) / p.scale;
        const int i0 = static_cast<int>(std::floor(si)), j0 = static_cast<int>(std::floor(sj));
        const double fi = si - i0, fj = sj - j0;
        for (int c = 0; c < 3; ++c) {
          auto at = [&](int ii, int jj) {
            if (ii < 0 || jj < 0 || ii >= height || jj >= width) return fill[c];
            return static_cast<double>(src[c * P + static_cast<std::size_t>(ii) * width + jj]);
          };
          const double v = (1 - fi) * ((1 - fj) * at(i0, j0) + fj * at(i0, j0 + 1)) +
                           fi * ((1 - fj) * at(i0 + 1, j0) + fj * at(i0 + 1, j0 + 1));
          img[c * P + static_cast<std::size_t>(i) * width + j] = static_cast<float>(v);
        }
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    const double g = p.brightness * p.channel[c];
    if (g == 1.0) continue;
    for (std::size_t px = 0; px < P; ++px) img[c * P + px] = static_cast<float>(img[c * P + px] * g);
  }
  if (p.contrast != 1.0) {
    double mean = 0;
    for (float v : img) mean += v;
    mean /= static_cast<double>(img.size());
    for (auto& v : img) v = static_cast<float>(v * p.contrast + mean * (1 - p.contrast));
  }
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

std::vector<float> augment(const std::vector<float>& rgb, const std::vector<float>& depth, int height, int width,
                           Rng& rng) {
  return apply_augment(rgb, depth, height, width, AugmentParams::sample(rng));
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == s) out.push_back(i);
  }
  return out;
}

Dataset render_dataset(const DatasetConfig& cfg) {
  if (cfg.objects.empty()) throw ArgumentError("dataset needs at least one object");
  if (cfg.rotations.size() == 0) throw ArgumentError("dataset needs at least one rotation");
  if (!(cfg.holdout_fraction >= 0 && cfg.holdout_fraction < 1)) {
    throw ArgumentError("holdout_fraction must lie in [0, 1)");
  }
  cfg.camera.validate();
  std::vector<Mesh> meshes;
  for (const auto& o : cfg.objects) meshes.push_back(make_primitive(o));

  Dataset ds;
  ds.objects = cfg.objects;
  ds.camera = cfg.camera;
  ds.rotations = cfg.rotations;
  const std::size_t R = cfg.rotations.size(), N = cfg.objects.size() * R, P = cfg.camera.pixels();
  ds.rgb.resize(N * 3 * P);
  ds.depth.resize(N * P);
  ds.object.resize(N);
  ds.rotation_index.resize(N);
  ds.rotation.resize(N);
  ds.seed.resize(N);
  ds.split.assign(N, Split::train);

  std::vector<std::pair<std::uint64_t, std::size_t>> ranks(N);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t o = n / R, r = n % R;
    ds.object[n] = static_cast<int>(o);
    ds.rotation_index[n] = r;
    ds.rotation[n] = cfg.rotations[r];
    ds.seed[n] = mix_seed(cfg.seed, n);
    ranks[n] = {split_hash(cfg.seed, o, r), n};
  }
  std::sort(ranks.begin(), ranks.end());
  const auto n_holdout = static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(N)));
  for (std::size_t k = 0; k < n_holdout; ++k) ds.split[ranks[k].second] = Split::holdout;

  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(N); ++n) {
    try {
      Pose pose{cfg.rotations[n % R], Vec3(0, 0, cfg.camera.z_ref)};
      const Sample s = rasterize(meshes[n / R], pose, cfg.camera, cfg.light_dir);
      std::copy(s.rgb.begin(), s.rgb.end(), ds.rgb.begin() + n * 3 * P);
      std::copy(s.depth.begin(), s.depth.end(), ds.depth.begin() + n * P);
    } catch (...) {
#pragma omp critical
      failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  nlohmann::json m;
  m["format"] = kDatasetFormat;
  m["seed"] = cfg.seed;
  m["camera"] = to_json(cfg.camera);
  m["light_dir"] = {cfg.light_dir.x(), cfg.light_dir.y(), cfg.light_dir.z()};
  m["holdout_fraction"] = cfg.holdout_fraction;
  m["objects"] = nlohmann::json::array();
  for (const auto& o : cfg.objects) m["objects"].push_back(to_json(o));
  nlohmann::json rot{{"provenance", to_string(cfg.rotations.provenance)},
                     {"level", cfg.rotations.level},
                     {"n_inplane", cfg.rotations.n_inplane},
                     {"seed", cfg.rotations.seed},
                     {"quaternions", nlohmann::json::array()}};
  for (const auto& q : cfg.rotations.rotations) rot["quaternions"].push_back(quat_json(q));
  m["rotations"] = std::move(rot);
  m["n_samples"] = N;
  m["n_train"] = N - n_holdout;
  m["n_holdout"] = n_holdout;
  const std::size_t shard = std::max<std::size_t>(1, cfg.shard_size);
  m["shards"] = nlohmann::json::array();
  for (std::size_t b = 0, k = 0; b < N; b += shard, ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "shard_%04zu.fta", k);
    m["shards"].push_back({{"file", name}, {"begin", b}, {"count", std::min(shard, N - b)}});
  }
  m["samples"] = nlohmann::json::array();
  for (std::size_t n = 0; n < N; ++n) {
    m["samples"].push_back({{"object", ds.object[n]},
                            {"rotation", ds.rotation_index[n]},
                            {"seed", ds.seed[n]},
                            {"split", ds.split[n] == Split::train ? "train" : "holdout"}});
  }
  ds.manifest = std::move(m);
  return ds;
}

nlohmann::json generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create dataset directory '" + out_dir.string() + "'");
  }
  {
    std::ofstream probe(out_dir / "manifest.json");
    if (!probe) throw IoError("dataset directory '" + out_dir.string() + "' is not writable");
  }
  const Dataset ds = render_dataset(cfg);
  const std::size_t P = cfg.camera.pixels();
  const auto H = static_cast<std::size_t>(cfg.camera.height), W = static_cast<std::size_t>(cfg.camera.width);
  for (const auto& sh : ds.manifest["shards"]) {
    const std::size_t b = sh["begin"], cnt = sh["count"];
    Archive a;
    a.put("rgb", {cnt, 3, H, W}, std::vector<float>(ds.rgb.begin() + b * 3 * P, ds.rgb.begin() + (b + cnt) * 3 * P));
    a.put("depth", {cnt, 1, H, W}, std::vector<float>(ds.depth.begin() + b * P, ds.depth.begin() + (b + cnt) * P));
    a.save(out_dir / sh["file"].get<std::string>());
  }
  std::ofstream out(out_dir / "manifest.json");
  out << ds.manifest.dump(1) << "\n";
  if (!out) throw IoError("failed writing " + (out_dir / "manifest.json").string());
  return ds.manifest;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no manifest.json in '" + dir.string() + "'");
  Dataset ds;
  try {
    ds.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest.json is not valid JSON: " + std::string(e.what()));
  }
  const auto& m = ds.manifest;
  if (m.value("format", "") != kDatasetFormat) {
    throw IoError("unsupported dataset format '" + m.value("format", "") + "', expected " + kDatasetFormat);
  }
  ds.camera = camera_from_json(m.at("camera"));
  for (const auto& o : m.at("objects")) ds.objects.push_back(object_spec_from_json(o));
  const auto& rot = m.at("rotations");
  ds.rotations.provenance = provenance_from_string(rot.at("provenance"));
  ds.rotations.level = rot.value("level", -1);
  ds.rotations.n_inplane = rot.value("n_inplane", 0);
  ds.rotations.seed = rot.value("seed", std::uint64_t{0});
  for (const auto& q : rot.at("quaternions")) ds.rotations.rotations.push_back(quat_from(q));

  const std::size_t N = m.at("n_samples"), P = ds.camera.pixels();
  ds.rgb.resize(N * 3 * P);
  ds.depth.resize(N * P);
  for (const auto& s : m.at("samples")) {
    ds.object.push_back(s.at("object"));
    const std::size_t r = s.at("rotation");
    if (r >= ds.rotations.size()) throw IoError("sample rotation index out of range");
    ds.rotation_index.push_back(r);
    ds.rotation.push_back(ds.rotations[r]);
    ds.seed.push_back(s.at("seed"));
    ds.split.push_back(s.at("split") == "holdout" ? Split::holdout : Split::train);
  }
  if (ds.object.size() != N) throw IoError("manifest sample count disagrees with n_samples");
  for (const auto& sh : m.at("shards")) {
    const std::size_t b = sh.at("begin"), cnt = sh.at("count");
    const Archive a = Archive::load(dir / sh.at("file").get<std::string>());
    const auto& rgb = a.at("rgb").values;
    const auto& depth = a.at("depth").values;
    if (b + cnt > N || rgb.size() != cnt * 3 * P || depth.size() != cnt * P) {
      throw IoError("shard " + sh.at("file").get<std::string>() + " does not match the manifest");
    }
    std::copy(rgb.begin(), rgb.end(), ds.rgb.begin() + b * 3 * P);
    std::copy(depth.begin(), depth.end(), ds.depth.begin() + b * P);
  }
  return ds;
}

RotationSet rotation_set_from_json(const nlohmann::json& r) {
  RotationSet out;
  try {
    const std::string kind = r.value("kind", "");
    if (kind == "random") {
      const auto n = r.at("count").get<std::int64_t>();
      if (n < 1) invalid("rotations.count", "must be positive");
      out = random_rotations(static_cast<std::size_t>(n), r.value("seed", std::uint64_t{0}));
    } else if (kind == "equidistant") {
      const int level = r.at("level").get<int>(), n_inplane = r.at("n_inplane").get<int>();
      if (level < 0 || level > 6) invalid("rotations.level", "must lie in [0, 6]");
      if (n_inplane < 1) invalid("rotations.n_inplane", "must be positive");
      out = build_reference_rotations(sample_equidistant_views(level), n_inplane);
      out.level = level;
    } else if (kind == "kmeans") {
      const auto n = r.at("count").get<std::int64_t>(), pool = r.at("pool").get<std::int64_t>();
      if (n < 1 || pool < n) invalid("rotations.pool", "need 0 < count <= pool");
      const std::uint64_t seed = r.value("seed", std::uint64_t{0});
      out = quat_kmeans(random_rotations(static_cast<std::size_t>(pool), seed), static_cast<std::size_t>(n), seed);
    } else if (kind == "explicit") {
      for (const auto& q : r.at("quaternions")) {
        out.rotations.push_back(
            UnitQuaternion(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(), q.at(3).get<double>())
                .canonical());
      }
      if (out.size() == 0) invalid("rotations.quaternions", "must not be empty");
    } else {
      invalid("rotations.kind", "expected random, equidistant, kmeans or explicit");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("rotations", std::string("malformed rotation source: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ValidationError("rotations", e.what());
  }
  return out;
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"format", "objects",    "rotations", "camera",
                                          "seed",   "holdout_fraction", "shard_size", "light_dir"};
  if (!j.is_object()) invalid("config", "dataset config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!keys.count(key)) invalid(key, "unknown dataset config key '" + key + "'");
  }
  if (j.contains("format") && j["format"] != "poselatent-dataset-config/1") {
    invalid("format", "expected \"poselatent-dataset-config/1\"");
  }
  DatasetConfig c;
  try {
    if (!j.contains("objects") || !j["objects"].is_array() || j["objects"].empty()) {
      invalid("objects", "a non-empty list of object ids or object specs is required");
    }
    const auto corpus = default_corpus();
    for (const auto& o : j["objects"]) {
      if (o.is_string()) {
        auto it = std::find_if(corpus.begin(), corpus.end(), [&](const ObjectSpec& s) { return s.id == o; });
        if (it == corpus.end()) invalid("objects", "unknown object id '" + o.get<std::string>() + "'");
        c.objects.push_back(*it);
      } else {
        c.objects.push_back(object_spec_from_json(o));
      }
    }
    for (std::size_t a = 0; a < c.objects.size(); ++a) {
      for (std::size_t b = a + 1; b < c.objects.size(); ++b) {
        if (c.objects[a].id == c.objects[b].id) invalid("objects", "duplicate object id '" + c.objects[a].id + "'");
      }
    }

    if (!j.contains("rotations") || !j["rotations"].is_object()) invalid("rotations", "a rotation source is required");
    c.rotations = rotation_set_from_json(j["rotations"]);

    if (j.contains("camera")) c.camera = camera_from_json(j["camera"]);
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("holdout_fraction")) c.holdout_fraction = j["holdout_fraction"].get<double>();
    if (!(c.holdout_fraction >= 0 && c.holdout_fraction < 1)) invalid("holdout_fraction", "must lie in [0, 1)");
    if (j.contains("shard_size")) c.shard_size = j["shard_size"].get<std::size_t>();
    if (c.shard_size < 1) invalid("shard_size", "must be positive");
    if (j.contains("light_dir")) {
      const auto& l = j["light_dir"];
      c.light_dir = Vec3(l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>());
      if (!(c.light_dir.norm() > 0)) invalid("light_dir", "must be non-zero");
      c.light_dir.normalize();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config", std::string("malformed dataset config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ValidationError("rotations", e.what());
  }
  return c;
}

}  // namespace poselatent
