#include "poselatent/inference.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>
#include <unordered_map>

#include "poselatent/errors.hpp"
#include "poselatent/fta.hpp"

namespace poselatent {

namespace {

constexpr const char* kCodebookFormat = "poselatent-codebook/1";

}  // namespace

std::string to_string(CodebookMode m) { return m == CodebookMode::conditioned ? "conditioned" : "rendered"; }

CodebookMode codebook_mode_from_string(const std::string& s) {
  if (s == "conditioned") return CodebookMode::conditioned;
  if (s == "rendered") return CodebookMode::rendered;
  throw ValidationError("mode", "unknown codebook mode '" + s + "' (conditioned|rendered)");
}

void PoseCodebook::validate() const {
  if (d == 0 || codes.size() % d != 0) throw ValidationError("codes", "code matrix is not [N, d]");
  if (size() != rotations.size()) {
    throw ValidationError("codes", std::to_string(size()) + " rows for " + std::to_string(rotations.size()) +
                                       " rotations");
  }
  if (mode == CodebookMode::rendered && render_meta.size() != size()) {
    throw ValidationError("render_meta", "rendered codebook needs one metadata row per code");
  }
  for (float v : codes) {
    if (!std::isfinite(v)) throw ValidationError("codes", "non-finite code value");
  }
}

nlohmann::json to_json(const PoseEstimate& e) {
  const auto q = e.rotation.canonical();
  nlohmann::json j;
  j["rotation_quat_wxyz"] = {q.w, q.x, q.y, q.z};
  j["translation_mm"] = e.translation ? nlohmann::json{e.translation->x(), e.translation->y(), e.translation->z()}
                                      : nlohmann::json(nullptr);
  j["scale"] = e.scale ? nlohmann::json(*e.scale) : nlohmann::json(nullptr);
  j["score"] = e.score;
  j["index"] = e.index;
  auto& top = j["topk"] = nlohmann::json::array();
  for (const auto& [i, s] : e.top_k) top.push_back({{"index", i}, {"score", s}});
  return j;
}

LatentCodes encode_images(const Network<float>& net, std::span<const float> rgb, std::size_t n, std::size_t chunk) {
  const auto& a = net.arch();
  const std::size_t per = 3 * static_cast<std::size_t>(a.image_h) * a.image_w;
  if (rgb.size() != n * per) {
    throw DimensionError("encode_images: expected " + std::to_string(n) + " images of " + std::to_string(per) +
                         " values, got " + std::to_string(rgb.size()) + " values");
  }
  NoGradGuard guard;
  LatentCodes out;
  out.n = n;
  out.d = a.d;
  out.z_o.reserve(n * a.d);
  out.z_p.reserve(n * a.d);
  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t m = std::min(chunk, n - b);
    std::vector<float> x(rgb.begin() + b * per, rgb.begin() + (b + m) * per);
    const auto lat = net.encode(
        TensorF::from({m, 3, static_cast<std::size_t>(a.image_h), static_cast<std::size_t>(a.image_w)}, std::move(x)));
    out.z_o.insert(out.z_o.end(), lat.z_o.data().begin(), lat.z_o.data().end());
    out.z_p.insert(out.z_p.end(), lat.z_p.data().begin(), lat.z_p.data().end());
  }
  return out;
}

TensorF codebook_rotation_features(const Network<float>& net, const RotationSet& rotations) {
  const HshConfig hcfg{net.arch().hsh_max_n, net.arch().hsh_dim};
  NoGradGuard guard;
  auto h = encode_rotations(rotations, hcfg);
  return net.rotation_features(TensorF::from({rotations.size(), static_cast<std::size_t>(hcfg.dim)}, std::move(h)));
}

PoseCodebook build_codebook_conditioned(const Network<float>& net, std::span<const float> z_o,
                                        const RotationSet& rotations, const TensorF& features) {
  const std::size_t d = net.arch().d;
  if (z_o.size() != d) {
    throw DimensionError("shape code has " + std::to_string(z_o.size()) + " entries, the network expects d = " +
                         std::to_string(d));
  }
  if (!features.defined() || features.rank() != 2 || features.dim(0) != rotations.size() || features.dim(1) != d) {
    throw DimensionError("rotation features do not match " + std::to_string(rotations.size()) + " rotations x d = " +
                         std::to_string(d));
  }
  NoGradGuard guard;
  auto c = TensorF::from({1, d}, std::vector<float>(z_o.begin(), z_o.end()));
  if (net.arch().variant != BlockVariant::mlp_nocond) c = normalize_rows(c);
  const auto rows = net.condition_features(c, features);
  PoseCodebook cb;
  cb.codes.assign(rows.data().begin(), rows.data().end());
  cb.d = d;
  cb.rotations = rotations;
  cb.mode = CodebookMode::conditioned;
  cb.hsh = {net.arch().hsh_max_n, net.arch().hsh_dim};
  return cb;
}

PoseCodebook build_codebook_conditioned(const Network<float>& net, std::span<const float> z_o,
                                        const RotationSet& rotations) {
  if (z_o.size() != static_cast<std::size_t>(net.arch().d)) {
    throw DimensionError("shape code has " + std::to_string(z_o.size()) + " entries, the network expects d = " +
                         std::to_string(net.arch().d));
  }
  return build_codebook_conditioned(net, z_o, rotations, codebook_rotation_features(net, rotations));
}

PoseCodebook build_codebook_rendered(const Network<float>& net, const Mesh& mesh, const RotationSet& rotations,
                                     const Camera& camera, const Eigen::Vector3d& light_dir) {
  const auto& a = net.arch();
  if (camera.height != a.image_h || camera.width != a.image_w) {
    throw DimensionError("camera renders " + std::to_string(camera.height) + "x" + std::to_string(camera.width) +
                         " but the encoder expects " + std::to_string(a.image_h) + "x" + std::to_string(a.image_w));
  }
  mesh.validate();
  const std::size_t n = rotations.size(), per = 3 * camera.pixels();
  std::vector<float> rgb(n * per);
  std::vector<RenderMeta> meta(n);
  const auto ni = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < ni; ++i) {
    const Sample s = rasterize(mesh, Pose{rotations[i], Eigen::Vector3d(0, 0, camera.z_ref)}, camera, light_dir);
    std::copy(s.rgb.begin(), s.rgb.end(), rgb.begin() + i * per);
    const auto box = depth_bbox(s.depth, camera.height, camera.width);
    meta[i] = {box ? box->diagonal : 0.0, camera.z_ref};
  }
  auto codes = encode_images(net, rgb, n);
  PoseCodebook cb;
  cb.codes = std::move(codes.z_p);
  cb.d = a.d;
  cb.rotations = rotations;
  cb.mode = CodebookMode::rendered;
  cb.render_meta = std::move(meta);
  cb.hsh = {a.hsh_max_n, a.hsh_dim};
  return cb;
}

PoseEstimate retrieve_rotation(std::span<const float> z_p, const PoseCodebook& cb, std::size_t k) {
  const std::size_t n = cb.size(), d = cb.d;
  if (n == 0) throw ArgumentError("retrieval needs a non-empty codebook");
  if (z_p.size() != d) {
    throw DimensionError("query has " + std::to_string(z_p.size()) + " entries, codebook rows have " +
                         std::to_string(d));
  }
  double qn = 0;
  for (float v : z_p) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  if (!(qn > kNormGuard)) throw NumericError("retrieval query has zero norm");
  std::vector<double> q(d);
  for (std::size_t j = 0; j < d; ++j) q[j] = z_p[j] / qn;
  k = std::clamp<std::size_t>(k, 1, n);

  std::vector<std::pair<std::size_t, double>> top;
  top.reserve(k + 1);
  const std::size_t d8 = d - d % 8;
  for (std::size_t r = 0; r < n; ++r) {
    const float* c = cb.codes.data() + r * d;
    std::array<double, 8> dot{}, nrm{};
    for (std::size_t j = 0; j < d8; j += 8) {
      for (std::size_t l = 0; l < 8; ++l) {
        const double cv = c[j + l];
        dot[l] += q[j + l] * cv;
        nrm[l] += cv * cv;
      }
    }
    for (std::size_t j = d8; j < d; ++j) {
      const double cv = c[j];
      dot[j - d8] += q[j] * cv;
      nrm[j - d8] += cv * cv;
    }
    const double dd = ((dot[0] + dot[1]) + (dot[2] + dot[3])) + ((dot[4] + dot[5]) + (dot[6] + dot[7]));
    const double nn = ((nrm[0] + nrm[1]) + (nrm[2] + nrm[3])) + ((nrm[4] + nrm[5]) + (nrm[6] + nrm[7]));
    const double s = nn > kNormGuard * kNormGuard ? dd / std::sqrt(nn) : 0.0;
    if (top.size() == k && !(s > top.back().second)) continue;
    auto pos = std::find_if(top.begin(), top.end(), [&](const auto& e) { return s > e.second; });
    top.insert(pos, {r, s});
    if (top.size() > k) top.pop_back();
  }
  PoseEstimate e;
  e.index = top.front().first;
  e.score = std::clamp(top.front().second, -1.0, 1.0);
  e.rotation = cb.rotations[e.index];
  e.top_k = std::move(top);
  return e;
}

void save_codebook(const std::filesystem::path& path, const PoseCodebook& cb) {
  cb.validate();
  Archive ar;
  ar.put_json("meta.json", {{"format", kCodebookFormat},
                            {"mode", to_string(cb.mode)},
                            {"object_id", cb.object_id},
                            {"d", cb.d},
                            {"hsh", {{"max_n", cb.hsh.max_n}, {"dim", cb.hsh.dim}}},
                            {"rotations", {{"provenance", to_string(cb.rotations.provenance)},
                                           {"level", cb.rotations.level},
                                           {"n_inplane", cb.rotations.n_inplane},
                                           {"seed", cb.rotations.seed}}}});
  ar.put("codes", {cb.size(), cb.d}, cb.codes);
  std::vector<float> q;
  q.reserve(4 * cb.rotations.size());
  for (const auto& r : cb.rotations.rotations) q.insert(q.end(), {float(r.w), float(r.x), float(r.y), float(r.z)});
  ar.put("rotations", {cb.rotations.size(), 4}, std::move(q));
  if (cb.mode == CodebookMode::rendered) {
    std::vector<float> m;
    for (const auto& r : cb.render_meta) m.insert(m.end(), {float(r.bbox_diagonal_px), float(r.distance_mm)});
    ar.put("render_meta", {cb.render_meta.size(), 2}, std::move(m));
  }
  ar.save(path);
}

PoseCodebook load_codebook(const std::filesystem::path& path) {
  const Archive ar = Archive::load(path);
  const auto where = " in codebook '" + path.string() + "'";
  if (!ar.contains("meta.json") || !ar.contains("codes") || !ar.contains("rotations")) {
    throw IoError("missing meta.json, codes or rotations" + where);
  }
  PoseCodebook cb;
  try {
    const auto meta = ar.json("meta.json");
    if (meta.value("format", "") != kCodebookFormat) {
      throw ValidationError("format", "expected " + std::string(kCodebookFormat));
    }
    cb.mode = codebook_mode_from_string(meta.at("mode").get<std::string>());
    cb.object_id = meta.value("object_id", "");
    cb.hsh = {meta.at("hsh").at("max_n").get<int>(), meta.at("hsh").at("dim").get<int>()};
    const auto& rm = meta.at("rotations");
    cb.rotations.provenance = provenance_from_string(rm.at("provenance").get<std::string>());
    cb.rotations.level = rm.at("level").get<int>();
    cb.rotations.n_inplane = rm.at("n_inplane").get<int>();
    cb.rotations.seed = rm.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad meta.json") + where + ": " + e.what());
  }
  const auto codes = ar.tensor("codes");
  const auto rots = ar.tensor("rotations");
  if (codes.rank() != 2 || rots.rank() != 2 || rots.dim(1) != 4) throw IoError("malformed tensors" + where);
  cb.d = codes.dim(1);
  cb.codes.assign(codes.data().begin(), codes.data().end());
  for (std::size_t i = 0; i < rots.dim(0); ++i) {
    cb.rotations.rotations.emplace_back(rots[4 * i], rots[4 * i + 1], rots[4 * i + 2], rots[4 * i + 3]);
  }
  if (ar.contains("render_meta")) {
    const auto m = ar.tensor("render_meta");
    if (m.rank() != 2 || m.dim(1) != 2) throw IoError("malformed render_meta" + where);
    for (std::size_t i = 0; i < m.dim(0); ++i) cb.render_meta.push_back({m[2 * i], m[2 * i + 1]});
  }
  try {
    cb.validate();
  } catch (const ValidationError& e) {
    throw IoError(std::string(e.what()) + where);
  }
  return cb;
}

std::optional<BoundingBox2D> depth_bbox(std::span<const float> depth, int height, int width) {
  if (depth.size() != static_cast<std::size_t>(height) * width) {
    throw DimensionError("depth map has " + std::to_string(depth.size()) + " values, expected " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  int i0 = height, i1 = -1, j0 = width, j1 = -1;
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      if (depth[static_cast<std::size_t>(i) * width + j] > 0) {
        i0 = std::min(i0, i), i1 = std::max(i1, i);
        j0 = std::min(j0, j), j1 = std::max(j1, j);
      }
    }
  }
  if (i1 < 0) return std::nullopt;
  const double w = j1 - j0 + 1, h = i1 - i0 + 1;
  return BoundingBox2D{0.5 * (j0 + j1), 0.5 * (i0 + i1), std::hypot(w, h)};
}

Eigen::Vector3d estimate_translation_pinhole(const BoundingBox2D& detected, const RenderMeta& row,
                                             const Camera& camera) {
  if (!(detected.diagonal > 0)) throw EstimationError("detected bounding box has zero diagonal");
  if (!(row.bbox_diagonal_px > 0)) throw EstimationError("codebook row has no rendered bounding box");
  const double tz = row.distance_mm * row.bbox_diagonal_px / detected.diagonal;
  return {(detected.u - camera.cx) * tz / camera.fx, (detected.v - camera.cy) * tz / camera.fy, tz};
}

PointCloud back_project(std::span<const float> depth, const Camera& camera, int subdivide) {
  if (depth.size() != camera.pixels()) {
    throw DimensionError("depth map has " + std::to_string(depth.size()) + " values, camera has " +
                         std::to_string(camera.pixels()) + " pixels");
  }
  if (subdivide < 1) throw ArgumentError("subdivide must be >= 1");
  const auto at = [&](int i, int j) { return static_cast<double>(depth[static_cast<std::size_t>(i) * camera.width + j]); };
  const auto lift = [&](double u, double v, double z) {
    return Eigen::Vector3d((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z);
  };
  PointCloud pts;
  for (int i = 0; i < camera.height; ++i) {
    for (int j = 0; j < camera.width; ++j) {
      if (at(i, j) > 0) pts.push_back(lift(j, i, at(i, j)));
    }
  }
  if (subdivide == 1) return pts;
  // Extra samples inside quads of four valid pixels whose depths agree
  // within kQuadJump (a depth edge is not a surface).
  constexpr double kQuadJump = 0.02;
  for (int i = 0; i + 1 < camera.height; ++i) {
    for (int j = 0; j + 1 < camera.width; ++j) {
      const double z00 = at(i, j), z01 = at(i, j + 1), z10 = at(i + 1, j), z11 = at(i + 1, j + 1);
      const double lo = std::min({z00, z01, z10, z11}), hi = std::max({z00, z01, z10, z11});
      if (!(lo > 0) || hi - lo > kQuadJump * lo) continue;
      for (int a = 0; a < subdivide; ++a) {
        for (int b = 0; b < subdivide; ++b) {
          if (a == 0 && b == 0) continue;
          const double fy = static_cast<double>(a) / subdivide, fx = static_cast<double>(b) / subdivide;
          // Inverse depth is affine in the image for a plane.
          const double inv = (1 - fy) * ((1 - fx) / z00 + fx / z01) + fy * ((1 - fx) / z10 + fx / z11);
          pts.push_back(lift(j + fx, i + fy, 1.0 / inv));
        }
      }
    }
  }
  return pts;
}

namespace {

// Uniform grid over the destination cloud with exact nearest-neighbour queries.
class PointGrid {
 public:
  PointGrid(const PointCloud& pts, double cell) : pts_(pts), cell_(cell) {
    lo_ = hi_ = cell_of(pts.front());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto c = cell_of(pts[i]);
      lo_ = lo_.cwiseMin(c), hi_ = hi_.cwiseMax(c);
      cells_[key(c)].push_back(static_cast<std::uint32_t>(i));
    }
  }

  // Index of and distance to the closest point.
  std::pair<std::size_t, double> nearest(const Eigen::Vector3d& p) const {
    const Eigen::Vector3i c = cell_of(p);
    // Farthest ring that still touches occupied cells.
    const int rmax = std::max({(c - lo_).cwiseAbs().maxCoeff(), (c - hi_).cwiseAbs().maxCoeff(), 0});
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (int r = 0; r <= rmax; ++r) {
      for (int dx = -r; dx <= r; ++dx) {
        for (int dy = -r; dy <= r; ++dy) {
          const bool edge = std::abs(dx) == r || std::abs(dy) == r;
          for (int dz = -r; dz <= r; dz += edge ? 1 : std::max(1, 2 * r)) {
            const auto it = cells_.find(key(c + Eigen::Vector3i(dx, dy, dz)));
            if (it == cells_.end()) continue;
            for (auto i : it->second) {
              const double dist = (pts_[i] - p).squaredNorm();
              if (dist < best || (dist == best && i < arg)) best = dist, arg = i;
            }
          }
        }
      }
      if (std::sqrt(best) <= r * cell_) break;
    }
    return {arg, std::sqrt(best)};
  }

 private:
  Eigen::Vector3i cell_of(const Eigen::Vector3d& p) const {
    return (p / cell_).array().floor().cast<int>().matrix();
  }
  static std::uint64_t key(const Eigen::Vector3i& c) {
    const auto u = [](int v) { return static_cast<std::uint64_t>(static_cast<std::uint32_t>(v) & 0x1fffffu); };
    return u(c.x()) | (u(c.y()) << 21) | (u(c.z()) << 42);
  }

  const PointCloud& pts_;
  double cell_;
  Eigen::Vector3i lo_, hi_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

double median_spacing(const PointCloud& pts) {
  const std::size_t stride = std::max<std::size_t>(1, pts.size() / 256);
  std::vector<double> nn;
  for (std::size_t i = 0; i < pts.size(); i += stride) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j != i) best = std::min(best, (pts[i] - pts[j]).squaredNorm());
    }
    nn.push_back(std::sqrt(best));
  }
  std::nth_element(nn.begin(), nn.begin() + nn.size() / 2, nn.end());
  return nn[nn.size() / 2];
}

void require_full_rank(const PointCloud& pts, const char* which) {
  if (pts.size() < 3) throw RefinementError(std::string(which) + " cloud has fewer than 3 points");
  Eigen::Vector3d mu = Eigen::Vector3d::Zero();
  for (const auto& p : pts) mu += p;
  mu /= static_cast<double>(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) cov += (p - mu) * (p - mu).transpose();
  const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(cov).eigenvalues();
  if (!(ev(0) > 1e-9 * ev(2)) || !(ev(2) > 0)) {
    throw RefinementError(std::string(which) + " cloud is degenerate (rank < 3)");
  }
}

constexpr double kTrim = 2.5;

struct Fit {
  Eigen::Matrix3d r;
  Eigen::Vector3d t;
  double s;
};

// Least-squares rotation (and optionally scale) taking a onto b.
Fit fit_transform(const PointCloud& a, const PointCloud& b, const std::vector<std::size_t>& corr,
                  const std::vector<char>& keep, bool with_scale) {
  double n = 0;
  Eigen::Vector3d ma = Eigen::Vector3d::Zero(), mb = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (keep[i]) ma += a[i], mb += b[corr[i]], n += 1;
  }
  ma /= n, mb /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_a = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!keep[i]) continue;
    cov += (b[corr[i]] - mb) * (a[i] - ma).transpose();
    var_a += (a[i] - ma).squaredNorm();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d sign(1, 1, 1);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) sign(2) = -1;
  Fit f;
  f.r = svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  f.s = with_scale ? svd.singularValues().dot(sign) / var_a : 1.0;
  f.t = mb - f.s * f.r * ma;
  return f;
}

}  // namespace

IcpResult icp_refine(const PointCloud& src, const PointCloud& dst, int max_iters, double tol, bool fit_scale) {
  require_full_rank(src, "source");
  require_full_rank(dst, "destination");
  double spacing = median_spacing(dst);
  if (!(spacing > 0)) spacing = 1e-3;
  const PointGrid grid(dst, 2 * spacing);

  PointCloud cur = src;
  std::vector<std::size_t> corr(cur.size()), next_corr(cur.size());
  std::vector<double> dist(cur.size()), next_dist(cur.size());
  const auto match = [&](const PointCloud& pts, std::vector<std::size_t>& c, std::vector<double>& dd) {
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::tie(c[i], dd[i]) = grid.nearest(pts[i]);
      total += dd[i];
    }
    return total / static_cast<double>(pts.size());
  };

  IcpResult res;
  double err = match(cur, corr, dist);
  PointCloud next(cur.size());
  std::vector<char> keep(cur.size());
  for (int it = 0; it < max_iters; ++it) {
    // Pairs far beyond the typical distance are parts of one surface the
    // other cloud does not see.
    std::vector<double> sorted = dist;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double cutoff = kTrim * std::max(sorted[sorted.size() / 2], spacing);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < cur.size(); ++i) kept += keep[i] = dist[i] <= cutoff;
    if (kept < 3) break;
    const Fit f = fit_transform(cur, dst, corr, keep, fit_scale);
    for (std::size_t i = 0; i < cur.size(); ++i) next[i] = f.s * (f.r * cur[i]) + f.t;
    const double next_err = match(next, next_corr, next_dist);
    if (next_err > err) break;
    res.rotation = f.r * res.rotation;
    res.translation = f.s * (f.r * res.translation) + f.t;
    res.scale *= f.s;
    ++res.iterations;
    cur.swap(next);
    corr.swap(next_corr);
    dist.swap(next_dist);
    const bool converged = err - next_err < tol;
    err = next_err;
    if (converged) break;
  }
  res.mean_distance = err;
  return res;
}

namespace {
constexpr int kTargetSubdivide = 4;
}  // namespace

DepthAlignment estimate_translation_depth(std::span<const float> depth_pred, std::span<const float> depth_obs,
                                          const Camera& camera, int icp_iters) {
  const PointCloud pred = back_project(depth_pred, camera);
  const PointCloud obs = back_project(depth_obs, camera);
  if (pred.size() < 20 || obs.size() < 20) {
    throw EstimationError("depth alignment needs at least 20 valid pixels per map (predicted " +
                          std::to_string(pred.size()) + ", observed " + std::to_string(obs.size()) + ")");
  }
  const auto box = [](const PointCloud& pts) {
    Eigen::Vector3d lo = pts.front(), hi = pts.front(), mu = Eigen::Vector3d::Zero();
    for (const auto& p : pts) lo = lo.cwiseMin(p), hi = hi.cwiseMax(p), mu += p;
    return std::pair{(hi - lo).norm(), Eigen::Vector3d(mu / static_cast<double>(pts.size()))};
  };
  const auto [diag_p, mu_p] = box(pred);
  const auto [diag_o, mu_o] = box(obs);
  if (!(diag_p > 0) || !(diag_o > 0)) throw EstimationError("depth map back-projects to a single point");

  DepthAlignment out;
  out.rough_scale = diag_o / diag_p;
  out.rough_translation = mu_o - out.rough_scale * mu_p;
  out.scale = out.rough_scale;
  out.translation = out.rough_translation;

  PointCloud src(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) src[i] = out.rough_scale * pred[i] + out.rough_translation;
  try {
    const IcpResult icp = icp_refine(src, back_project(depth_obs, camera, kTargetSubdivide), icp_iters, 1e-4, true);
    out.rotation = icp.rotation;
    out.scale = icp.scale * out.rough_scale;
    out.translation = icp.scale * (icp.rotation * out.rough_translation) + icp.translation;
    out.refined = true;
    out.mean_distance = icp.mean_distance;
  } catch (const RefinementError&) {
    out.refined = false;
  }
  return out;
}

}  // namespace poselatent
