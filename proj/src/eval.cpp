#include "poselatent/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "poselatent/errors.hpp"

namespace poselatent {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

Eigen::Vector3d light_of(const Dataset& ds) {
  const auto& m = ds.manifest;
  if (m.contains("light_dir") && m["light_dir"].is_array() && m["light_dir"].size() == 3) {
    return {m["light_dir"][0].get<double>(), m["light_dir"][1].get<double>(), m["light_dir"][2].get<double>()};
  }
  return default_light_dir();
}

// n evenly spaced picks from v, all of v when n is 0 or too large.
std::vector<std::size_t> spread(const std::vector<std::size_t>& v, std::size_t n) {
  if (n == 0 || n >= v.size()) return v;
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = v[i * v.size() / n];
  return out;
}

}  // namespace

std::vector<double> default_ap_thresholds_deg() { return {5, 10, 15, 20, 30, 60}; }

std::vector<double> angular_ap(std::span<const double> errors, std::span<const double> thresholds) {
  for (double e : errors) {
    if (!std::isfinite(e)) throw ArgumentError("angular errors must be finite");
  }
  std::vector<double> ap(thresholds.size(), kNaN);
  if (errors.empty()) return ap;
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto hits = std::count_if(errors.begin(), errors.end(), [&](double e) { return e <= thresholds[t]; });
    ap[t] = static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  return ap;
}

double vsd(std::span<const float> depth_est, std::span<const float> depth_gt, std::span<const std::uint8_t> visib_est,
           std::span<const std::uint8_t> visib_gt, double tol_mm) {
  const std::size_t n = depth_gt.size();
  if (depth_est.size() != n || visib_est.size() != n || visib_gt.size() != n) {
    throw DimensionError("vsd: maps differ in size (" + std::to_string(depth_est.size()) + ", " +
                         std::to_string(n) + ", " + std::to_string(visib_est.size()) + ", " +
                         std::to_string(visib_gt.size()) + ")");
  }
  std::size_t uni = 0, cost = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool e = visib_est[i], g = visib_gt[i];
    if (!e && !g) continue;
    ++uni;
    if (!(e && g && std::abs(static_cast<double>(depth_est[i]) - depth_gt[i]) < tol_mm)) ++cost;
  }
  return uni ? static_cast<double>(cost) / static_cast<double>(uni) : 0.0;
}

double vsd(std::span<const float> depth_est, std::span<const float> depth_gt, double tol_mm) {
  std::vector<std::uint8_t> ve(depth_est.size()), vg(depth_gt.size());
  for (std::size_t i = 0; i < ve.size(); ++i) ve[i] = depth_est[i] > 0;
  for (std::size_t i = 0; i < vg.size(); ++i) vg[i] = depth_gt[i] > 0;
  return vsd(depth_est, depth_gt, ve, vg, tol_mm);
}

double vsd_recall(std::span<const double> scores, double threshold) {
  if (scores.empty()) return kNaN;
  const auto hits = std::count_if(scores.begin(), scores.end(), [&](double s) { return s < threshold; });
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

PcaResult pca_project(std::span<const float> codes, std::size_t n, std::size_t d, std::size_t out_dims) {
  if (codes.size() != n * d) {
    throw DimensionError("pca: expected " + std::to_string(n) + "x" + std::to_string(d) + " values, got " +
                         std::to_string(codes.size()));
  }
  if (out_dims == 0 || out_dims > d) throw ArgumentError("pca: out_dims must be in [1, d]");
  if (n <= out_dims) {
    throw ArgumentError("pca: need more than " + std::to_string(out_dims) + " rows, got " + std::to_string(n));
  }
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = codes[i * d + j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  PcaResult r;
  r.n = n;
  r.dims = out_dims;
  r.mean.assign(mu.data(), mu.data() + d);
  for (std::size_t k = 0; k < d; ++k) r.eigenvalues.push_back(std::max(0.0, eig.eigenvalues()(d - 1 - k)));
  r.explained.assign(r.eigenvalues.begin(), r.eigenvalues.begin() + out_dims);
  Eigen::MatrixXd comp(d, out_dims);
  for (std::size_t k = 0; k < out_dims; ++k) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    comp.col(k) = v;
    r.components.insert(r.components.end(), v.data(), v.data() + d);
  }
  const Eigen::MatrixXd p = x * comp;
  r.projections.resize(n * out_dims);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < out_dims; ++k) r.projections[i * out_dims + k] = p(i, k);
  }
  return r;
}

ClusterReport shape_cluster_report(std::span<const float> train_codes, std::span<const int> train_ids,
                                   std::span<const float> holdout_codes, std::span<const int> holdout_ids,
                                   std::size_t n_objects, std::size_t d) {
  if (n_objects < 2) throw ArgumentError("shape clustering needs at least 2 objects");
  if (train_codes.size() != train_ids.size() * d || holdout_codes.size() != holdout_ids.size() * d) {
    throw DimensionError("shape clustering: code and id counts disagree");
  }
  const auto check_id = [&](int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= n_objects) {
      throw ArgumentError("object id " + std::to_string(id) + " out of range");
    }
  };
  std::vector<double> centroid(n_objects * d, 0.0);
  std::vector<std::size_t> count(n_objects, 0);
  for (std::size_t i = 0; i < train_ids.size(); ++i) {
    check_id(train_ids[i]);
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += double(train_codes[i * d + k]) * train_codes[i * d + k];
    norm = std::sqrt(norm);
    if (!(norm > kNormGuard)) continue;
    for (std::size_t k = 0; k < d; ++k) centroid[train_ids[i] * d + k] += train_codes[i * d + k] / norm;
    ++count[train_ids[i]];
  }
  for (std::size_t o = 0; o < n_objects; ++o) {
    if (count[o] == 0) throw ArgumentError("object " + std::to_string(o) + " has no training codes");
    double norm = 0;
    for (std::size_t k = 0; k < d; ++k) norm += centroid[o * d + k] * centroid[o * d + k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) centroid[o * d + k] /= norm > kNormGuard ? norm : 1.0;
  }
  ClusterReport r;
  r.confusion.assign(n_objects, std::vector<std::size_t>(n_objects, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < holdout_ids.size(); ++i) {
    check_id(holdout_ids[i]);
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t o = 0; o < n_objects; ++o) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += centroid[o * d + k] * holdout_codes[i * d + k];
      if (s > best_s) best_s = s, best = o;
    }
    ++r.confusion[holdout_ids[i]][best];
    correct += best == static_cast<std::size_t>(holdout_ids[i]);
  }
  r.accuracy = holdout_ids.empty() ? kNaN : static_cast<double>(correct) / static_cast<double>(holdout_ids.size());
  return r;
}

void EvalConfig::validate() const {
  if (level < 0 || level > 6) throw ValidationError("level", "level must be in [0, 6]");
  if (n_inplane < 1) throw ValidationError("n_inplane", "n_inplane must be positive");
  if (thresholds_deg.empty()) throw ValidationError("thresholds_deg", "at least one threshold is required");
  for (double t : thresholds_deg) {
    if (!(t > 0) || t > 180) throw ValidationError("thresholds_deg", "thresholds must be in (0, 180]");
  }
  if (!std::is_sorted(thresholds_deg.begin(), thresholds_deg.end())) {
    throw ValidationError("thresholds_deg", "thresholds must be ascending");
  }
  if (!(vsd_tol_mm > 0)) throw ValidationError("vsd_tol_mm", "tolerance must be positive");
  if (!(vsd_threshold > 0) || vsd_threshold > 1) throw ValidationError("vsd_threshold", "must be in (0, 1]");
  if (train_codes_per_object < 1) throw ValidationError("train_codes_per_object", "must be positive");
}

nlohmann::json to_json(const EvalConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"level", c.level},
          {"n_inplane", c.n_inplane},
          {"thresholds_deg", c.thresholds_deg},
          {"vsd_tol_mm", c.vsd_tol_mm},
          {"vsd_threshold", c.vsd_threshold},
          {"max_holdout", c.max_holdout},
          {"train_codes_per_object", c.train_codes_per_object},
          {"objects", c.objects}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("eval", "config must be a JSON object");
  EvalConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "mode") c.mode = codebook_mode_from_string(v.get<std::string>());
      else if (key == "level") c.level = v.get<int>();
      else if (key == "n_inplane") c.n_inplane = v.get<int>();
      else if (key == "thresholds_deg") c.thresholds_deg = v.get<std::vector<double>>();
      else if (key == "vsd_tol_mm") c.vsd_tol_mm = v.get<double>();
      else if (key == "vsd_threshold") c.vsd_threshold = v.get<double>();
      else if (key == "max_holdout") c.max_holdout = v.get<std::size_t>();
      else if (key == "train_codes_per_object") c.train_codes_per_object = v.get<std::size_t>();
      else if (key == "objects") c.objects = v.get<std::vector<std::string>>();
      else throw ValidationError(key, "unknown key");
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(key, "wrong type");
    }
  }
  c.validate();
  return c;
}

std::vector<SampleEval> EvalReport::samples_of(int object) const {
  std::vector<SampleEval> out;
  for (const auto& s : samples) {
    if (s.object == object) out.push_back(s);
  }
  return out;
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

EvalReport evaluate(const Network<float>& net, const Dataset& ds, const EvalConfig& cfg) {
  cfg.validate();
  const std::size_t n_obj = ds.objects.size(), d = net.arch().d, per = ds.image_numel(), pix = ds.camera.pixels();
  if (net.arch().image_h != ds.camera.height || net.arch().image_w != ds.camera.width) {
    throw DimensionError("network expects " + std::to_string(net.arch().image_h) + "x" +
                         std::to_string(net.arch().image_w) + " images, dataset has " +
                         std::to_string(ds.camera.height) + "x" + std::to_string(ds.camera.width));
  }
  std::vector<char> selected(n_obj, cfg.objects.empty());
  for (const auto& id : cfg.objects) {
    bool found = false;
    for (std::size_t o = 0; o < n_obj; ++o) {
      if (ds.objects[o].id == id) selected[o] = true, found = true;
    }
    if (!found) throw ValidationError("objects", "unknown object '" + id + "'");
  }

  EvalReport rep;
  rep.config = cfg;
  std::vector<std::size_t> holdout;
  for (auto i : ds.indices(Split::holdout)) {
    if (selected[ds.object[i]]) holdout.push_back(i);
  }
  holdout = spread(holdout, cfg.max_holdout);

  const auto gather = [&](const std::vector<std::size_t>& idx) {
    std::vector<float> x(idx.size() * per);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(ds.rgb.begin() + idx[k] * per, per, x.begin() + k * per);
    }
    return encode_images(net, x, idx.size());
  };
  const LatentCodes hold = gather(holdout);

  auto rotations = build_reference_rotations(sample_equidistant_views(cfg.level), cfg.n_inplane);
  rotations.level = cfg.level;
  std::vector<Mesh> meshes;
  for (const auto& o : ds.objects) meshes.push_back(make_primitive(o));

  std::vector<PoseCodebook> rendered(n_obj);
  TensorF features;
  PoseCodebook shared;
  const bool unconditioned = net.arch().variant == BlockVariant::mlp_nocond;
  if (cfg.mode == CodebookMode::rendered) {
    const auto light = light_of(ds);
    for (std::size_t o = 0; o < n_obj; ++o) {
      if (selected[o]) rendered[o] = build_codebook_rendered(net, meshes[o], rotations, ds.camera, light);
    }
  } else {
    features = codebook_rotation_features(net, rotations);
    // Without a shape input the codebook is the same for every query.
    if (unconditioned) shared = build_codebook_conditioned(net, std::vector<float>(d, 0.f), rotations, features);
  }

  rep.samples.resize(holdout.size());
  for (std::size_t k = 0; k < holdout.size(); ++k) {
    const std::size_t idx = holdout[k];
    const int o = ds.object[idx];
    const std::span<const float> z_o(hold.z_o.data() + k * d, d), z_p(hold.z_p.data() + k * d, d);
    PoseEstimate est;
    if (cfg.mode == CodebookMode::rendered) {
      est = retrieve_rotation(z_p, rendered[o], 1);
    } else if (unconditioned) {
      est = retrieve_rotation(z_p, shared, 1);
    } else {
      est = retrieve_rotation(z_p, build_codebook_conditioned(net, z_o, rotations, features), 1);
    }
    auto& s = rep.samples[k];
    s.index = idx;
    s.object = o;
    s.retrieved = est.index;
    s.score = est.score;
    s.error = symmetry_aware_error(est.rotation, ds.rotation[idx], ds.objects[o].symmetry);
    const Sample render =
        rasterize(meshes[o], Pose{est.rotation, Eigen::Vector3d(0, 0, ds.camera.z_ref)}, ds.camera);
    s.vsd = vsd(render.depth, std::span<const float>(ds.depth.data() + idx * pix, pix), cfg.vsd_tol_mm);
  }

  std::vector<double> thresholds;
  for (double t : cfg.thresholds_deg) thresholds.push_back(t * kDeg);
  rep.ap.assign(thresholds.size(), 0.0);
  std::vector<double> all_errors;
  std::size_t counted = 0;
  double recall_sum = 0;
  for (std::size_t o = 0; o < n_obj; ++o) {
    if (!selected[o]) continue;
    std::vector<double> errs, vsds;
    for (const auto& s : rep.samples) {
      if (s.object == static_cast<int>(o)) errs.push_back(s.error), vsds.push_back(s.vsd);
    }
    ObjectEval oe;
    oe.id = ds.objects[o].id;
    oe.n = errs.size();
    oe.ap = angular_ap(errs, thresholds);
    oe.median_error_deg = median(errs) / kDeg;
    oe.vsd_recall = vsd_recall(vsds, cfg.vsd_threshold);
    if (errs.empty()) {
      rep.warnings.push_back("object '" + oe.id + "' has no holdout samples");
    } else {
      for (std::size_t t = 0; t < thresholds.size(); ++t) rep.ap[t] += oe.ap[t];
      recall_sum += oe.vsd_recall;
      ++counted;
    }
    all_errors.insert(all_errors.end(), errs.begin(), errs.end());
    rep.objects.push_back(std::move(oe));
  }
  for (auto& a : rep.ap) a = counted ? a / static_cast<double>(counted) : kNaN;
  rep.vsd_recall = counted ? recall_sum / static_cast<double>(counted) : kNaN;
  rep.median_error_deg = median(all_errors) / kDeg;

  // Shape space: training codes of every object against the holdout codes.
  std::vector<std::size_t> train_idx;
  std::vector<int> train_ids, hold_ids;
  for (std::size_t o = 0; o < n_obj; ++o) {
    std::vector<std::size_t> of;
    for (auto i : ds.indices(Split::train)) {
      if (ds.object[i] == static_cast<int>(o)) of.push_back(i);
    }
    for (auto i : spread(of, cfg.train_codes_per_object)) train_idx.push_back(i), train_ids.push_back(int(o));
  }
  for (auto i : holdout) hold_ids.push_back(ds.object[i]);
  if (n_obj >= 2 && !holdout.empty()) {
    const LatentCodes tr = gather(train_idx);
    rep.shape = shape_cluster_report(tr.z_o, train_ids, hold.z_o, hold_ids, n_obj, d);
  } else {
    rep.shape.accuracy = kNaN;
    rep.warnings.push_back("shape-space accuracy needs at least 2 objects and holdout samples");
  }
  return rep;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["format"] = "poselatent-report/1";
  j["config"] = to_json(r.config);
  const auto arr = [](const std::vector<double>& v) {
    auto a = nlohmann::json::array();
    for (double x : v) a.push_back(number_or_null(x));
    return a;
  };
  auto& objs = j["objects"] = nlohmann::json::array();
  for (const auto& o : r.objects) {
    objs.push_back({{"id", o.id},
                    {"n", o.n},
                    {"ap", arr(o.ap)},
                    {"median_error_deg", number_or_null(o.median_error_deg)},
                    {"vsd_recall", number_or_null(o.vsd_recall)}});
  }
  j["aggregate"] = {{"ap", arr(r.ap)},
                    {"median_error_deg", number_or_null(r.median_error_deg)},
                    {"vsd_recall", number_or_null(r.vsd_recall)},
                    {"shape_accuracy", number_or_null(r.shape.accuracy)}};
  j["shape_space"] = {{"accuracy", number_or_null(r.shape.accuracy)}, {"confusion", r.shape.confusion}};
  auto& samples = j["samples"] = nlohmann::json::array();
  for (const auto& s : r.samples) {
    samples.push_back({{"index", s.index},
                       {"object", s.object},
                       {"retrieved", s.retrieved},
                       {"error_deg", s.error / kDeg},
                       {"vsd", s.vsd},
                       {"score", s.score}});
  }
  j["warnings"] = r.warnings;
  return j;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report '" + path.string() + "'");
  out.precision(9);
  out << "object,n";
  for (double t : r.config.thresholds_deg) out << ",ap" << t;
  out << ",median_error_deg,vsd_recall\n";
  const auto row = [&](const std::string& id, std::size_t n, const std::vector<double>& ap, double med, double rec) {
    out << id << ',' << n;
    for (double a : ap) out << ',' << a;
    out << ',' << med << ',' << rec << '\n';
  };
  for (const auto& o : r.objects) row(o.id, o.n, o.ap, o.median_error_deg, o.vsd_recall);
  row("all", r.samples.size(), r.ap, r.median_error_deg, r.vsd_recall);
}

void write_pca_csv(const std::filesystem::path& path, const PoseCodebook& cb, const PcaResult& pca) {
  if (pca.n != cb.size()) throw DimensionError("pca rows do not match the codebook");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(9);
  out << "index,pc1,pc2,pc3,beta,theta,phi\n";
  for (std::size_t i = 0; i < pca.n; ++i) {
    const auto v = view_angles(cb.rotations[i]);
    out << i;
    for (std::size_t k = 0; k < 3; ++k) out << ',' << (k < pca.dims ? pca.projections[i * pca.dims + k] : 0.0);
    out << ',' << v.beta << ',' << v.theta << ',' << v.phi << '\n';
  }
}

}  // namespace poselatent
