#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "poselatent/errors.hpp"
#include "poselatent/eval.hpp"

using namespace poselatent;
using std::numbers::pi;
namespace fs = std::filesystem;

namespace {

constexpr double kDeg = pi / 180;

ObjectSpec spec_of(const std::string& id) {
  for (auto& s : default_corpus()) {
    if (s.id == id) return s;
  }
  throw std::runtime_error("no object " + id);
}

ArchConfig tiny_arch(const std::vector<std::string>& ids) {
  ArchConfig a;
  a.d = 8;
  a.hsh_max_n = 3;
  a.hsh_dim = 16;
  a.enc_channels = {4, 8};
  a.dec_base_channels = 8;
  a.dec_channels = {8, 4};
  a.mlp_hidden = {16, 16};
  a.object_ids = ids;
  return a;
}

}  // namespace

TEST_CASE("angular AP counts errors at or below each threshold") {
  const std::vector<double> errs{5 * kDeg, 15 * kDeg, 25 * kDeg};
  const std::vector<double> t{20 * kDeg, pi};
  const auto ap = angular_ap(errs, t);
  CHECK(ap[0] == doctest::Approx(2.0 / 3.0));
  CHECK(ap[1] == 1.0);
  const std::vector<double> at{15 * kDeg};
  CHECK(angular_ap(errs, at)[0] == doctest::Approx(2.0 / 3.0));
  CHECK(std::isnan(angular_ap({}, t)[0]));
  const std::vector<double> bad{std::nan("")};
  CHECK_THROWS_AS(angular_ap(bad, t), ArgumentError);
  CHECK(default_ap_thresholds_deg() == std::vector<double>{5, 10, 15, 20, 30, 60});
}

TEST_CASE("angular AP is monotone in the threshold") {
  Rng rng(3);
  std::vector<double> errs(500), ts;
  for (auto& e : errs) e = rng.uniform(0, pi);
  for (int k = 0; k <= 90; ++k) ts.push_back(k * 2 * kDeg);
  const auto ap = angular_ap(errs, ts);
  for (std::size_t i = 1; i < ap.size(); ++i) CHECK(ap[i] >= ap[i - 1]);
  CHECK(ap.back() == 1.0);
}

TEST_CASE("VSD on hand-built maps") {
  const std::vector<float> a{500, 510, 520, 530};
  CHECK(vsd(a, a) == 0.0);
  const std::vector<float> left{500, 0, 500, 0}, right{0, 500, 0, 500};
  CHECK(vsd(left, right) == 1.0);
  const std::vector<float> b{500, 510, 550, 530};
  CHECK(vsd(a, b) == 0.25);
  // Exactly at the tolerance costs 1 (strict inequality).
  const std::vector<float> c{520, 510, 520, 530};
  CHECK(vsd(a, c) == 0.25);
  const std::vector<float> empty(4, 0);
  CHECK(vsd(empty, empty) == 0.0);
  CHECK_THROWS_AS(vsd(a, std::vector<float>{1, 2}), DimensionError);
  const std::vector<std::uint8_t> vis{1, 1, 0, 0}, all{1, 1, 1, 1};
  CHECK(vsd(a, b, vis, vis) == 0.0);
  CHECK(vsd(a, b, vis, all) == 0.5);
}

TEST_CASE("VSD is symmetric in its arguments") {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    std::vector<float> x(64), y(64);
    for (auto& v : x) v = rng.uniform() < 0.3 ? 0.f : static_cast<float>(rng.uniform(480, 540));
    for (auto& v : y) v = rng.uniform() < 0.3 ? 0.f : static_cast<float>(rng.uniform(480, 540));
    CHECK(vsd(x, y) == vsd(y, x));
  }
}

TEST_CASE("VSD vanishes for poses related by an object symmetry") {
  const Camera cam;
  const auto q = UnitQuaternion::from_axis_angle(Eigen::Vector3d(1, 2, 0.5).normalized(), 0.9);
  for (const std::string id : {"cylinder", "box"}) {
    const auto spec = spec_of(id);
    const Mesh mesh = make_primitive(spec);
    const auto gt = rasterize(mesh, Pose{q, {0, 0, 500}}, cam);
    const double step = id == "box" ? 90.0 : 7.5;
    for (int k = 1; k < 4; ++k) {
      const auto s = UnitQuaternion::from_axis_angle(Eigen::Vector3d::UnitZ(), k * step * kDeg);
      const auto est = rasterize(mesh, Pose{q * s, {0, 0, 500}}, cam);
      CHECK(vsd(est.depth, gt.depth) < 1e-6);
    }
  }
}

TEST_CASE("VSD recall uses a strict threshold") {
  const std::vector<double> s{0.0, 0.2, 0.5};
  CHECK(vsd_recall(s) == doctest::Approx(2.0 / 3.0));
  CHECK(vsd_recall(std::vector<double>(5, 0.0)) == 1.0);
  CHECK(vsd_recall(std::vector<double>(5, 0.0), 0.0) == 0.0);
  const std::vector<double> edge{0.3};
  CHECK(vsd_recall(edge, 0.3) == 0.0);
  CHECK(std::isnan(vsd_recall({})));
}

TEST_CASE("PCA of coplanar data has a zero third component") {
  Rng rng(4);
  std::vector<float> codes;
  for (int i = 0; i < 200; ++i) {
    const double u = rng.normal(), v = rng.normal();
    codes.insert(codes.end(), {float(u + v), float(u - 2 * v), float(3 * u)});
  }
  const auto p = pca_project(codes, 200, 3);
  CHECK(std::abs(p.explained[2]) < 1e-8);
  CHECK(p.explained[0] >= p.explained[1]);
}

TEST_CASE("PCA of an isotropic sample has near-equal variances") {
  Rng rng(5);
  std::vector<float> codes(10000 * 3);
  for (auto& v : codes) v = static_cast<float>(rng.normal());
  const auto p = pca_project(codes, 10000, 3);
  CHECK(p.explained[2] / p.explained[0] > 0.9);
}

TEST_CASE("PCA projections ignore a constant offset") {
  Rng rng(6);
  std::vector<float> codes(300 * 6);
  for (auto& v : codes) v = static_cast<float>(rng.normal());
  auto shifted = codes;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += static_cast<float>(i % 6) * 2.5f;
  const auto a = pca_project(codes, 300, 6);
  const auto b = pca_project(shifted, 300, 6);
  for (std::size_t i = 0; i < a.projections.size(); ++i) CHECK(std::abs(a.projections[i] - b.projections[i]) < 1e-5);
}

TEST_CASE("PCA reconstruction error equals the discarded eigenvalues") {
  Rng rng(7);
  const std::size_t n = 400, d = 5;
  std::vector<float> codes(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) codes[i * d + j] = static_cast<float>(rng.normal() * (j + 1));
  }
  const auto p = pca_project(codes, n, d, 2);
  double err = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double rec = p.mean[j];
      for (std::size_t k = 0; k < 2; ++k) rec += p.projections[i * 2 + k] * p.components[k * d + j];
      err += std::pow(codes[i * d + j] - rec, 2);
    }
  }
  err /= static_cast<double>(n);
  double discarded = 0;
  for (std::size_t k = 2; k < d; ++k) discarded += p.eigenvalues[k];
  CHECK(std::abs(err - discarded) < 1e-6 * std::max(1.0, discarded));
}

TEST_CASE("PCA sign convention and errors") {
  Rng rng(8);
  std::vector<float> codes(50 * 4);
  for (auto& v : codes) v = static_cast<float>(rng.normal());
  const auto p = pca_project(codes, 50, 4);
  for (std::size_t k = 0; k < 3; ++k) {
    double big = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (std::abs(p.components[k * 4 + j]) > std::abs(big)) big = p.components[k * 4 + j];
    }
    CHECK(big > 0);
  }
  CHECK_THROWS_AS(pca_project(std::vector<float>(12, 1.f), 3, 4), ArgumentError);
}

TEST_CASE("shape clustering on separated and degenerate clusters") {
  Rng rng(10);
  std::vector<float> codes;
  std::vector<int> ids;
  for (int o = 0; o < 3; ++o) {
    for (int i = 0; i < 20; ++i) {
      for (int k = 0; k < 3; ++k) codes.push_back(static_cast<float>((k == o ? 5.0 : 0.0) + 0.3 * rng.normal()));
      ids.push_back(o);
    }
  }
  const auto r = shape_cluster_report(codes, ids, codes, ids, 3, 3);
  CHECK(r.accuracy == 1.0);
  for (int o = 0; o < 3; ++o) {
    std::size_t row = 0;
    for (auto c : r.confusion[o]) row += c;
    CHECK(row == 20);
  }

  // Two objects sharing one centroid: every code goes to object 0.
  std::vector<float> same;
  std::vector<int> same_ids;
  for (int i = 0; i < 40; ++i) {
    same.insert(same.end(), {1.f, 2.f});
    same_ids.push_back(i % 2);
  }
  const auto deg = shape_cluster_report(same, same_ids, same, same_ids, 2, 2);
  CHECK(deg.accuracy == doctest::Approx(0.5));
  CHECK(deg.confusion[1][0] == 20);

  const std::vector<int> only0(40, 0);
  CHECK_THROWS_AS(shape_cluster_report(same, only0, same, same_ids, 2, 2), ArgumentError);
  CHECK_THROWS_AS(shape_cluster_report(same, same_ids, same, same_ids, 1, 2), ArgumentError);
}

TEST_CASE("evaluation config parsing is strict") {
  const auto c = eval_config_from_json({{"mode", "rendered"}, {"level", 1}, {"n_inplane", 4}});
  CHECK(c.mode == CodebookMode::rendered);
  CHECK(c.level == 1);
  CHECK_THROWS_AS(eval_config_from_json({{"levle", 1}}), ValidationError);
  CHECK_THROWS_AS(eval_config_from_json({{"level", "one"}}), ValidationError);
  CHECK_THROWS_AS(eval_config_from_json({{"thresholds_deg", {30, 10}}}), ValidationError);
  try {
    eval_config_from_json({{"n_inplane", 0}});
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.field == "n_inplane");
  }
}

TEST_CASE("end-to-end evaluation report on an untrained network") {
  DatasetConfig dc;
  dc.objects = {spec_of("cylinder"), spec_of("lprism")};
  dc.rotations = random_rotations(40, 2);
  dc.seed = 3;
  dc.holdout_fraction = 0.25;
  const Dataset ds = render_dataset(dc);
  const Network<float> net(tiny_arch({"cylinder", "lprism"}), 1);
  EvalConfig cfg;
  cfg.level = 0;
  cfg.n_inplane = 6;
  cfg.train_codes_per_object = 10;
  for (auto mode : {CodebookMode::conditioned, CodebookMode::rendered}) {
    cfg.mode = mode;
    const auto r = evaluate(net, ds, cfg);
    CHECK(r.samples.size() == 20);
    REQUIRE(r.objects.size() == 2);
    for (const auto& o : r.objects) {
      for (std::size_t t = 1; t < o.ap.size(); ++t) CHECK(o.ap[t] >= o.ap[t - 1]);
      CHECK(o.vsd_recall >= 0);
      CHECK(o.vsd_recall <= 1);
    }
    CHECK(r.shape.accuracy >= 0);
    CHECK(r.shape.accuracy <= 1);
    const auto j = to_json(r);
    for (const char* key : {"format", "config", "objects", "aggregate", "shape_space", "samples", "warnings"}) {
      CHECK(j.contains(key));
    }
    CHECK(to_json(evaluate(net, ds, cfg)).dump() == j.dump());
  }
  const auto csv = fs::temp_directory_path() / "poselatent_test_report.csv";
  write_report_csv(csv, evaluate(net, ds, cfg));
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "object,n,ap5,ap10,ap15,ap20,ap30,ap60,median_error_deg,vsd_recall");
}

TEST_CASE("PCA export lists view angles per codebook row") {
  const Network<float> net(tiny_arch({"a", "b"}), 1);
  const auto rots = build_reference_rotations(sample_equidistant_views(0), 3);
  const auto cb = build_codebook_conditioned(net, std::vector<float>(8, 0.5f), rots);
  const auto p = pca_project(cb.codes, cb.size(), cb.d);
  const auto path = fs::temp_directory_path() / "poselatent_test_pca.csv";
  write_pca_csv(path, cb, p);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "index,pc1,pc2,pc3,beta,theta,phi");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 36);
}
