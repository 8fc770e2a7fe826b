#include "poselatent/selfcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "poselatent/errors.hpp"
#include "poselatent/eval.hpp"
#include "poselatent/hsh.hpp"
#include "poselatent/training.hpp"

namespace poselatent {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

TensorD random_input(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD::from(std::move(s), std::move(v), true);
}

ObjectSpec corpus_object(const std::string& id) {
  for (auto& s : default_corpus()) {
    if (s.id == id) return s;
  }
  throw ArgumentError("no corpus object '" + id + "'");
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

// Relative error of the end-to-end loss over a subset of parameters, in double.
double end_to_end_gradient_error() {
  DatasetConfig dc;
  dc.objects = {corpus_object("cylinder"), corpus_object("mug")};
  dc.rotations = random_rotations(1, 4);
  dc.seed = 2;
  dc.holdout_fraction = 0;
  const Dataset ds = render_dataset(dc);

  TrainConfig cfg;
  cfg.batch = 2;
  cfg.d = 8;
  cfg.enc_channels = {4, 8};
  cfg.dec_channels = {8, 4};
  cfg.mlp_hidden = {16, 16};
  const ArchConfig arch = cfg.arch(ds);
  Network<double> base = Network<float>(arch, 21).cast<double>();
  // Zero biases put black background pixels exactly on the leaky-relu kink.
  Rng brng(3);
  for (auto& [name, t] : base.params()) {
    if (name.ends_with(".b")) {
      for (auto& v : t.mutable_data()) v = brng.uniform(-0.1, 0.1);
    }
  }
  const ShapeCodebook cb = ShapeCodebook::init(2, 8, 1, cfg.decay, cfg.tau);

  const std::size_t H = ds.camera.height, W = ds.camera.width, hd = arch.hsh_dim;
  const auto table = encode_rotations(ds.rotations, HshConfig{arch.hsh_max_n, arch.hsh_dim});
  std::vector<double> hsh;
  std::vector<std::size_t> ids;
  for (std::size_t n = 0; n < 2; ++n) {
    const std::size_t r = ds.rotation_index[n];
    hsh.insert(hsh.end(), table.begin() + r * hd, table.begin() + (r + 1) * hd);
    ids.push_back(static_cast<std::size_t>(ds.object[n]));
  }
  const auto x = TensorD::from({2, 3, H, W}, std::vector<double>(ds.rgb.begin(), ds.rgb.end()));
  const auto gd = TensorD::from({2, 1, H, W}, std::vector<double>(ds.depth.begin(), ds.depth.end()));
  const auto h = TensorD::from({2, hd}, hsh);

  const std::vector<std::string> names{"block.w3",  "block.fc_h.w", "block.fc_c.b", "block.ffn.a1.b",
                                       "dec.rgb.b", "dec.depth.b",  "enc.conv1.b",  "enc.fc.b"};
  std::vector<TensorD> inputs;
  for (const auto& n : names) inputs.push_back(cast<double>(base.param(n), true));
  auto op = [&](std::span<const TensorD> in) {
    Network<double> net = base;
    for (std::size_t i = 0; i < names.size(); ++i) net.param(names[i]) = in[i];
    return batch_losses(net, cb, cfg, x, x, gd, h, ids).total;
  };
  return grad_check(op, inputs, 1e-6);
}

}  // namespace

nlohmann::json to_json(const CheckResult& r) {
  return {{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}, {"seconds", r.seconds}};
}

CheckResult check_gradients() {
  const auto t0 = Clock::now();
  Rng rng(19);
  double worst = 0;
  std::string worst_name;
  auto run = [&](const char* name, const GradCheckOp& op, std::vector<TensorD> in) {
    const double err = grad_check(op, std::move(in));
    if (err >= worst) worst = err, worst_name = name;
  };
  run("affine", [](auto in) { return affine(in[0], in[1], in[2]); },
      {random_input({3, 4}, rng), random_input({4, 2}, rng), random_input({2}, rng)});
  run("conv2d", [](auto in) { return conv2d(in[0], in[1], 1, in[2]); },
      {random_input({2, 2, 4, 3}, rng), random_input({3, 2, 3, 3}, rng), random_input({3}, rng)});
  run("conv2d stride 2", [](auto in) { return conv2d(in[0], in[1], 2); },
      {random_input({1, 2, 5, 4}, rng), random_input({2, 2, 3, 3}, rng)});
  run("upsample", [](auto in) { return upsample2x_nearest(in[0]); }, {random_input({1, 2, 2, 3}, rng)});
  run("spatial_mean", [](auto in) { return spatial_mean(in[0]); }, {random_input({2, 3, 3, 2}, rng)});
  run("spatial_std", [](auto in) { return spatial_std(in[0]); }, {random_input({2, 3, 3, 2}, rng)});
  run("adain", [](auto in) { return adain_modulate(in[0], in[1], in[2]); },
      {random_input({1, 2, 2, 2}, rng), random_input({1, 2}, rng), random_input({1, 2}, rng)});
  run("bilinear", [](auto in) { return bilinear_contract(in[0], in[1], in[2]); },
      {random_input({4, 4, 4}, rng), random_input({2, 4}, rng), random_input({2, 4}, rng)});
  run("leaky_relu", [](auto in) { return leaky_relu(in[0]); }, {random_input({10}, rng)});
  run("sigmoid", [](auto in) { return sigmoid(in[0]); }, {random_input({10}, rng, -5, 5)});
  run("softplus", [](auto in) { return softplus(in[0]); }, {random_input({10}, rng, -5, 5)});
  run("add", [](auto in) { return add(in[0], in[1]); }, {random_input({6}, rng), random_input({6}, rng)});
  run("sub", [](auto in) { return sub(in[0], in[1]); }, {random_input({6}, rng), random_input({6}, rng)});
  run("mul", [](auto in) { return mul(in[0], in[1]); }, {random_input({6}, rng), random_input({6}, rng)});
  run("scale", [](auto in) { return add_scalar(scale(in[0], 2.5), -1.0); }, {random_input({6}, rng)});
  run("sum", [](auto in) { return sum(in[0]); }, {random_input({2, 3}, rng)});
  run("mean", [](auto in) { return mean(in[0]); }, {random_input({2, 3}, rng)});
  run("mse", [](auto in) { return mse(in[0], in[1]); }, {random_input({2, 3}, rng), random_input({2, 3}, rng)});
  run("reshape", [](auto in) { return reshape(in[0], {3, 2}); }, {random_input({2, 3}, rng)});
  run("slice/concat", [](auto in) { return concat_cols(slice_cols(in[0], 1, 3), in[1]); },
      {random_input({2, 4}, rng), random_input({2, 2}, rng)});
  run("normalize_rows", [](auto in) { return normalize_rows(in[0]); }, {random_input({3, 4}, rng)});
  run("row_dot", [](auto in) { return row_dot(in[0], in[1]); }, {random_input({3, 4}, rng), random_input({3, 4}, rng)});
  const std::vector<std::size_t> targets{2, 0, 1};
  run("cross_entropy", [&](auto in) { return cross_entropy(in[0], targets); }, {random_input({3, 4}, rng, -3, 3)});

  const double e2e = end_to_end_gradient_error();
  CheckResult r;
  r.name = "gradients";
  r.pass = worst < 1e-4 && e2e < 1e-3;
  r.detail = "worst primitive " + worst_name + " rel err " + fmt(worst) + " (< 1e-4); end-to-end rel err " + fmt(e2e) +
             " (< 1e-3)";
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_hsh(std::size_t samples, std::uint64_t seed) {
  const auto t0 = Clock::now();
  const double gram = orthonormality_check({6, 128}, samples, seed);
  const double c0 = hsh_basis(UnitQuaternion::from_axis_angle(Eigen::Vector3d(1, 2, 3).normalized(), 1.1), 0)[0];
  const double expect = 1 / std::sqrt(2 * std::numbers::pi * std::numbers::pi);
  CheckResult r;
  r.name = "hsh orthonormality";
  r.pass = gram < 0.05 && std::abs(c0 - expect) < 1e-6;
  r.detail = "max |G - I| " + fmt(gram) + " (< 0.05) over " + std::to_string(samples) + " samples; Z_000 " + fmt(c0);
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_sampling() {
  const auto t0 = Clock::now();
  const auto views = sample_equidistant_views(4);
  const auto set = build_reference_rotations(views, 36);
  CheckResult r;
  r.name = "sampling";
  r.pass = views.size() == 2562 && set.size() == 92232;
  r.detail = "level-4 views " + std::to_string(views.size()) + " (2562), reference rotations " +
             std::to_string(set.size()) + " (92232)";
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_retrieval(std::size_t queries, std::size_t rows, std::size_t d, double max_latency_ms) {
  const auto t0 = Clock::now();
  Rng rng(11);
  PoseCodebook cb;
  cb.d = d;
  cb.codes.resize(rows * d);
  for (auto& v : cb.codes) v = static_cast<float>(rng.normal());
  cb.rotations = random_rotations(rows, 12);
  std::vector<double> inv_norm(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < d; ++j) n += double(cb.codes[i * d + j]) * cb.codes[i * d + j];
    inv_norm[i] = 1 / std::sqrt(n);
  }

  std::size_t agree = 0;
  std::vector<double> latency;
  for (std::size_t t = 0; t < queries; ++t) {
    std::vector<float> q(d);
    for (auto& v : q) v = static_cast<float>(rng.normal());
    const auto s = Clock::now();
    const std::size_t got = retrieve_rotation(q, cb, 1).index;
    latency.push_back(1000 * seconds_since(s));
    std::size_t best = 0;
    double best_s = -2;
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += double(q[j]) * cb.codes[i * d + j];
      const double sim = dot * inv_norm[i];
      if (sim > best_s) best_s = sim, best = i;
    }
    agree += got == best;
  }
  const double med = median(latency);
  CheckResult r;
  r.name = "retrieval";
  r.pass = agree == queries && med < max_latency_ms;
  r.detail = std::to_string(agree) + "/" + std::to_string(queries) + " queries agree with the oracle on " +
             std::to_string(rows) + "x" + std::to_string(d) + "; median latency " + fmt(med) + " ms (< " +
             fmt(max_latency_ms) + ")";
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_vsd() {
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.emplace_back(what);
  };
  const std::vector<float> a{500, 510, 520, 530}, b{500, 510, 550, 530}, c{520, 510, 520, 530};
  const std::vector<float> left{500, 0, 500, 0}, right{0, 500, 0, 500};
  expect(vsd(a, a) == 0.0, "identical maps");
  expect(vsd(left, right) == 1.0, "disjoint maps");
  expect(vsd(a, b) == 0.25, "one pixel off");
  expect(vsd(a, c) == 0.25, "tolerance boundary");

  const Camera cam;
  const auto q = UnitQuaternion::from_axis_angle(Eigen::Vector3d(1, 2, 0.5).normalized(), 0.9);
  double worst = 0;
  for (const std::string id : {"cylinder", "box"}) {
    const auto spec = corpus_object(id);
    const Mesh mesh = make_primitive(spec);
    const auto gt = rasterize(mesh, Pose{q, {0, 0, cam.z_ref}}, cam);
    for (const auto& s : spec.symmetry.elements(48)) {
      const auto est = rasterize(mesh, Pose{q * s, {0, 0, cam.z_ref}}, cam);
      worst = std::max(worst, vsd(est.depth, gt.depth));
    }
  }
  expect(worst < 1e-6, "symmetry invariance");
  const std::vector<double> edge{0.3}, below{0.2999999};
  expect(vsd_recall(edge, 0.3) == 0.0 && vsd_recall(below, 0.3) == 1.0, "strict recall threshold");

  CheckResult r;
  r.name = "vsd";
  r.pass = failed.empty();
  r.detail = "worst VSD under symmetry " + fmt(worst);
  for (const auto& f : failed) r.detail += "; failed: " + f;
  r.seconds = seconds_since(t0);
  return r;
}

CheckResult check_translation() {
  const auto t0 = Clock::now();
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 16;
  const RenderMeta row{50, 1000};
  double pin = 0;
  auto rel = [&](double got, double want) { pin = std::max(pin, std::abs(got - want) / std::abs(want)); };
  auto t = estimate_translation_pinhole({16, 16, 25}, row, cam);
  rel(t.z(), 2000);
  t = estimate_translation_pinhole({26, 11, 40}, row, cam);
  rel(t.z(), 1250);
  rel(t.x(), 125);
  rel(t.y(), -62.5);

  Camera hires;
  hires.height = hires.width = 256;
  hires.fx = hires.fy = 1120;
  hires.cx = hires.cy = 128;
  const Mesh mug = make_primitive(corpus_object("mug"));
  Mesh big = mug;
  for (auto& v : big.vertices) v *= 2;
  const auto q = UnitQuaternion::from_axis_angle(Eigen::Vector3d(1, 2, 3).normalized(), 0.7);
  const Eigen::Vector3d shift(10, -5, 40);
  const auto pred = rasterize(mug, Pose{q, {0, 0, 500}}, hires);
  const auto obs = rasterize(big, Pose{q, Eigen::Vector3d(0, 0, 1000) + shift}, hires);
  const auto al = estimate_translation_depth(pred.depth, obs.depth, hires);
  const double scale_err = std::abs(al.scale - 2) / 2, t_err = (al.translation - shift).norm();

  CheckResult r;
  r.name = "translation";
  r.pass = pin < 1e-6 && scale_err < 0.01 && t_err < 1.0;
  r.detail = "pinhole rel err " + fmt(pin) + " (< 1e-6); depth alignment scale err " + fmt(100 * scale_err) +
             "% (< 1%), translation err " + fmt(t_err) + " mm (< 1)";
  r.seconds = seconds_since(t0);
  return r;
}

std::vector<CheckResult> run_selftest(const std::function<void(const CheckResult&)>& on_result) {
  std::vector<CheckResult> out;
  auto note = [&](CheckResult r) {
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  };
  note(check_gradients());
  note(check_hsh());
  note(check_sampling());
  note(check_retrieval());
  note(check_vsd());
  note(check_translation());
  return out;
}

}  // namespace poselatent
