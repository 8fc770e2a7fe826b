// Command-line front end: dataset generation, training, codebooks, pose
// estimation, evaluation and the numerical self test.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "poselatent/errors.hpp"
#include "poselatent/eval.hpp"
#include "poselatent/fta.hpp"
#include "poselatent/selfcheck.hpp"
#include "poselatent/training.hpp"

using namespace poselatent;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSampleFormat = "poselatent-sample/1";
constexpr const char* kTrainConfigFormat = "poselatent-train-config/1";
constexpr const char* kEvalConfigFormat = "poselatent-eval-config/1";
constexpr const char* kAblationFormat = "poselatent-ablation/1";

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw ValidationError(what, "no such file '" + p.string() + "'");
}

json read_json(const fs::path& p, const std::string& what) {
  require_file(p, what);
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(what, "'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

void write_json(const fs::path& p, json j) {
  j["generated_at"] = utc_now();
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
}

// Configs may carry a "format" tag; when present it must match.
json strip_format(json j, const char* format, const std::string& what) {
  if (!j.is_object()) throw ValidationError(what, "config must be a JSON object");
  if (j.contains("format")) {
    if (j["format"] != format) throw ValidationError("format", std::string("expected \"") + format + "\"");
    j.erase("format");
  }
  return j;
}

Checkpoint open_checkpoint(const fs::path& p) {
  require_file(p, "ckpt");
  return load_checkpoint(p);
}

Dataset open_dataset(const fs::path& dir) {
  require_file(dir / "manifest.json", "data");
  return load_dataset(dir);
}

Eigen::Vector3d manifest_light(const Dataset& ds) {
  if (!ds.manifest.contains("light_dir")) return default_light_dir();
  const auto& l = ds.manifest["light_dir"];
  return Eigen::Vector3d(l.at(0).get<double>(), l.at(1).get<double>(), l.at(2).get<double>());
}

int object_row(const ArchConfig& arch, const std::string& id) {
  for (std::size_t i = 0; i < arch.object_ids.size(); ++i) {
    if (arch.object_ids[i] == id) return static_cast<int>(i);
  }
  return -1;
}

struct Sample1 {
  std::vector<float> rgb, depth;
  Camera camera;
  json meta;
};

Sample1 load_sample(const fs::path& p) {
  require_file(p, "input");
  const Archive a = Archive::load(p);
  Sample1 s;
  s.meta = a.contains("meta.json") ? a.json("meta.json") : json::object();
  if (s.meta.contains("format") && s.meta["format"] != kSampleFormat) {
    throw ValidationError("input", "'" + p.string() + "' is not a " + kSampleFormat + " file");
  }
  if (s.meta.contains("camera")) s.camera = camera_from_json(s.meta["camera"]);
  if (!a.contains("rgb")) throw ValidationError("input", "'" + p.string() + "' has no rgb tensor");
  const auto rgb = a.tensor("rgb");
  if (rgb.shape() != Shape{3, static_cast<std::size_t>(s.camera.height), static_cast<std::size_t>(s.camera.width)}) {
    throw ValidationError("input", "rgb must be [3," + std::to_string(s.camera.height) + "," +
                                       std::to_string(s.camera.width) + "], got " + shape_str(rgb.shape()));
  }
  s.rgb.assign(rgb.data().begin(), rgb.data().end());
  if (a.contains("depth")) {
    const auto d = a.tensor("depth");
    if (d.numel() != s.camera.pixels()) throw ValidationError("input", "depth must match the rgb size");
    s.depth.assign(d.data().begin(), d.data().end());
  }
  return s;
}

void check_image_size(const ArchConfig& arch, const Camera& cam, const std::string& what) {
  if (arch.image_h != cam.height || arch.image_w != cam.width) {
    throw ValidationError(what, "image size " + std::to_string(cam.height) + "x" + std::to_string(cam.width) +
                                    " does not match the checkpoint's " + std::to_string(arch.image_h) + "x" +
                                    std::to_string(arch.image_w));
  }
}

// ---- commands ---------------------------------------------------------------------------------

int cmd_gen_data(const fs::path& config, const fs::path& out) {
  const DatasetConfig cfg = dataset_config_from_json(read_json(config, "config"));
  const json m = generate_dataset(cfg, out);
  std::cout << "wrote " << m["n_samples"] << " samples (" << m["n_holdout"] << " held out) to " << out.string()
            << '\n';
  return 0;
}

TrainConfig load_train_config(const fs::path& config, const std::string& variant) {
  TrainConfig cfg = train_config_from_json(strip_format(read_json(config, "config"), kTrainConfigFormat, "config"));
  if (variant == "no_shape_space") {
    cfg.variant = BlockVariant::bilinear;
    cfg.shape_space = false;
  } else if (!variant.empty()) {
    try {
      cfg.variant = block_variant_from_string(variant);
    } catch (const std::exception&) {
      throw ValidationError("variant", "expected bilinear, mlp_concat, mlp_nocond or no_shape_space");
    }
  }
  cfg.validate();
  return cfg;
}

TrainResult run_training(const TrainConfig& cfg, const Dataset& ds, const fs::path& out,
                         const std::optional<fs::path>& workdir) {
  TrainOptions opts;
  opts.out_dir = workdir;
  opts.on_log = [](const LossLogEntry& e) {
    std::cerr << "iter " << e.iter << " recon " << e.recon << " shape " << e.shape << " pose " << e.pose << '\n';
  };
  TrainResult r = train(ds, cfg, opts);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const json meta{{"config", to_json(cfg)}, {"iteration", r.iterations}, {"generated_at", utc_now()}};
  save_checkpoint(out, r.net, r.codebook, meta, &r.adam);
  fs::path log = out;
  log.replace_extension(".loss.csv");
  write_loss_csv(log, r.log);
  return r;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out, const std::string& variant,
              const std::optional<fs::path>& workdir) {
  const TrainConfig cfg = load_train_config(config, variant);
  const Dataset ds = open_dataset(data);
  run_training(cfg, ds, out, workdir);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

int cmd_build_codebook(const fs::path& ckpt, const std::string& mode_s, const std::string& object,
                       const std::optional<fs::path>& data, int level, int inplane,
                       const std::optional<fs::path>& rotations_file, const std::optional<fs::path>& shape_from,
                       const fs::path& out) {
  CodebookMode mode;
  try {
    mode = codebook_mode_from_string(mode_s);
  } catch (const std::exception&) {
    throw ValidationError("mode", "expected conditioned or rendered");
  }
  const Checkpoint ck = open_checkpoint(ckpt);
  const ArchConfig& arch = ck.net.arch();

  RotationSet rots;
  if (rotations_file) {
    rots = rotation_set_from_json(read_json(*rotations_file, "rotations"));
  } else {
    if (level < 0 || level > 6) throw ValidationError("level", "must lie in [0, 6]");
    if (inplane < 1) throw ValidationError("inplane", "must be positive");
    rots = build_reference_rotations(sample_equidistant_views(level), inplane);
    rots.level = level;
  }

  std::optional<Dataset> ds;
  if (data) ds = open_dataset(*data);

  PoseCodebook cb;
  if (mode == CodebookMode::conditioned) {
    std::vector<float> c_o(static_cast<std::size_t>(arch.d), 0.f);
    if (shape_from) {
      const Sample1 s = load_sample(*shape_from);
      check_image_size(arch, s.camera, "shape-from");
      c_o = encode_images(ck.net, s.rgb, 1).z_o;
    } else if (arch.variant != BlockVariant::mlp_nocond) {
      if (object.empty()) throw ValidationError("object", "conditioned codebooks need --object or --shape-from");
      const int row = object_row(arch, object);
      if (row < 0) throw ValidationError("object", "object '" + object + "' is not in the checkpoint's shape codebook");
      c_o = ck.codebook.row(static_cast<std::size_t>(row));
    }
    cb = build_codebook_conditioned(ck.net, c_o, rots);
  } else {
    if (object.empty()) throw ValidationError("object", "rendered codebooks need --object");
    std::optional<ObjectSpec> spec;
    Camera cam;
    Eigen::Vector3d light = default_light_dir();
    if (ds) {
      for (const auto& o : ds->objects) {
        if (o.id == object) spec = o;
      }
      cam = ds->camera;
      light = manifest_light(*ds);
    } else {
      for (const auto& o : default_corpus()) {
        if (o.id == object) spec = o;
      }
      cam.height = arch.image_h;
      cam.width = arch.image_w;
    }
    if (!spec) throw ValidationError("object", "unknown object '" + object + "'");
    check_image_size(arch, cam, "data");
    cb = build_codebook_rendered(ck.net, make_primitive(*spec), rots, cam, light);
  }
  cb.object_id = object;
  save_codebook(out, cb);
  std::cout << "wrote " << cb.size() << " x " << cb.d << " " << to_string(cb.mode) << " codebook to " << out.string()
            << '\n';
  return 0;
}

int cmd_estimate(const fs::path& ckpt, const fs::path& codebook, const fs::path& input, bool use_depth,
                 std::size_t top_k, const fs::path& out) {
  const Checkpoint ck = open_checkpoint(ckpt);
  require_file(codebook, "codebook");
  const PoseCodebook cb = load_codebook(codebook);
  const std::size_t d = static_cast<std::size_t>(ck.net.d());
  if (cb.d != d) {
    throw ValidationError("codebook", "checkpoint latent dim d=" + std::to_string(d) + " but codebook d=" +
                                          std::to_string(cb.d));
  }
  const Sample1 s = load_sample(input);
  check_image_size(ck.net.arch(), s.camera, "input");
  if (use_depth && s.depth.empty()) throw ValidationError("depth", "--depth needs a depth tensor in the input");
  if (use_depth && !ck.net.arch().depth_head) throw ValidationError("depth", "the checkpoint has no depth head");

  const LatentCodes codes = encode_images(ck.net, s.rgb, 1);
  PoseEstimate est = retrieve_rotation(codes.z_p, cb, std::max<std::size_t>(1, top_k));
  json extra = json::object();
  if (use_depth) {
    NoGradGuard guard;
    const auto rec = ck.net.decode(TensorF::from({1, d}, codes.z_o), TensorF::from({1, d}, codes.z_p));
    const std::vector<float> pred(rec.depth.data().begin(), rec.depth.data().end());
    const DepthAlignment al = estimate_translation_depth(pred, s.depth, s.camera);
    est.scale = al.scale;
    est.translation = al.scale * Eigen::Vector3d(0, 0, s.camera.z_ref) + al.translation;
    extra["depth_alignment"] = {{"refined", al.refined}, {"mean_distance_mm", al.mean_distance}};
  } else if (!cb.render_meta.empty()) {
    std::optional<BoundingBox2D> box;
    if (!s.depth.empty()) box = depth_bbox(s.depth, s.camera.height, s.camera.width);
    if (s.meta.contains("bbox")) {
      const auto& b = s.meta["bbox"];
      box = BoundingBox2D{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>()};
    }
    if (box) est.translation = estimate_translation_pinhole(*box, cb.render_meta[est.index], s.camera);
  }
  json j = to_json(est);
  j["format"] = "poselatent-pose/1";
  j["codebook_mode"] = to_string(cb.mode);
  j["object"] = cb.object_id;
  j.update(extra);
  write_json(out, j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

EvalConfig load_eval_config(const std::optional<fs::path>& config) {
  if (!config) return {};
  return eval_config_from_json(strip_format(read_json(*config, "config"), kEvalConfigFormat, "config"));
}

int cmd_evaluate(const fs::path& ckpt, const fs::path& data, const std::string& mode_s,
                 const std::optional<fs::path>& config, std::size_t max_holdout, const fs::path& report,
                 const std::optional<fs::path>& csv) {
  EvalConfig cfg = load_eval_config(config);
  if (!mode_s.empty()) {
    try {
      cfg.mode = codebook_mode_from_string(mode_s);
    } catch (const std::exception&) {
      throw ValidationError("codebook-mode", "expected conditioned or rendered");
    }
  }
  if (max_holdout) cfg.max_holdout = max_holdout;
  cfg.validate();
  const Checkpoint ck = open_checkpoint(ckpt);
  const Dataset ds = open_dataset(data);
  const EvalReport r = evaluate(ck.net, ds, cfg);
  write_json(report, to_json(r));
  if (csv) write_report_csv(*csv, r);
  std::cout << "median error " << r.median_error_deg << " deg, shape accuracy " << r.shape.accuracy << ", report "
            << report.string() << '\n';
  return 0;
}

int cmd_inspect(const std::optional<fs::path>& codebook, const std::optional<fs::path>& pca_out,
                const std::optional<fs::path>& ckpt, const std::optional<fs::path>& data,
                std::optional<std::size_t> export_sample, const std::optional<fs::path>& out) {
  json j = json::object();
  if (codebook) {
    require_file(*codebook, "codebook");
    const PoseCodebook cb = load_codebook(*codebook);
    j["codebook"] = {{"rows", cb.size()},
                     {"d", cb.d},
                     {"mode", to_string(cb.mode)},
                     {"object", cb.object_id},
                     {"level", cb.rotations.level},
                     {"n_inplane", cb.rotations.n_inplane}};
    if (pca_out) {
      const PcaResult pca = pca_project(cb.codes, cb.size(), cb.d, 3);
      write_pca_csv(*pca_out, cb, pca);
      double total = 0;
      for (double e : pca.eigenvalues) total += e;
      json ratio = json::array();
      for (double e : pca.explained) ratio.push_back(total > 0 ? e / total : 0.0);
      j["codebook"]["pca_eigenvalues"] = pca.explained;
      j["codebook"]["pca_variance_ratio"] = ratio;
    }
  } else if (pca_out) {
    throw ValidationError("pca", "--pca needs --codebook");
  }
  if (ckpt) {
    const Checkpoint ck = open_checkpoint(*ckpt);
    j["checkpoint"] = {{"arch", to_json(ck.net.arch())}, {"parameters", ck.net.param_count()}, {"meta", ck.meta}};
  }
  if (data) {
    const Dataset ds = open_dataset(*data);
    json objects = json::array();
    for (const auto& o : ds.objects) objects.push_back(o.id);
    j["data"] = {{"samples", ds.size()},
                 {"train", ds.indices(Split::train).size()},
                 {"holdout", ds.indices(Split::holdout).size()},
                 {"objects", objects}};
    if (export_sample) {
      if (!out) throw ValidationError("out", "--export-sample needs --out");
      const std::size_t n = *export_sample;
      if (n >= ds.size()) throw ValidationError("export-sample", "index " + std::to_string(n) + " out of range");
      const std::size_t P = ds.camera.pixels();
      const auto H = static_cast<std::size_t>(ds.camera.height), W = static_cast<std::size_t>(ds.camera.width);
      Archive a;
      const auto& q = ds.rotation[n];
      a.put_json("meta.json", {{"format", kSampleFormat},
                               {"camera", to_json(ds.camera)},
                               {"object", ds.objects[static_cast<std::size_t>(ds.object[n])].id},
                               {"rotation_quat_wxyz", {q.w, q.x, q.y, q.z}},
                               {"dataset_index", n}});
      a.put("rgb", {3, H, W}, std::vector<float>(ds.rgb.begin() + n * 3 * P, ds.rgb.begin() + (n + 1) * 3 * P));
      a.put("depth", {1, H, W}, std::vector<float>(ds.depth.begin() + n * P, ds.depth.begin() + (n + 1) * P));
      a.save(*out);
      j["exported"] = out->string();
    }
  } else if (export_sample) {
    throw ValidationError("export-sample", "--export-sample needs --data");
  }
  if (j.empty()) throw ValidationError("inspect", "nothing to inspect; pass --codebook, --ckpt or --data");
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_ablate(const fs::path& config, const fs::path& data, const fs::path& out_dir,
               const std::vector<std::string>& variants, const std::optional<fs::path>& eval_config) {
  const Dataset ds = open_dataset(data);
  EvalConfig ecfg = load_eval_config(eval_config);
  ecfg.mode = CodebookMode::conditioned;
  std::vector<TrainConfig> cfgs;
  for (const auto& v : variants) cfgs.push_back(load_train_config(config, v));
  fs::create_directories(out_dir);
  json rows = json::array();
  for (std::size_t i = 0; i < variants.size(); ++i) {
    std::cerr << "training " << variants[i] << '\n';
    const TrainResult r = run_training(cfgs[i], ds, out_dir / (variants[i] + ".fta"), std::nullopt);
    const EvalReport rep = evaluate(r.net, ds, ecfg);
    json row{{"variant", variants[i]}, {"ap", rep.ap}, {"median_error_deg", rep.median_error_deg}};
    for (std::size_t t = 0; t < ecfg.thresholds_deg.size(); ++t) {
      if (ecfg.thresholds_deg[t] == 30) row["ap30"] = rep.ap[t];
    }
    rows.push_back(row);
    write_json(out_dir / (variants[i] + ".report.json"), to_json(rep));
  }
  const json summary{{"format", kAblationFormat},
                     {"thresholds_deg", ecfg.thresholds_deg},
                     {"train_config", to_json(cfgs.front())},
                     {"variants", rows}};
  write_json(out_dir / "ablation.json", summary);
  std::cout << rows.dump(2) << '\n';
  return 0;
}

int cmd_selftest() {
  bool ok = true;
  run_selftest([&](const CheckResult& r) {
    ok = ok && r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << std::fixed
              << std::setprecision(1) << r.seconds << " s]" << std::defaultfloat << std::endl;
  });
  return ok ? 0 : 2;
}

void apply_thread_limit() {
  const char* env = std::getenv("POSELATENT_THREADS");
  if (!env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) throw ValidationError("POSELATENT_THREADS", "must be a positive integer");
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled shape/pose latent codes for multi-object rotation retrieval"};
  app.require_subcommand(1);

  fs::path config, data, out, ckpt, codebook_path, input, report;
  std::optional<fs::path> workdir, rotations_file, shape_from, data_opt, eval_cfg, csv, pca, cb_opt, ckpt_opt;
  std::string variant, mode, object;
  int level = 3, inplane = 12;
  bool use_depth = false;
  std::size_t max_holdout = 0, top_k = 5;
  std::optional<std::size_t> export_sample;
  std::vector<std::string> variants{"bilinear", "mlp_nocond", "no_shape_space"};

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  gen->add_option("--config", config, "Dataset config JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train the autoencoder and pose block");
  tr->add_option("--config", config, "Training config JSON")->required();
  tr->add_option("--data", data, "Dataset directory")->required();
  tr->add_option("--out", out, "Checkpoint to write")->required();
  tr->add_option("--variant", variant, "bilinear | mlp_concat | mlp_nocond | no_shape_space");
  tr->add_option("--workdir", workdir, "Directory for periodic checkpoints");

  auto* bc = app.add_subcommand("build-codebook", "Build a pose codebook");
  bc->add_option("--ckpt", ckpt, "Checkpoint")->required();
  bc->add_option("--mode", mode, "conditioned | rendered")->required();
  bc->add_option("--object", object, "Object id");
  bc->add_option("--data", data_opt, "Dataset whose camera, light and objects are used for rendering");
  auto* lvl = bc->add_option("--level", level, "Icosahedron subdivision level");
  auto* inp = bc->add_option("--inplane", inplane, "In-plane rotations per view");
  auto* rf = bc->add_option("--rotations", rotations_file, "Rotation source JSON");
  rf->excludes(lvl)->excludes(inp);
  bc->add_option("--shape-from", shape_from, "Sample whose shape code conditions the codebook");
  bc->add_option("--out", out, "Codebook to write")->required();

  auto* es = app.add_subcommand("estimate", "Estimate the pose of one sample");
  es->add_option("--ckpt", ckpt, "Checkpoint")->required();
  es->add_option("--codebook", codebook_path, "Pose codebook")->required();
  es->add_option("--input", input, "Sample file")->required();
  es->add_flag("--depth", use_depth, "Estimate scale and translation from the input depth");
  es->add_option("--top-k", top_k, "Number of ranked candidates to report");
  es->add_option("--out", out, "Pose JSON to write")->required();

  auto* ev = app.add_subcommand("evaluate", "Evaluate on the held-out samples");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--codebook-mode", mode, "conditioned | rendered");
  ev->add_option("--config", eval_cfg, "Evaluation config JSON");
  ev->add_option("--max-holdout", max_holdout, "Cap on evaluated samples (0 = all)");
  ev->add_option("--report", report, "Report JSON to write")->required();
  ev->add_option("--csv", csv, "Per-object CSV summary");

  auto* in = app.add_subcommand("inspect", "Summarize artifacts");
  in->add_option("--codebook", cb_opt, "Pose codebook");
  in->add_option("--pca", pca, "Write the codebook's PCA projection as CSV");
  in->add_option("--ckpt", ckpt_opt, "Checkpoint");
  in->add_option("--data", data_opt, "Dataset directory");
  in->add_option("--export-sample", export_sample, "Dataset index to export as a sample file");
  in->add_option("--out", workdir, "Sample file to write");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate several block variants");
  ab->add_option("--config", config, "Training config JSON")->required();
  ab->add_option("--data", data, "Dataset directory")->required();
  ab->add_option("--out", out, "Output directory")->required();
  ab->add_option("--variants", variants, "Variants to compare");
  ab->add_option("--eval-config", eval_cfg, "Evaluation config JSON");

  auto* st = app.add_subcommand("selftest", "Run the numerical self checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    apply_thread_limit();
    if (*gen) return cmd_gen_data(config, out);
    if (*tr) return cmd_train(config, data, out, variant, workdir);
    if (*bc) {
      return cmd_build_codebook(ckpt, mode, object, data_opt, level, inplane, rotations_file, shape_from, out);
    }
    if (*es) return cmd_estimate(ckpt, codebook_path, input, use_depth, top_k, out);
    if (*ev) return cmd_evaluate(ckpt, data, mode, eval_cfg, max_holdout, report, csv);
    if (*in) return cmd_inspect(cb_opt, pca, ckpt_opt, data_opt, export_sample, workdir);
    if (*ab) return cmd_ablate(config, data, out, variants, eval_cfg);
    if (*st) return cmd_selftest();
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
