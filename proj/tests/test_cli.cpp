#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "poselatent/fta.hpp"

using namespace poselatent;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(POSELATENT_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.output += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("poselatent_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

json without_timestamp(json j) {
  j.erase("generated_at");
  return j;
}

// Archives equal apart from `generated_at` inside embedded JSON documents.
bool same_archive(const fs::path& a, const fs::path& b) {
  const Archive x = Archive::load(a), y = Archive::load(b);
  if (x.entries().size() != y.entries().size()) return false;
  for (std::size_t i = 0; i < x.entries().size(); ++i) {
    const auto &ex = x.entries()[i], &ey = y.entries()[i];
    if (ex.name != ey.name || ex.dtype != ey.dtype || ex.shape != ey.shape) return false;
    if (ex.dtype == DType::f32) {
      if (ex.values != ey.values) return false;
    } else if (without_timestamp(x.json(ex.name)) != without_timestamp(y.json(ey.name))) {
      return false;
    }
  }
  return true;
}

const char* kDatasetConfig = R"({
  "format": "poselatent-dataset-config/1",
  "objects": ["cylinder", "mug"],
  "rotations": {"kind": "random", "count": 20, "seed": 3},
  "seed": 1,
  "holdout_fraction": 0.2
})";

const char* kTrainConfig = R"({
  "format": "poselatent-train-config/1",
  "iters": 4, "batch": 4, "d": 8, "seed": 2, "log_every": 2, "checkpoint_every": 2,
  "enc_channels": [4, 8], "dec_channels": [8, 4], "mlp_hidden": [16, 16]
})";

const char* kEvalConfig = R"({"format": "poselatent-eval-config/1", "level": 1, "n_inplane": 4})";

// One small dataset and checkpoint shared by the pipeline cases.
struct Pipeline {
  fs::path dir = scratch("pipeline");
  fs::path data = dir / "ds";
  fs::path ckpt = dir / "ckpt.fta";

  Pipeline() {
    write(dir / "ds.json", kDatasetConfig);
    write(dir / "train.json", kTrainConfig);
    write(dir / "eval.json", kEvalConfig);
    const Run g = cli("gen-data --config " + (dir / "ds.json").string() + " --out " + data.string());
    REQUIRE_MESSAGE(g.code == 0, g.output);
    const Run t = cli("train --config " + (dir / "train.json").string() + " --data " + data.string() + " --out " +
                      ckpt.string());
    REQUIRE_MESSAGE(t.code == 0, t.output);
  }
};

Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("selftest passes within five minutes") {
  const auto t0 = std::chrono::steady_clock::now();
  const Run r = cli("selftest");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK_MESSAGE(r.code == 0, r.output);
  CHECK(secs < 300);
  CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("argument errors exit with 1") {
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("selftest --bogus").code == 1);
  CHECK(cli("train --config x.json").code == 1);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("missing files are named") {
  const fs::path dir = scratch("missing");
  const fs::path cfg = dir / "nope.json";
  const Run r = cli("gen-data --config " + cfg.string() + " --out " + (dir / "out").string());
  CHECK(r.code == 1);
  CHECK(r.output.find(cfg.string()) != std::string::npos);

  const Run e = cli("evaluate --ckpt " + (dir / "none.fta").string() + " --data " + dir.string() + " --report " +
                    (dir / "r.json").string());
  CHECK(e.code == 1);
  CHECK(e.output.find("none.fta") != std::string::npos);
}

TEST_CASE("invalid configs name the field") {
  const fs::path dir = scratch("invalid");
  write(dir / "ds.json", R"({"objects": ["cylinder", "teapot"], "rotations": {"kind": "random", "count": 2}})");
  const Run r = cli("gen-data --config " + (dir / "ds.json").string() + " --out " + (dir / "o").string());
  CHECK(r.code == 1);
  CHECK(r.output.find("objects") != std::string::npos);

  write(dir / "train.json", R"({"iters": 10, "learning_rate": 0.1})");
  const Run t = cli("train --config " + (dir / "train.json").string() + " --data " + dir.string() + " --out " +
                    (dir / "c.fta").string());
  CHECK(t.code == 1);
  CHECK(t.output.find("learning_rate") != std::string::npos);

  write(dir / "fmt.json", R"({"format": "poselatent-eval-config/1", "iters": 10})");
  const Run f = cli("train --config " + (dir / "fmt.json").string() + " --data " + dir.string() + " --out " +
                    (dir / "c.fta").string());
  CHECK(f.code == 1);
  CHECK(f.output.find("format") != std::string::npos);
}

TEST_CASE("gen-data, train and evaluate round trip") {
  const Pipeline& p = pipeline();
  CHECK(fs::exists(p.data / "manifest.json"));
  CHECK(fs::exists(fs::path(p.ckpt).replace_extension(".loss.csv")));
  const fs::path report = p.dir / "report.json";
  const Run r = cli("evaluate --ckpt " + p.ckpt.string() + " --data " + p.data.string() +
                    " --codebook-mode conditioned --config " + (p.dir / "eval.json").string() + " --report " +
                    report.string() + " --csv " + (p.dir / "report.csv").string());
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const json j = read_json(report);
  for (const char* key : {"format", "generated_at", "config", "aggregate", "objects", "shape_space", "samples"}) {
    CHECK_MESSAGE(j.contains(key), key);
  }
  for (const char* key : {"ap", "median_error_deg", "vsd_recall"}) CHECK_MESSAGE(j["aggregate"].contains(key), key);
  CHECK(j["shape_space"].contains("accuracy"));
  CHECK(j["objects"].size() == 2);
  CHECK(j["aggregate"]["ap"].size() == 6);
  CHECK(j["samples"].size() == 8);
  CHECK(j["config"]["level"] == 1);
  for (const auto& a : j["aggregate"]["ap"]) {
    CHECK(a.get<double>() >= 0);
    CHECK(a.get<double>() <= 1);
  }
  CHECK(fs::exists(p.dir / "report.csv"));
}

TEST_CASE("commands are idempotent and leave their inputs alone") {
  const Pipeline& p = pipeline();
  const auto data_before = snapshot(p.data);
  const std::string ckpt_before = slurp(p.ckpt);

  const fs::path dir = scratch("idempotent");
  write(dir / "ds.json", kDatasetConfig);
  write(dir / "train.json", kTrainConfig);
  REQUIRE(cli("gen-data --config " + (dir / "ds.json").string() + " --out " + (dir / "ds").string()).code == 0);
  CHECK(snapshot(dir / "ds") == data_before);

  REQUIRE(cli("train --config " + (dir / "train.json").string() + " --data " + p.data.string() + " --out " +
              (dir / "ckpt.fta").string())
              .code == 0);
  CHECK(same_archive(dir / "ckpt.fta", p.ckpt));

  for (int i = 0; i < 2; ++i) {
    REQUIRE(cli("evaluate --ckpt " + p.ckpt.string() + " --data " + p.data.string() + " --max-holdout 4 --report " +
                (dir / ("r" + std::to_string(i) + ".json")).string())
                .code == 0);
    REQUIRE(cli("build-codebook --ckpt " + p.ckpt.string() + " --mode conditioned --object mug --level 0 --inplane 3"
                " --out " + (dir / ("cb" + std::to_string(i) + ".fta")).string())
                .code == 0);
  }
  CHECK(without_timestamp(read_json(dir / "r0.json")) == without_timestamp(read_json(dir / "r1.json")));
  CHECK(slurp(dir / "cb0.fta") == slurp(dir / "cb1.fta"));

  CHECK(snapshot(p.data) == data_before);
  CHECK(slurp(p.ckpt) == ckpt_before);
}

TEST_CASE("codebooks, estimates and inspection") {
  const Pipeline& p = pipeline();
  const fs::path dir = scratch("estimate");
  const fs::path sample = dir / "sample.fta";
  const Run x = cli("inspect --data " + p.data.string() + " --export-sample 3 --out " + sample.string());
  REQUIRE_MESSAGE(x.code == 0, x.output);

  const fs::path cbc = dir / "cond.fta", cbr = dir / "rend.fta";
  REQUIRE(cli("build-codebook --ckpt " + p.ckpt.string() + " --mode conditioned --object cylinder --level 1 "
              "--inplane 4 --out " + cbc.string())
              .code == 0);
  REQUIRE(cli("build-codebook --ckpt " + p.ckpt.string() + " --mode rendered --object cylinder --data " +
              p.data.string() + " --level 1 --inplane 4 --out " + cbr.string())
              .code == 0);
  CHECK(cli("build-codebook --ckpt " + p.ckpt.string() + " --mode conditioned --object teapot --out " +
            (dir / "x.fta").string())
            .code == 1);
  CHECK(cli("build-codebook --ckpt " + p.ckpt.string() + " --mode sideways --object mug --out " +
            (dir / "x.fta").string())
            .code == 1);

  write(dir / "rots.json", R"({"kind": "explicit", "quaternions": [[1, 0, 0, 0], [0, 1, 0, 0]]})");
  const Run rr = cli("build-codebook --ckpt " + p.ckpt.string() + " --mode conditioned --object mug --rotations " +
                     (dir / "rots.json").string() + " --out " + (dir / "two.fta").string());
  CHECK_MESSAGE(rr.code == 0, rr.output);
  CHECK(rr.output.find("2 x 8") != std::string::npos);

  const fs::path pose = dir / "pose.json";
  const Run e = cli("estimate --ckpt " + p.ckpt.string() + " --codebook " + cbr.string() + " --input " +
                    sample.string() + " --out " + pose.string());
  REQUIRE_MESSAGE(e.code == 0, e.output);
  json j = read_json(pose);
  CHECK(j["format"] == "poselatent-pose/1");
  CHECK(j["rotation_quat_wxyz"].size() == 4);
  CHECK(j["translation_mm"].size() == 3);
  CHECK(j.contains("generated_at"));

  const Run ed = cli("estimate --ckpt " + p.ckpt.string() + " --codebook " + cbc.string() + " --input " +
                     sample.string() + " --depth --out " + pose.string());
  REQUIRE_MESSAGE(ed.code == 0, ed.output);
  j = read_json(pose);
  CHECK(j["scale"].is_number());
  CHECK(j.contains("depth_alignment"));

  const Run in = cli("inspect --codebook " + cbc.string() + " --pca " + (dir / "pca.csv").string());
  REQUIRE_MESSAGE(in.code == 0, in.output);
  std::ifstream csv(dir / "pca.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "index,pc1,pc2,pc3,beta,theta,phi");
  CHECK(cli("inspect --ckpt " + p.ckpt.string()).code == 0);
}

TEST_CASE("estimate rejects a codebook of another latent size") {
  const Pipeline& p = pipeline();
  const fs::path dir = scratch("mismatch");
  write(dir / "train16.json", R"({"iters": 1, "batch": 2, "d": 16, "seed": 2, "log_every": 1,
    "checkpoint_every": 1, "enc_channels": [4, 8], "dec_channels": [8, 4], "mlp_hidden": [16]})");
  REQUIRE(cli("train --config " + (dir / "train16.json").string() + " --data " + p.data.string() + " --out " +
              (dir / "c16.fta").string())
              .code == 0);
  REQUIRE(cli("build-codebook --ckpt " + (dir / "c16.fta").string() +
              " --mode conditioned --object mug --level 0 --inplane 2 --out " + (dir / "cb16.fta").string())
              .code == 0);
  REQUIRE(cli("inspect --data " + p.data.string() + " --export-sample 0 --out " + (dir / "s.fta").string()).code ==
          0);
  const Run r = cli("estimate --ckpt " + p.ckpt.string() + " --codebook " + (dir / "cb16.fta").string() +
                    " --input " + (dir / "s.fta").string() + " --out " + (dir / "pose.json").string());
  CHECK(r.code == 1);
  CHECK(r.output.find("d=8") != std::string::npos);
  CHECK(r.output.find("d=16") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "pose.json"));
}

TEST_CASE("ablate writes AP30 per variant") {
  const Pipeline& p = pipeline();
  const fs::path dir = scratch("ablate");
  write(dir / "train.json", kTrainConfig);
  write(dir / "eval.json", kEvalConfig);
  const Run r = cli("ablate --config " + (dir / "train.json").string() + " --data " + p.data.string() + " --out " +
                    (dir / "out").string() + " --eval-config " + (dir / "eval.json").string() +
                    " --variants bilinear mlp_nocond no_shape_space");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const json j = read_json(dir / "out" / "ablation.json");
  REQUIRE(j["variants"].size() == 3);
  for (const auto& v : j["variants"]) CHECK(v.contains("ap30"));
  CHECK(j["variants"][2]["variant"] == "no_shape_space");
}

TEST_CASE("POSELATENT_THREADS is validated") {
  CHECK(cli("selftest --help").code == 0);
  const std::string cmd = "POSELATENT_THREADS=zero " + std::string(POSELATENT_CLI) + " inspect >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 1);
}
