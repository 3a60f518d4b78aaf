#include "fanct/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "fanct/manifest.hpp"
#include "fanct/tensor_io.hpp"
#include "oracles.hpp"

using namespace fanct;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / "fanct_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const fs::path& dataset() {
  static fs::path dir = [] {
    fs::path d = fresh_dir("data");
    int rc = run_cli({"generate", "--out", d.string(), "--size", "32", "--views", "6",
                      "--n-detector", "96", "--count", "8", "--seed", "3"});
    REQUIRE(rc == 0);
    return d;
  }();
  return dir;
}

std::vector<std::string> tiny_net_flags() {
  return {"--base-channels", "4", "--scales", "1", "--groups", "2", "--c-mem", "2"};
}

int run(std::vector<std::string> args, const std::vector<std::string>& extra = {}) {
  for (const auto& a : extra) args.push_back(a);
  return run_cli(args);
}

}  // namespace

TEST_CASE("config json is applied with strict key checking") {
  RunConfig cfg;
  apply_config_json(cfg, R"({
    "size": 64, "views": 12, "seed": 9,
    "phantom": {"sigma": 2.5, "blob_max": 8},
    "sim": {"count": 10, "quadrature": "fine_step", "dtype": "f64"},
    "calib": {"rounds": 7, "with_bias": false},
    "net": {"base_channels": 4},
    "train": {"epochs": 3, "restarts": [1, 2]},
    "solve": {"method": "tv", "tv_alpha": 0.5},
    "lambdas": [0.5, 0.25]
  })");
  CHECK(cfg.size == 64);
  CHECK(cfg.views == 12);
  CHECK(cfg.phantom.seed == 9);
  CHECK(cfg.sim.seed == 9);
  CHECK(cfg.train.seed == 9);
  CHECK(cfg.phantom.sigma == 2.5);
  CHECK(cfg.phantom.blob_max == 8);
  CHECK(cfg.sim.count == 10);
  CHECK(cfg.sim.quadrature == Quadrature::fine_step);
  CHECK(cfg.sim.dtype == Dtype::f64);
  CHECK(cfg.calib.schedule.rounds == 7);
  CHECK(cfg.calib.with_bias == false);
  CHECK(cfg.net.base_channels == 4);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.restarts == std::vector<std::size_t>{1, 2});
  CHECK(cfg.solve.method == "tv");
  CHECK(cfg.solve.tv_alpha == 0.5);
  CHECK(cfg.lambdas_init == std::vector<double>{0.5, 0.25});

  RunConfig r;
  CHECK_THROWS_AS(apply_config_json(r, R"({"sizes": 1})"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, R"({"phantom": {"sgima": 1.0}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, R"({"solve": {"method": 3}})"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, R"({"views": -2})"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, R"({"sim": {"quadrature": "best"}})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, R"([1, 2])"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_json(r, "not json"), std::invalid_argument);
}

TEST_CASE("the effective config is a fixed point of apply") {
  RunConfig a;
  a.size = 48;
  a.views = 20;
  a.stage = "unrolled";
  a.k = 3;
  a.lambdas_init = {1.25, 0.5, 0.125};
  a.phantom.sigma = 1.5;
  a.sim.noise_std = 0.01;
  a.sim.quadrature = Quadrature::exact_siddon;
  a.calib.schedule.lr_angles = 3e-5;
  a.train.restarts = {10, 20};
  a.train.weight_sharing = true;
  a.solve.tv_iterations = 77;
  a.solve.hamming = false;

  std::string first = effective_config_json(a, "train");
  nlohmann::json doc = nlohmann::json::parse(first);
  doc.erase("command");

  RunConfig b;
  apply_config_json(b, doc.dump());
  std::string second = effective_config_json(b, "train");
  CHECK(first == second);
}

TEST_CASE("generate writes a loadable dataset and its provenance") {
  const fs::path& d = dataset();

  CHECK(fs::exists(d / "manifest.json"));
  CHECK(fs::exists(d / "effective_config.json"));
  nlohmann::json echo = nlohmann::json::parse(slurp(d / "effective_config.json"));
  CHECK(echo.at("command") == "generate");
  CHECK(echo.at("size") == 32);
  CHECK(echo.at("sim").at("seed") == 9 - 6);  // --seed 3 fans out

  DatasetManifest m = load_manifest(d / "manifest.json");
  CHECK(m.records.size() == 8);
  REQUIRE(m.sim.has_value());
  CHECK(m.sim->geometry.d_source == 64.0);  // 2 * size default
  CHECK(m.sim->geometry.n_detector == 96);
  CHECK(m.sim->geometry.angles.size() == 6);
  CHECK(!m.split_records("train").empty());
  CHECK(!m.split_records("test").empty());

  Tensor x = read_tensor(m.resolve(m.records[0].phantom));
  CHECK(x.dim(0) == 32);
  Tensor y = read_tensor(m.resolve(m.records[0].sinogram));
  CHECK(y.dim(0) == 6);
  CHECK(!m.records[0].fbp.empty());
}

TEST_CASE("datasets are reproducible by seed and changed by it") {
  fs::path a = fresh_dir("seed_a"), b = fresh_dir("seed_b"), c = fresh_dir("seed_c");
  std::vector<std::string> base = {"generate", "--size", "32", "--views", "6",
                                   "--n-detector", "96", "--count", "2"};
  REQUIRE(run(base, {"--out", a.string(), "--seed", "3"}) == 0);
  REQUIRE(run(base, {"--out", b.string(), "--seed", "3"}) == 0);
  REQUIRE(run(base, {"--out", c.string(), "--seed", "4"}) == 0);

  DatasetManifest ma = load_manifest(a / "manifest.json");
  DatasetManifest mb = load_manifest(b / "manifest.json");
  DatasetManifest mc = load_manifest(c / "manifest.json");
  CHECK(slurp(a / ma.records[0].sinogram) == slurp(b / mb.records[0].sinogram));
  CHECK(slurp(a / ma.records[0].phantom) == slurp(b / mb.records[0].phantom));
  CHECK(read_tensor(a / ma.records[0].phantom)
            .same_bits(read_tensor(a / ma.records[0].phantom)));
  CHECK(!read_tensor(a / ma.records[0].phantom)
             .same_bits(read_tensor(c / mc.records[0].phantom)));
}

TEST_CASE("bad invocations exit with a usage error") {
  fs::path out = fresh_dir("bad");
  CHECK(run({"generate", "--out", out.string(), "--bogus"}) == 1);
  CHECK(run({"generate"}) == 1);                                    // missing --out
  CHECK(run({"reconstruct", "--out", out.string()}) == 1);          // missing --manifest
  CHECK(run({"generate", "--out", out.string(), "--quadrature", "best"}) == 1);
  CHECK(run({"nonsense", "--out", out.string()}) == 1);
  CHECK(run({"generate", "--out", out.string(), "--config", "/nope/missing.json"}) == 1);

  fs::path cfg = out / "bad.json";
  std::ofstream(cfg) << R"({"viewz": 3})";
  CHECK(run({"generate", "--out", out.string(), "--config", cfg.string()}) == 1);

  // validation failures inside the command also map to exit 1
  CHECK(run({"generate", "--out", out.string(), "--size", "8"}) == 1);
  const fs::path& d = dataset();
  CHECK(run({"reconstruct", "--manifest", (d / "manifest.json").string(), "--out",
             out.string(), "--method", "sirt"}) == 1);
  CHECK(run({"reconstruct", "--manifest", (d / "manifest.json").string(), "--out",
             out.string(), "--method", "unrolled"}) == 1);  // no --model
  CHECK(run({"train", "--manifest", (d / "manifest.json").string(), "--out", out.string(),
             "--stage", "extend"}) == 1);  // no --init
  CHECK(run({"evaluate", "--manifest", (d / "manifest.json").string(), "--out",
             out.string()}) == 1);  // no --pred

  // missing files surface as runtime errors (exit 2)
  CHECK(run({"reconstruct", "--manifest", "/nope/manifest.json", "--out",
             out.string()}) == 2);
}

TEST_CASE("config files layer under flags") {
  fs::path out = fresh_dir("layer");
  fs::path cfg = out / "cfg.json";
  std::ofstream(cfg) << R"({"views": 5, "n_detector": 96, "size": 32, "sim": {"count": 2}})";

  fs::path d1 = fresh_dir("layer_cfg");
  REQUIRE(run({"generate", "--config", cfg.string(), "--out", d1.string()}) == 0);
  CHECK(load_manifest(d1 / "manifest.json").sim->geometry.angles.size() == 5);

  fs::path d2 = fresh_dir("layer_flag");
  REQUIRE(run({"generate", "--config", cfg.string(), "--out", d2.string(), "--views",
               "7"}) == 0);
  CHECK(load_manifest(d2 / "manifest.json").sim->geometry.angles.size() == 7);
}

TEST_CASE("calibrate fits the embedded truth from the data alone") {
  const fs::path& d = dataset();
  fs::path out = fresh_dir("calib");
  REQUIRE(run({"calibrate", "--manifest", (d / "manifest.json").string(), "--out",
               out.string(), "--rounds", "2", "--inner", "3", "--pairs", "2"}) == 0);

  CalibrationResult r = load_calibration(out / "calibration.json");
  CHECK(std::abs(r.params.d_source - 64.0) < 1e-3);
  CHECK(std::abs(r.params.s_fwd - 1.0) < 1e-3);
  CHECK(r.s_fbp > 0.0);
  REQUIRE(r.bias.ndim() == 2);
  CHECK(r.bias.dim(0) == 6);
  CHECK(r.bias.dim(1) == 96);
}

TEST_CASE("reconstruction runs rerun bitwise and score against truth") {
  const fs::path& d = dataset();
  fs::path r1 = fresh_dir("fbp_1"), r2 = fresh_dir("fbp_2");
  std::vector<std::string> args = {"reconstruct", "--manifest",
                                   (d / "manifest.json").string(), "--method", "fbp",
                                   "--split", "test"};
  REQUIRE(run(args, {"--out", r1.string()}) == 0);
  REQUIRE(run(args, {"--out", r2.string()}) == 0);

  DatasetManifest m = load_manifest(d / "manifest.json");
  auto test_recs = m.split_records("test");
  REQUIRE(!test_recs.empty());
  const std::string id = test_recs[0]->id;

  CHECK(fs::exists(r1 / "recon" / (id + ".ctt")));
  CHECK(fs::exists(r1 / "recon" / (id + ".png")));
  CHECK(slurp(r1 / "recon" / (id + ".ctt")) == slurp(r2 / "recon" / (id + ".ctt")));
  CHECK(slurp(r1 / "report.csv") == slurp(r2 / "report.csv"));
  CHECK(slurp(r1 / "report.json") == slurp(r2 / "report.json"));

  nlohmann::json rep = nlohmann::json::parse(slurp(r1 / "report.json"));
  CHECK(rep.at("count").get<std::size_t>() == test_recs.size());
  CHECK(rep.at("mean_rmse").get<double>() > 0.0);

  // evaluate on the stored predictions reproduces the reconstruct-time scores
  fs::path ev = fresh_dir("fbp_eval");
  REQUIRE(run({"evaluate", "--manifest", (d / "manifest.json").string(), "--out", ev.string(),
               "--pred", (r1 / "recon").string(), "--split", "test"}) == 0);
  nlohmann::json rep2 = nlohmann::json::parse(slurp(ev / "report.json"));
  CHECK(rep2.at("mean_rmse") == rep.at("mean_rmse"));
  CHECK(rep2.at("mean_ssim") == rep.at("mean_ssim"));
}

TEST_CASE("the iterative and tv methods run end to end") {
  const fs::path& d = dataset();
  fs::path lw = fresh_dir("landweber");
  REQUIRE(run({"reconstruct", "--manifest", (d / "manifest.json").string(), "--out",
               lw.string(), "--method", "landweber", "--split", "test", "--lambda", "0.5",
               "--iterations", "3"}) == 0);
  CHECK(fs::exists(lw / "report.json"));

  fs::path tv = fresh_dir("tv");
  REQUIRE(run({"reconstruct", "--manifest", (d / "manifest.json").string(), "--out",
               tv.string(), "--method", "tv", "--split", "test", "--tv-alpha", "1e-4",
               "--tv-iterations", "5"}) == 0);
  CHECK(fs::exists(tv / "report.json"));
}

TEST_CASE("the limit flag truncates the record list exactly") {
  const fs::path& d = dataset();
  fs::path out = fresh_dir("limit");
  REQUIRE(run({"reconstruct", "--manifest", (d / "manifest.json").string(), "--out",
               out.string(), "--method", "fbp", "--split", "", "--limit", "2"}) == 0);
  nlohmann::json rep = nlohmann::json::parse(slurp(out / "report.json"));
  CHECK(rep.at("count").get<std::size_t>() == 2);

  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out / "recon"))
    if (e.path().extension() == ".ctt") ++files;
  CHECK(files == 2);
}

TEST_CASE("training stages chain into reconstruction") {
  const fs::path& d = dataset();
  std::string man = (d / "manifest.json").string();

  fs::path post = fresh_dir("post");
  REQUIRE(run({"train", "--manifest", man, "--out", post.string(), "--stage", "postproc",
               "--epochs", "1", "--limit", "2", "--seed", "1"},
              tiny_net_flags()) == 0);
  CHECK(fs::exists(post / "postproc_net.json"));
  CHECK(fs::exists(post / "curve.csv"));
  CHECK(fs::exists(post / "train_summary.json"));
  NetParams np = load_net_params(post / "postproc_net.json");
  CHECK(np.cfg.base_channels == 4);

  fs::path unr = fresh_dir("unrolled");
  REQUIRE(run({"train", "--manifest", man, "--out", unr.string(), "--stage", "unrolled",
               "--k", "4", "--epochs", "1", "--limit", "2", "--seed", "1", "--init",
               (post / "postproc_net.json").string()},
              tiny_net_flags()) == 0);
  ItNet net = load_itnet(unr / "itnet.json");
  CHECK(net.k() == 4);
  CHECK(net.sets.size() == 4);

  fs::path ext = fresh_dir("extend");
  REQUIRE(run({"train", "--manifest", man, "--out", ext.string(), "--stage", "extend",
               "--epochs", "1", "--limit", "2", "--seed", "1", "--init",
               (unr / "itnet.json").string()}) == 0);
  ItNet extended = load_itnet(ext / "itnet_extended.json");
  CHECK(extended.k() == 5);

  fs::path rec = fresh_dir("unrolled_recon");
  REQUIRE(run({"reconstruct", "--manifest", man, "--out", rec.string(), "--method",
               "unrolled", "--split", "test", "--model",
               (unr / "itnet.json").string()}) == 0);
  CHECK(fs::exists(rec / "report.json"));
}

TEST_CASE("ensemble training writes members that reconstruct together") {
  const fs::path& d = dataset();
  std::string man = (d / "manifest.json").string();

  fs::path ens = fresh_dir("ens");
  REQUIRE(run({"train", "--manifest", man, "--out", ens.string(), "--stage", "unrolled",
               "--k", "2", "--epochs", "1", "--limit", "2", "--seed", "1",
               "--ensemble-size", "2"},
              tiny_net_flags()) == 0);
  CHECK(fs::exists(ens / "member_00.json"));
  CHECK(fs::exists(ens / "member_01.json"));

  fs::path rec = fresh_dir("ens_recon");
  REQUIRE(run({"reconstruct", "--manifest", man, "--out", rec.string(), "--method",
               "ensemble", "--split", "test", "--model", (ens / "member_00.json").string(),
               "--model", (ens / "member_01.json").string()}) == 0);
  nlohmann::json rep = nlohmann::json::parse(slurp(rec / "report.json"));
  CHECK(rep.at("mean_rmse").get<double>() > 0.0);
}
