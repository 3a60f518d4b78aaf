#include "fanct/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "CLI11.hpp"
#include "json.hpp"

#include "fanct/fbp.hpp"
#include "fanct/metrics.hpp"
#include "fanct/png_io.hpp"
#include "fanct/rng.hpp"
#include "fanct/solvers.hpp"
#include "fanct/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fanct {

RunConfig::RunConfig() { sim.count = 256; }

namespace {

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
  throw std::invalid_argument("config: unknown key \"" + key + "\" in " + section);
}

double jd(const json& v, const std::string& key) {
  if (!v.is_number()) throw std::invalid_argument("config: " + key + " must be a number");
  return v.get<double>();
}

std::size_t jz(const json& v, const std::string& key) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<long long>() < 0))
    throw std::invalid_argument("config: " + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

std::uint64_t ju(const json& v, const std::string& key) {
  return static_cast<std::uint64_t>(jz(v, key));
}

bool jb(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw std::invalid_argument("config: " + key + " must be a boolean");
  return v.get<bool>();
}

std::string js(const json& v, const std::string& key) {
  if (!v.is_string()) throw std::invalid_argument("config: " + key + " must be a string");
  return v.get<std::string>();
}

Quadrature parse_quadrature(const std::string& s) {
  if (s == "matched") return Quadrature::matched;
  if (s == "fine_step") return Quadrature::fine_step;
  if (s == "exact_siddon") return Quadrature::exact_siddon;
  throw std::invalid_argument("config: unknown quadrature \"" + s +
                              "\" (matched, fine_step, exact_siddon)");
}

std::string quadrature_name(Quadrature q) {
  switch (q) {
    case Quadrature::matched: return "matched";
    case Quadrature::fine_step: return "fine_step";
    case Quadrature::exact_siddon: return "exact_siddon";
  }
  return "matched";
}

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw std::invalid_argument("config: unknown dtype \"" + s + "\" (f32, f64)");
}

void apply_phantom(PhantomConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "att_adipose") c.att_adipose = jd(v, key);
    else if (key == "att_skin") c.att_skin = jd(v, key);
    else if (key == "att_fibro") c.att_fibro = jd(v, key);
    else if (key == "att_micro") c.att_micro = jd(v, key);
    else if (key == "blob_min") c.blob_min = jz(v, key);
    else if (key == "blob_max") c.blob_max = jz(v, key);
    else if (key == "micro_min") c.micro_min = jz(v, key);
    else if (key == "micro_max") c.micro_max = jz(v, key);
    else if (key == "sigma") c.sigma = jd(v, key);
    else if (key == "seed") c.seed = ju(v, key);
    else unknown_key("phantom", key);
  }
}

void apply_sim(SimConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "count") c.count = jz(v, key);
    else if (key == "s_fwd") c.s_fwd = jd(v, key);
    else if (key == "step") c.step = jd(v, key);
    else if (key == "quadrature") c.quadrature = parse_quadrature(js(v, key));
    else if (key == "fine_step") c.fine_step = jd(v, key);
    else if (key == "noise_std") c.noise_std = jd(v, key);
    else if (key == "train_frac") c.train_frac = jd(v, key);
    else if (key == "val_frac") c.val_frac = jd(v, key);
    else if (key == "test_frac") c.test_frac = jd(v, key);
    else if (key == "write_fbp") c.write_fbp = jb(v, key);
    else if (key == "dtype") c.dtype = parse_dtype(js(v, key));
    else if (key == "seed") c.seed = ju(v, key);
    else unknown_key("sim", key);
  }
}

void apply_calib(CalibConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "pairs") c.pairs = jz(v, key);
    else if (key == "split") c.split = js(v, key);
    else if (key == "rounds") c.schedule.rounds = jz(v, key);
    else if (key == "inner") c.schedule.inner = jz(v, key);
    else if (key == "lr_s_fwd") c.schedule.lr_s_fwd = jd(v, key);
    else if (key == "lr_d_source") c.schedule.lr_d_source = jd(v, key);
    else if (key == "lr_angles") c.schedule.lr_angles = jd(v, key);
    else if (key == "lr_decay") c.schedule.lr_decay = jd(v, key);
    else if (key == "plateau_rel") c.schedule.plateau_rel = jd(v, key);
    else if (key == "divergence_factor") c.schedule.divergence_factor = jd(v, key);
    else if (key == "init_s_fwd") c.init_s_fwd = jd(v, key);
    else if (key == "init_d_source") c.init_d_source = jd(v, key);
    else if (key == "step") c.step = jd(v, key);
    else if (key == "with_bias") c.with_bias = jb(v, key);
    else unknown_key("calib", key);
  }
}

void apply_net(NetConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "scales") c.scales = jz(v, key);
    else if (key == "base_channels") c.base_channels = jz(v, key);
    else if (key == "c_mem") c.c_mem = jz(v, key);
    else if (key == "groups") c.groups = jz(v, key);
    else if (key == "residual") c.residual = jb(v, key);
    else unknown_key("net", key);
  }
}

void apply_train(TrainConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "epochs") c.epochs = jz(v, key);
    else if (key == "batch_size") c.batch_size = jz(v, key);
    else if (key == "lr") c.lr = jd(v, key);
    else if (key == "mu") c.mu = jd(v, key);
    else if (key == "restarts") {
      if (!v.is_array()) throw std::invalid_argument("config: restarts must be an array");
      c.restarts.clear();
      for (const auto& e : v) c.restarts.push_back(jz(e, "restarts[]"));
    } else if (key == "seed") c.seed = ju(v, key);
    else if (key == "weight_sharing") c.weight_sharing = jb(v, key);
    else if (key == "train_limit") c.train_limit = jz(v, key);
    else if (key == "val_limit") c.val_limit = jz(v, key);
    else if (key == "split_rotate") c.split_rotate = jz(v, key);
    else unknown_key("train", key);
  }
}

void apply_solve(SolveConfig& c, const json& o) {
  for (const auto& [key, v] : o.items()) {
    if (key == "method") c.method = js(v, key);
    else if (key == "split") c.split = js(v, key);
    else if (key == "limit") c.limit = jz(v, key);
    else if (key == "lambda") c.lambda = jd(v, key);
    else if (key == "iterations") c.iterations = jz(v, key);
    else if (key == "tv_alpha") c.tv_alpha = jd(v, key);
    else if (key == "tv_iterations") c.tv_iterations = jz(v, key);
    else if (key == "hamming") c.hamming = jb(v, key);
    else unknown_key("solve", key);
  }
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void apply_config_json(RunConfig& cfg, const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config: top level must be an object");
  for (const auto& [key, v] : doc.items()) {
    if (key == "seed") {
      std::uint64_t s = ju(v, key);
      cfg.phantom.seed = s;
      cfg.sim.seed = s;
      cfg.train.seed = s;
    } else if (key == "size") cfg.size = jz(v, key);
    else if (key == "views") cfg.views = jz(v, key);
    else if (key == "n_detector") cfg.n_detector = jz(v, key);
    else if (key == "d_source") cfg.d_source = jd(v, key);
    else if (key == "stage") cfg.stage = js(v, key);
    else if (key == "k") cfg.k = jz(v, key);
    else if (key == "ensemble_size") cfg.ensemble_size = jz(v, key);
    else if (key == "lambdas") {
      if (!v.is_array()) throw std::invalid_argument("config: lambdas must be an array");
      cfg.lambdas_init.clear();
      for (const auto& e : v) cfg.lambdas_init.push_back(jd(e, "lambdas[]"));
    } else if (key == "phantom") apply_phantom(cfg.phantom, v);
    else if (key == "sim") apply_sim(cfg.sim, v);
    else if (key == "calib") apply_calib(cfg.calib, v);
    else if (key == "net") apply_net(cfg.net, v);
    else if (key == "train") apply_train(cfg.train, v);
    else if (key == "solve") apply_solve(cfg.solve, v);
    else unknown_key("top level", key);
  }
}

std::string effective_config_json(const RunConfig& cfg, const std::string& command) {
  json doc;
  doc["command"] = command;
  doc["size"] = cfg.size;
  doc["views"] = cfg.views;
  doc["n_detector"] = cfg.n_detector;
  doc["d_source"] = cfg.d_source;
  doc["stage"] = cfg.stage;
  doc["k"] = cfg.k;
  doc["ensemble_size"] = cfg.ensemble_size;
  doc["lambdas"] = cfg.lambdas_init;

  json& ph = doc["phantom"];
  ph["att_adipose"] = cfg.phantom.att_adipose;
  ph["att_skin"] = cfg.phantom.att_skin;
  ph["att_fibro"] = cfg.phantom.att_fibro;
  ph["att_micro"] = cfg.phantom.att_micro;
  ph["blob_min"] = cfg.phantom.blob_min;
  ph["blob_max"] = cfg.phantom.blob_max;
  ph["micro_min"] = cfg.phantom.micro_min;
  ph["micro_max"] = cfg.phantom.micro_max;
  ph["sigma"] = cfg.phantom.sigma;
  ph["seed"] = cfg.phantom.seed;

  json& si = doc["sim"];
  si["count"] = cfg.sim.count;
  si["s_fwd"] = cfg.sim.s_fwd;
  si["step"] = cfg.sim.step;
  si["quadrature"] = quadrature_name(cfg.sim.quadrature);
  si["fine_step"] = cfg.sim.fine_step;
  si["noise_std"] = cfg.sim.noise_std;
  si["train_frac"] = cfg.sim.train_frac;
  si["val_frac"] = cfg.sim.val_frac;
  si["test_frac"] = cfg.sim.test_frac;
  si["write_fbp"] = cfg.sim.write_fbp;
  si["dtype"] = cfg.sim.dtype == Dtype::f64 ? "f64" : "f32";
  si["seed"] = cfg.sim.seed;

  json& ca = doc["calib"];
  ca["pairs"] = cfg.calib.pairs;
  ca["split"] = cfg.calib.split;
  ca["rounds"] = cfg.calib.schedule.rounds;
  ca["inner"] = cfg.calib.schedule.inner;
  ca["lr_s_fwd"] = cfg.calib.schedule.lr_s_fwd;
  ca["lr_d_source"] = cfg.calib.schedule.lr_d_source;
  ca["lr_angles"] = cfg.calib.schedule.lr_angles;
  ca["lr_decay"] = cfg.calib.schedule.lr_decay;
  ca["plateau_rel"] = cfg.calib.schedule.plateau_rel;
  ca["divergence_factor"] = cfg.calib.schedule.divergence_factor;
  ca["init_s_fwd"] = cfg.calib.init_s_fwd;
  ca["init_d_source"] = cfg.calib.init_d_source;
  ca["step"] = cfg.calib.step;
  ca["with_bias"] = cfg.calib.with_bias;

  json& ne = doc["net"];
  ne["scales"] = cfg.net.scales;
  ne["base_channels"] = cfg.net.base_channels;
  ne["c_mem"] = cfg.net.c_mem;
  ne["groups"] = cfg.net.groups;
  ne["residual"] = cfg.net.residual;

  json& tr = doc["train"];
  tr["epochs"] = cfg.train.epochs;
  tr["batch_size"] = cfg.train.batch_size;
  tr["lr"] = cfg.train.lr;
  tr["mu"] = cfg.train.mu;
  tr["restarts"] = cfg.train.restarts;
  tr["seed"] = cfg.train.seed;
  tr["weight_sharing"] = cfg.train.weight_sharing;
  tr["train_limit"] = cfg.train.train_limit;
  tr["val_limit"] = cfg.train.val_limit;
  tr["split_rotate"] = cfg.train.split_rotate;

  json& so = doc["solve"];
  so["method"] = cfg.solve.method;
  so["split"] = cfg.solve.split;
  so["limit"] = cfg.solve.limit;
  so["lambda"] = cfg.solve.lambda;
  so["iterations"] = cfg.solve.iterations;
  so["tv_alpha"] = cfg.solve.tv_alpha;
  so["tv_iterations"] = cfg.solve.tv_iterations;
  so["hamming"] = cfg.solve.hamming;

  return doc.dump(2) + "\n";
}

namespace {

void echo_effective_config(const RunConfig& cfg, const std::string& command) {
  fs::create_directories(cfg.out_dir);
  fs::path p = fs::path(cfg.out_dir) / "effective_config.json";
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << effective_config_json(cfg, command);
}

OperatorBundle make_bundle(const RunConfig& cfg, const DatasetManifest& m) {
  OperatorBundle b;
  if (!cfg.calibration_path.empty()) {
    b = OperatorBundle::from_calibration(load_calibration(cfg.calibration_path));
  } else if (m.sim) {
    b = OperatorBundle::from_truth(*m.sim);
  } else {
    throw std::invalid_argument(
        "no calibration file given and the manifest embeds no truth; pass --calibration");
  }
  b.hamming = cfg.solve.hamming;
  return b;
}

std::vector<const ManifestRecord*> pick_records(const DatasetManifest& m,
                                                const std::string& split, std::size_t limit) {
  std::vector<const ManifestRecord*> recs;
  if (split.empty()) {
    for (const auto& r : m.records) recs.push_back(&r);
  } else {
    recs = m.split_records(split);
  }
  if (recs.empty()) throw std::invalid_argument("no records in split \"" + split + "\"");
  if (limit != 0 && limit < recs.size()) recs.resize(limit);
  return recs;
}

void write_curve_csv(const fs::path& path, const TrainLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < log.train_loss.size(); ++e) {
    double val = (e + 1 < log.val_loss.size()) ? log.val_loss[e + 1]
                                               : std::numeric_limits<double>::quiet_NaN();
    f << (e + 1) << "," << fmt_g(log.train_loss[e]) << "," << fmt_g(val) << "\n";
  }
}

void write_train_summary(const fs::path& path, const TrainLog& log) {
  json doc;
  doc["best_epoch"] = log.best_epoch;
  doc["best_val"] = log.best_val;
  doc["initial_val"] = log.val_loss.empty() ? 0.0 : log.val_loss.front();
  doc["epochs_run"] = log.train_loss.size();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << doc.dump(2) << "\n";
}

void do_generate(const RunConfig& cfg) {
  PhantomConfig pc = cfg.phantom;
  pc.size = cfg.size;
  SimConfig sc = cfg.sim;
  sc.geometry.image = ImageGrid{cfg.size, cfg.size};
  sc.geometry.n_detector = cfg.n_detector;
  sc.geometry.s_detector = 1.0;
  sc.geometry.d_source =
      cfg.d_source > 0.0 ? cfg.d_source : 2.0 * static_cast<double>(cfg.size);
  sc.geometry.angles = uniform_angles(cfg.views);

  DatasetManifest m = simulate_dataset(pc, sc, cfg.out_dir);
  std::size_t ntr = m.split_records("train").size();
  std::size_t nva = m.split_records("val").size();
  std::size_t nte = m.split_records("test").size();
  std::printf("wrote %zu records (train/val/test = %zu/%zu/%zu) to %s\n", m.records.size(), ntr,
              nva, nte, cfg.out_dir.c_str());
}

void do_calibrate(const RunConfig& cfg) {
  DatasetManifest m = load_manifest(cfg.manifest_path);
  CalibrationResult r = calibrate(m, cfg.calib);
  save_calibration(r, fs::path(cfg.out_dir) / "calibration.json");

  std::size_t nel = r.params.n_angle() * r.params.n_detector;
  double resid_rmse = std::sqrt(r.fit.best_loss / static_cast<double>(nel));
  std::printf("rounds run: %zu\n", r.fit.rounds_run);
  std::printf("initial loss: %.6e\n", r.fit.initial_loss);
  std::printf("best loss: %.6e\n", r.fit.best_loss);
  std::printf("residual rmse: %.6e\n", resid_rmse);
  std::printf("s_fwd: %.10g\n", r.params.s_fwd);
  std::printf("d_source: %.10g\n", r.params.d_source);
  std::printf("s_fbp: %.10g\n", r.s_fbp);

  if (m.sim) {
    const SimTruth& t = *m.sim;
    if (t.geometry.d_source > 0.0) {
      double rel = std::abs(r.params.d_source - t.geometry.d_source) / t.geometry.d_source;
      std::printf("d_source error vs truth: %.6f%%\n", 100.0 * rel);
    }
    if (t.s_fwd > 0.0) {
      double rel = std::abs(r.params.s_fwd - t.s_fwd) / t.s_fwd;
      std::printf("s_fwd error vs truth: %.6f%%\n", 100.0 * rel);
    }
    if (t.geometry.angles.size() == r.params.angles.size()) {
      double worst = 0.0;
      for (std::size_t j = 0; j < r.params.angles.size(); ++j)
        worst = std::max(worst, std::abs(r.params.angles[j] - t.geometry.angles[j]));
      std::printf("max angle error vs truth: %.6e rad\n", worst);
    }
  }
}

void do_reconstruct(const RunConfig& cfg) {
  const std::string& method = cfg.solve.method;
  if (method != "fbp" && method != "landweber" && method != "tv" && method != "unrolled" &&
      method != "ensemble")
    throw std::invalid_argument("unknown method \"" + method +
                                "\"; valid methods: fbp, landweber, tv, unrolled, ensemble");

  DatasetManifest m = load_manifest(cfg.manifest_path);
  OperatorBundle ops = make_bundle(cfg, m);
  auto recs = pick_records(m, cfg.solve.split, cfg.solve.limit);

  std::vector<ItNet> nets;
  std::vector<UnrolledModel> models;
  if (method == "unrolled" || method == "ensemble") {
    if (cfg.model_paths.empty())
      throw std::invalid_argument("method " + method + " needs at least one --model checkpoint");
    if (method == "unrolled" && cfg.model_paths.size() != 1)
      throw std::invalid_argument("method unrolled takes exactly one --model checkpoint");
    for (const auto& p : cfg.model_paths) nets.push_back(load_itnet(p));
    for (const auto& n : nets) models.push_back(n.runtime());
  }

  fs::path recon_dir = fs::path(cfg.out_dir) / "recon";
  fs::create_directories(recon_dir);

  std::vector<EvalRow> rows;
  for (const ManifestRecord* rec : recs) {
    Tensor y = read_tensor(m.resolve(rec->sinogram));
    Tensor xr;
    if (method == "fbp") {
      xr = ops.apply_fbp(y);
    } else if (method == "landweber") {
      xr = landweber_fbp(y, cfg.solve.lambda, cfg.solve.iterations, ops);
    } else if (method == "tv") {
      xr = tv_reconstruct(y, cfg.solve.tv_alpha, cfg.solve.tv_iterations, ops).x;
    } else if (method == "unrolled") {
      xr = unrolled_reconstruct(y, models.front(), ops);
    } else {
      xr = ensemble_predict(models, y, ops);
    }
    write_tensor(recon_dir / (rec->id + ".ctt"), xr);
    write_png_gray(recon_dir / (rec->id + ".png"), xr, 0.0, 1.0);

    Tensor x = read_tensor(m.resolve(rec->phantom));
    rows.push_back(evaluate_pair(rec->id, x.to(Dtype::f64), xr.to(Dtype::f64)));
  }

  EvalReport report = aggregate_report(std::move(rows));
  write_report_csv(fs::path(cfg.out_dir) / "report.csv", report);
  write_report_json(fs::path(cfg.out_dir) / "report.json", report);
  std::printf("reconstructed %zu images with %s\n", recs.size(), method.c_str());
  std::printf("mean rmse: %.6e\n", report.mean_rmse);
  std::printf("median rmse: %.6e\n", report.median_rmse);
}

void do_train(const RunConfig& cfg) {
  const std::string& stage = cfg.stage;
  if (stage != "postproc" && stage != "unrolled" && stage != "extend")
    throw std::invalid_argument("unknown stage \"" + stage +
                                "\"; valid stages: postproc, unrolled, extend");

  DatasetManifest m = load_manifest(cfg.manifest_path);
  OperatorBundle ops = make_bundle(cfg, m);
  TrainConfig tc = cfg.train;

  Provenance prov;
  prov.stage = stage;
  prov.seed = tc.seed;
  prov.epochs = tc.epochs;
  prov.lr = tc.lr;
  prov.mu = tc.mu;
  prov.weight_sharing = tc.weight_sharing;

  if (stage == "postproc") {
    TrainLog log;
    NetParams np = train_postprocessing(m, cfg.net, tc, &ops, &log);
    save_net_params(np, fs::path(cfg.out_dir) / "postproc_net.json");
    write_curve_csv(fs::path(cfg.out_dir) / "curve.csv", log);
    write_train_summary(fs::path(cfg.out_dir) / "train_summary.json", log);
    std::printf("stage postproc done: best epoch %zu, best val %.6e\n", log.best_epoch,
                log.best_val);
    std::printf("checkpoint: %s\n", (fs::path(cfg.out_dir) / "postproc_net.json").c_str());
    return;
  }

  NetParams pre;
  const NetParams* pp = nullptr;
  if (stage == "unrolled" && !cfg.init_path.empty()) {
    pre = load_net_params(cfg.init_path);
    pp = &pre;
  }

  if (stage == "unrolled" && cfg.ensemble_size > 1) {
    std::vector<ItNet> members =
        train_ensemble(m, pp, cfg.k, tc, ops, cfg.ensemble_size);
    for (std::size_t i = 0; i < members.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "member_%02zu.json", i);
      Provenance mp = prov;
      mp.seed = Rng::mix(tc.seed, 0x656e73ULL + i);
      save_itnet(members[i], fs::path(cfg.out_dir) / name, mp);
    }
    std::printf("stage unrolled done: %zu ensemble members\n", members.size());
    return;
  }

  TrainLog log;
  ItNet net;
  fs::path ckpt;
  if (stage == "unrolled") {
    net = train_unrolled(m, pp, cfg.k, tc, ops, cfg.lambdas_init, &log, cfg.net);
    ckpt = fs::path(cfg.out_dir) / "itnet.json";
  } else {
    if (cfg.init_path.empty())
      throw std::invalid_argument("stage extend needs --init with a trained checkpoint");
    ItNet base = load_itnet(cfg.init_path);
    net = extend_and_finetune(base, m, tc, ops, false, &log);
    ckpt = fs::path(cfg.out_dir) / "itnet_extended.json";
  }
  prov.best_val = log.best_val;
  save_itnet(net, ckpt, prov);
  write_curve_csv(fs::path(cfg.out_dir) / "curve.csv", log);
  write_train_summary(fs::path(cfg.out_dir) / "train_summary.json", log);
  std::printf("stage %s done: best epoch %zu, best val %.6e\n", stage.c_str(), log.best_epoch,
              log.best_val);
  std::printf("checkpoint: %s\n", ckpt.c_str());
}

void do_evaluate(const RunConfig& cfg) {
  if (cfg.pred_dir.empty())
    throw std::invalid_argument("evaluate needs --pred with a directory of <id>.ctt files");
  DatasetManifest m = load_manifest(cfg.manifest_path);
  auto recs = pick_records(m, cfg.solve.split, cfg.solve.limit);

  std::vector<EvalRow> rows;
  for (const ManifestRecord* rec : recs) {
    Tensor x = read_tensor(m.resolve(rec->phantom));
    Tensor xhat = read_tensor(fs::path(cfg.pred_dir) / (rec->id + ".ctt"));
    rows.push_back(evaluate_pair(rec->id, x.to(Dtype::f64), xhat.to(Dtype::f64)));
  }

  EvalReport report = aggregate_report(std::move(rows));
  write_report_csv(fs::path(cfg.out_dir) / "report.csv", report);
  write_report_json(fs::path(cfg.out_dir) / "report.json", report);
  std::printf("evaluated %zu images\n", recs.size());
  std::printf("mean rmse: %.6e\n", report.mean_rmse);
  std::printf("median rmse: %.6e\n", report.median_rmse);
  std::printf("mean wcrmse: %.6e\n", report.mean_wcrmse);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  // The config file layers under the flags, so find it before the real parse.
  std::string config_path;
  for (int i = 1; i < argc; ++i) {
    std::string_view a = argv[i];
    if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0) config_path = std::string(a.substr(9));
  }

  RunConfig cfg;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) {
      std::fprintf(stderr, "error: cannot open config file %s\n", config_path.c_str());
      return 1;
    }
    std::stringstream ss;
    ss << f.rdbuf();
    try {
      apply_config_json(cfg, ss.str());
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
    }
  }

  CLI::App app{"fanbeam CT toolkit: simulate, calibrate, reconstruct, train, evaluate"};
  app.require_subcommand(1);

  std::string config_flag;
  std::uint64_t seed_flag = 0;
  std::vector<CLI::Option*> seed_opts;
  std::string quad_flag = quadrature_name(cfg.sim.quadrature);
  std::string dtype_flag = cfg.sim.dtype == Dtype::f64 ? "f64" : "f32";
  std::string ws_flag = cfg.train.weight_sharing ? "on" : "off";
  bool no_fbp = false, no_bias = false;

  auto add_common = [&](CLI::App* sub, bool need_manifest) {
    sub->add_option("--config", config_flag, "JSON config file layered under the flags");
    sub->add_option("--out", cfg.out_dir, "output directory")->required();
    if (need_manifest)
      sub->add_option("--manifest", cfg.manifest_path, "dataset manifest")->required();
    seed_opts.push_back(sub->add_option("--seed", seed_flag, "RNG seed"));
  };

  CLI::App* g = app.add_subcommand("generate", "simulate a phantom dataset");
  add_common(g, false);
  g->add_option("--size", cfg.size, "image side length");
  g->add_option("--views", cfg.views, "projection angles");
  g->add_option("--n-detector", cfg.n_detector, "detector elements");
  g->add_option("--count", cfg.sim.count, "number of records");
  g->add_option("--d-source", cfg.d_source, "source distance (0 = 2*size)");
  g->add_option("--s-fwd", cfg.sim.s_fwd, "hidden forward scale");
  g->add_option("--step", cfg.sim.step, "production quadrature step");
  g->add_option("--noise-std", cfg.sim.noise_std, "additive Gaussian noise std");
  g->add_option("--quadrature", quad_flag, "matched | fine_step | exact_siddon")
      ->check(CLI::IsMember({"matched", "fine_step", "exact_siddon"}));
  g->add_option("--dtype", dtype_flag, "stored dtype")->check(CLI::IsMember({"f32", "f64"}));
  g->add_option("--train-frac", cfg.sim.train_frac, "train split fraction");
  g->add_option("--val-frac", cfg.sim.val_frac, "val split fraction");
  g->add_option("--test-frac", cfg.sim.test_frac, "test split fraction");
  g->add_flag("--no-fbp", no_fbp, "skip stored FBP images");

  CLI::App* c = app.add_subcommand("calibrate", "fit geometry, FBP scale, and bias");
  add_common(c, true);
  c->add_option("--rounds", cfg.calib.schedule.rounds, "block-descent rounds");
  c->add_option("--inner", cfg.calib.schedule.inner, "Adam steps per block");
  c->add_option("--pairs", cfg.calib.pairs, "fit subset size (0 = all)");
  c->add_option("--split", cfg.calib.split, "record split to fit on");
  c->add_option("--step", cfg.calib.step, "projector quadrature step");
  c->add_option("--init-s-fwd", cfg.calib.init_s_fwd, "initial forward scale");
  c->add_option("--init-d-source", cfg.calib.init_d_source, "initial d_source (0 = heuristic)");
  c->add_flag("--no-bias", no_bias, "skip the bias estimate");

  CLI::App* r = app.add_subcommand("reconstruct", "invert sinograms and score against truth");
  add_common(r, true);
  r->add_option("--method", cfg.solve.method, "fbp | landweber | tv | unrolled | ensemble");
  r->add_option("--split", cfg.solve.split, "record split");
  r->add_option("--limit", cfg.solve.limit, "max records (0 = all)");
  r->add_option("--calibration", cfg.calibration_path, "calibration JSON (default: manifest truth)");
  r->add_option("--model", cfg.model_paths, "checkpoint(s) for unrolled/ensemble");
  r->add_option("--lambda", cfg.solve.lambda, "landweber relaxation");
  r->add_option("--iterations", cfg.solve.iterations, "landweber iterations");
  r->add_option("--tv-alpha", cfg.solve.tv_alpha, "TV weight");
  r->add_option("--tv-iterations", cfg.solve.tv_iterations, "primal-dual iterations");

  CLI::App* t = app.add_subcommand("train", "fit the enhancement networks");
  add_common(t, true);
  t->add_option("--stage", cfg.stage, "postproc | unrolled | extend");
  t->add_option("--k", cfg.k, "unrolled depth");
  t->add_option("--epochs", cfg.train.epochs, "training epochs");
  t->add_option("--batch-size", cfg.train.batch_size, "batch size");
  t->add_option("--lr", cfg.train.lr, "Adam learning rate");
  t->add_option("--mu", cfg.train.mu, "weight decay");
  t->add_option("--limit", cfg.train.train_limit, "train subset size (0 = all)");
  t->add_option("--val-limit", cfg.train.val_limit, "val subset size (0 = all)");
  t->add_option("--weight-sharing", ws_flag, "tie block parameters")
      ->check(CLI::IsMember({"on", "off"}));
  t->add_option("--ensemble-size", cfg.ensemble_size, "members for stage unrolled");
  t->add_option("--init", cfg.init_path, "pretrained net (unrolled) or checkpoint (extend)");
  t->add_option("--calibration", cfg.calibration_path, "calibration JSON (default: manifest truth)");
  t->add_option("--base-channels", cfg.net.base_channels, "UNet width");
  t->add_option("--scales", cfg.net.scales, "UNet depth");
  t->add_option("--c-mem", cfg.net.c_mem, "memory channels");
  t->add_option("--groups", cfg.net.groups, "group-norm groups");

  CLI::App* e = app.add_subcommand("evaluate", "score stored predictions against truth");
  add_common(e, true);
  e->add_option("--pred", cfg.pred_dir, "directory of <id>.ctt predictions")->required();
  e->add_option("--split", cfg.solve.split, "record split");
  e->add_option("--limit", cfg.solve.limit, "max records (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  for (CLI::Option* o : seed_opts)
    if (o->count() > 0) {
      cfg.phantom.seed = seed_flag;
      cfg.sim.seed = seed_flag;
      cfg.train.seed = seed_flag;
    }
  if (no_fbp) cfg.sim.write_fbp = false;
  if (no_bias) cfg.calib.with_bias = false;
  cfg.train.weight_sharing = ws_flag == "on";

  std::string command;
  try {
    cfg.sim.quadrature = parse_quadrature(quad_flag);
    cfg.sim.dtype = parse_dtype(dtype_flag);

    if (g->parsed()) command = "generate";
    else if (c->parsed()) command = "calibrate";
    else if (r->parsed()) command = "reconstruct";
    else if (t->parsed()) command = "train";
    else command = "evaluate";

    echo_effective_config(cfg, command);
    if (command == "generate") do_generate(cfg);
    else if (command == "calibrate") do_calibrate(cfg);
    else if (command == "reconstruct") do_reconstruct(cfg);
    else if (command == "train") do_train(cfg);
    else do_evaluate(cfg);
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  } catch (const std::domain_error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("fanct");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fanct
