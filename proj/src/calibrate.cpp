#include "fanct/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "fanct/adam.hpp"
#include "fanct/fbp.hpp"
#include "fanct/tensor_io.hpp"
#include "fanct/tensor_ops.hpp"

namespace fanct {

void CalibSchedule::validate() const {
  if (inner == 0) throw std::invalid_argument("calibrate: inner must be >= 1");
  for (double lr : {lr_s_fwd, lr_d_source, lr_angles})
    if (!(lr > 0.0)) throw std::invalid_argument("calibrate: learning rates must be positive");
  if (!(lr_decay > 0.0) || lr_decay > 1.0)
    throw std::invalid_argument("calibrate: lr_decay must lie in (0, 1]");
  if (!(plateau_rel >= 0.0)) throw std::invalid_argument("calibrate: plateau_rel must be >= 0");
  if (!(divergence_factor > 1.0))
    throw std::invalid_argument("calibrate: divergence_factor must exceed 1");
}

void CalibConfig::validate() const {
  schedule.validate();
  if (!(init_s_fwd > 0.0)) throw std::invalid_argument("calibrate: init_s_fwd must be positive");
  if (init_d_source < 0.0)
    throw std::invalid_argument("calibrate: init_d_source must be >= 0 (0 = heuristic)");
  if (!(step > 0.0)) throw std::invalid_argument("calibrate: step must be positive");
}

namespace {

CalibPairs to_f64_pairs(const CalibPairs& data, const OperatorParams& p) {
  CalibPairs work;
  work.reserve(data.size());
  for (const auto& [x, y] : data) {
    if (x.ndim() != 2 || x.dim(0) != p.image.ny || x.dim(1) != p.image.nx)
      throw std::invalid_argument("calibrate: image shape does not match the parameters");
    if (y.ndim() != 2 || y.dim(0) != p.n_angle() || y.dim(1) != p.n_detector)
      throw std::invalid_argument("calibrate: sinogram shape does not match the parameters");
    work.emplace_back(x.to(Dtype::f64), y.to(Dtype::f64));
  }
  return work;
}

}  // namespace

OperatorParams fit_geometry(const CalibPairs& data, const OperatorParams& init,
                            const CalibSchedule& schedule, FitReport* report) {
  schedule.validate();
  init.validate();
  if (data.empty()) throw std::invalid_argument("calibrate: empty fit data");
  CalibPairs work = to_f64_pairs(data, init);

  const GradMask kNone{false, false, false};
  const GradMask kS{true, false, false};
  const GradMask kD{false, true, false};
  const GradMask kPhi{false, false, true};

  OperatorParams p = init;
  const std::size_t nang = p.n_angle();

  double data_sq = 0.0;
  for (const auto& [x, y] : work) data_sq += norm2_sq(y);
  data_sq /= static_cast<double>(work.size());

  double initial = loss_param_gradient(work, p, kNone).loss;
  double best_loss = initial;
  OperatorParams best = p;
  std::vector<double> hist;

  auto fill_report = [&](std::size_t rounds_run) {
    if (!report) return;
    report->initial_loss = initial;
    report->best_loss = best_loss;
    report->round_losses = hist;
    report->rounds_run = rounds_run;
  };

  // Already at the floating-point floor relative to the data energy: there is
  // nothing left to fit, and Adam's lr-sized exploration steps would only
  // wander away from it.
  if (initial <= 1e-12 * data_sq) {
    fill_report(0);
    return best;
  }

  // The divergence reference is floored at a percent-scale of the data energy
  // so that exploration wobble around a nearly-converged init (tiny initial
  // loss) is not mistaken for a blow-up.
  const double guard_ref = std::max(initial, 1e-2 * data_sq);

  auto observe = [&](double loss, const OperatorParams& q) {
    if (!std::isfinite(loss))
      throw CalibrationError("calibrate: non-finite loss", hist);
    if (loss < best_loss) {
      best_loss = loss;
      best = q;
    }
    if (guard_ref > 0.0 && loss > schedule.divergence_factor * guard_ref)
      throw CalibrationError("calibrate: loss exceeded the divergence guard", hist);
  };

  Adam adam_u(schedule.lr_s_fwd, 1);
  Adam adam_d(schedule.lr_d_source, 1);
  Adam adam_phi(schedule.lr_angles, nang);

  std::size_t rounds_run = 0;
  for (std::size_t round = 0; round < schedule.rounds; ++round) {
    ++rounds_run;

    // s_fwd block, log-parametrized as a multiplicative offset so that a zero
    // gradient leaves the value bitwise unchanged
    double s_base = p.s_fwd;
    double u = 0.0;
    for (std::size_t it = 0; it < schedule.inner; ++it) {
      p.s_fwd = s_base * std::exp(u);
      ThetaGradient g = loss_param_gradient(work, p, kS);
      observe(g.loss, p);
      adam_u.step_scalar(u, g.g_s_fwd * p.s_fwd);
    }
    p.s_fwd = s_base * std::exp(u);

    for (std::size_t it = 0; it < schedule.inner; ++it) {
      ThetaGradient g = loss_param_gradient(work, p, kD);
      observe(g.loss, p);
      adam_d.step_scalar(p.d_source, g.g_d_source);
    }

    for (std::size_t it = 0; it < schedule.inner; ++it) {
      ThetaGradient g = loss_param_gradient(work, p, kPhi);
      observe(g.loss, p);
      adam_phi.step(p.angles.data(), g.g_angles.data(), nang);
    }

    double round_loss = loss_param_gradient(work, p, kNone).loss;
    observe(round_loss, p);
    double prev = hist.empty() ? initial : hist.back();
    hist.push_back(round_loss);

    adam_u.lr *= schedule.lr_decay;
    adam_d.lr *= schedule.lr_decay;
    adam_phi.lr *= schedule.lr_decay;

    double impr = (prev - round_loss) / std::max(prev, std::numeric_limits<double>::min());
    if (impr >= 0.0 && impr < schedule.plateau_rel) break;
  }

  fill_report(rounds_run);
  return best;
}

double fit_fbp_scale(const CalibPairs& data, const OperatorParams& p) {
  if (data.empty()) throw std::invalid_argument("calibrate: empty fit data");
  CalibPairs work = to_f64_pairs(data, p);
  FbpParams unscaled;
  unscaled.s_fbp = 1.0;
  double num = 0.0, den = 0.0;
  for (const auto& [x, y] : work) {
    Tensor f = fbp(y, p, unscaled);
    num += dot(x, f);
    den += norm2_sq(f);
  }
  if (den == 0.0) throw std::invalid_argument("calibrate: all FBP images are zero");
  return num / den;
}

Tensor estimate_bias(const CalibPairs& data, const OperatorParams& p, double /*s_fbp*/) {
  if (data.empty()) throw std::invalid_argument("calibrate: empty fit data");
  CalibPairs work = to_f64_pairs(data, p);
  std::vector<double> acc(p.n_angle() * p.n_detector, 0.0);
  for (const auto& [x, y] : work) {
    Tensor ax = forward_project(x, p);
    auto a = ax.as<double>();
    auto m = y.as<double>();
    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += a[q] - m[q];
  }
  double inv = 1.0 / static_cast<double>(work.size());
  for (double& v : acc) v *= inv;
  return Tensor::from_f64({p.n_angle(), p.n_detector}, std::move(acc));
}

CalibrationResult calibrate(const DatasetManifest& manifest, const CalibConfig& cfg) {
  cfg.validate();
  std::vector<const ManifestRecord*> recs;
  if (cfg.split.empty()) {
    for (const auto& r : manifest.records) recs.push_back(&r);
  } else {
    recs = manifest.split_records(cfg.split);
  }
  if (recs.empty()) throw std::invalid_argument("calibrate: no records to fit on");
  std::size_t take = cfg.pairs == 0 ? recs.size() : std::min(cfg.pairs, recs.size());

  CalibPairs pairs;
  pairs.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    pairs.emplace_back(read_tensor(manifest.resolve(recs[i]->phantom)),
                       read_tensor(manifest.resolve(recs[i]->sinogram)));
  }

  const Tensor& x0 = pairs.front().first;
  const Tensor& y0 = pairs.front().second;
  if (x0.ndim() != 2 || y0.ndim() != 2)
    throw std::invalid_argument("calibrate: records must hold 2-d tensors");

  OperatorParams init;
  init.image = ImageGrid{x0.dim(1), x0.dim(0)};
  init.n_detector = y0.dim(1);
  init.s_detector = 1.0;
  init.step = cfg.step;
  init.s_fwd = cfg.init_s_fwd;
  init.d_source = cfg.init_d_source > 0.0 ? cfg.init_d_source : 4.0 * init.r_image();
  init.angles = cfg.init_angles.empty() ? uniform_angles(y0.dim(0)) : cfg.init_angles;
  if (init.angles.size() != y0.dim(0))
    throw std::invalid_argument("calibrate: init_angles size does not match the sinogram");

  CalibrationResult r;
  r.params = fit_geometry(pairs, init, cfg.schedule, &r.fit);
  r.s_fbp = fit_fbp_scale(pairs, r.params);
  if (cfg.with_bias) r.bias = estimate_bias(pairs, r.params, r.s_fbp);
  return r;
}

void save_calibration(const CalibrationResult& r, const std::filesystem::path& path) {
  r.params.validate();
  nlohmann::json j;
  j["version"] = 1;
  j["params"] = {
      {"s_fwd", r.params.s_fwd},
      {"d_source", r.params.d_source},
      {"angles", r.params.angles},
      {"n_detector", r.params.n_detector},
      {"s_detector", r.params.s_detector},
      {"image", {{"nx", r.params.image.nx}, {"ny", r.params.image.ny}}},
      {"step", r.params.step},
  };
  j["s_fbp"] = r.s_fbp;
  j["fit"] = {
      {"initial_loss", r.fit.initial_loss},
      {"best_loss", r.fit.best_loss},
      {"round_losses", r.fit.round_losses},
      {"rounds_run", r.fit.rounds_run},
  };
  if (!r.bias.empty()) {
    std::filesystem::path bias_rel = path.stem().string() + "_bias.ctt";
    write_tensor(path.parent_path() / bias_rel, r.bias);
    j["bias"] = bias_rel.string();
  } else {
    j["bias"] = nullptr;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("calibrate: cannot open " + path.string());
  out << j.dump(2) << '\n';
  if (!out.good()) throw std::runtime_error("calibrate: short write to " + path.string());
}

CalibrationResult load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("calibrate: cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.at("version").get<int>() != 1)
    throw std::runtime_error("calibrate: unsupported calibration version");

  CalibrationResult r;
  const auto& jp = j.at("params");
  r.params.s_fwd = jp.at("s_fwd").get<double>();
  r.params.d_source = jp.at("d_source").get<double>();
  r.params.angles = jp.at("angles").get<std::vector<double>>();
  r.params.n_detector = jp.at("n_detector").get<std::size_t>();
  r.params.s_detector = jp.at("s_detector").get<double>();
  r.params.image = ImageGrid{jp.at("image").at("nx").get<std::size_t>(),
                             jp.at("image").at("ny").get<std::size_t>()};
  r.params.step = jp.at("step").get<double>();
  r.params.validate();
  r.s_fbp = j.at("s_fbp").get<double>();
  const auto& jf = j.at("fit");
  r.fit.initial_loss = jf.at("initial_loss").get<double>();
  r.fit.best_loss = jf.at("best_loss").get<double>();
  r.fit.round_losses = jf.at("round_losses").get<std::vector<double>>();
  r.fit.rounds_run = jf.at("rounds_run").get<std::size_t>();
  if (!j.at("bias").is_null()) {
    Tensor b = read_tensor(path.parent_path() / j.at("bias").get<std::string>());
    if (b.ndim() != 2 || b.dim(0) != r.params.n_angle() || b.dim(1) != r.params.n_detector)
      throw std::runtime_error("calibrate: bias map shape mismatch");
    r.bias = std::move(b);
  }
  return r;
}

}  // namespace fanct
