#include "fanct/calibrate.hpp"

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "fanct/fbp.hpp"
#include "fanct/phantom.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor_ops.hpp"
#include "oracles.hpp"

using namespace fanct;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / "fanct_calibrate_test" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

CalibPairs make_pairs(const OperatorParams& truth, std::size_t count, std::uint64_t seed) {
  CalibPairs pairs;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor x = oracle::smooth_random_image(truth.image.ny, seed + i);
    Tensor y = forward_project(x, truth);
    pairs.emplace_back(std::move(x), std::move(y));
  }
  return pairs;
}

}  // namespace

TEST_CASE("a fit started at the truth does not move") {
  OperatorParams truth = oracle::desk_params(32, 6, 64);
  CalibPairs pairs = make_pairs(truth, 2, 100);

  CalibSchedule sched;
  sched.rounds = 3;
  sched.inner = 5;
  FitReport rep;
  OperatorParams fit = fit_geometry(pairs, truth, sched, &rep);

  CHECK(rep.initial_loss == 0.0);
  CHECK(rep.best_loss == 0.0);
  CHECK(fit.s_fwd == truth.s_fwd);
  CHECK(fit.d_source == truth.d_source);
  REQUIRE(fit.angles.size() == truth.angles.size());
  for (std::size_t j = 0; j < truth.angles.size(); ++j)
    CHECK(fit.angles[j] == truth.angles[j]);
  CHECK(rep.rounds_run == 0);  // floor exit: nothing to fit at zero loss
}

TEST_CASE("a d_source offset is pulled back to the truth") {
  OperatorParams truth = oracle::desk_params(32, 6, 64);
  CalibPairs pairs = make_pairs(truth, 2, 200);

  OperatorParams init = truth;
  init.d_source *= 1.05;

  CalibSchedule sched;
  sched.rounds = 30;
  sched.inner = 10;
  sched.lr_d_source = 0.1;
  FitReport rep;
  OperatorParams fit = fit_geometry(pairs, init, sched, &rep);

  CHECK(rep.initial_loss > 0.0);
  CHECK(rep.best_loss < 1e-4 * rep.initial_loss);
  CHECK(std::abs(fit.d_source - truth.d_source) < 0.2);
}

TEST_CASE("angle jitter is pulled back to the truth") {
  OperatorParams truth = oracle::desk_params(32, 6, 64);
  CalibPairs pairs = make_pairs(truth, 2, 300);

  Rng rng(7);
  OperatorParams init = truth;
  for (double& a : init.angles) a += rng.uniform(-0.01, 0.01);

  CalibSchedule sched;
  sched.rounds = 30;
  sched.inner = 10;
  FitReport rep;
  OperatorParams fit = fit_geometry(pairs, init, sched, &rep);

  CHECK(rep.best_loss < 1e-3 * rep.initial_loss);
  double worst = 0.0;
  for (std::size_t j = 0; j < truth.angles.size(); ++j)
    worst = std::max(worst, std::abs(fit.angles[j] - truth.angles[j]));
  CHECK(worst < 2e-3);
}

TEST_CASE("a scale mismatch is recovered through the log parametrization") {
  OperatorParams truth = oracle::desk_params(32, 6, 64);
  truth.s_fwd = 1.3;
  CalibPairs pairs = make_pairs(truth, 2, 400);

  OperatorParams init = truth;
  init.s_fwd = 1.0;

  CalibSchedule sched;
  sched.rounds = 20;
  sched.inner = 10;
  sched.lr_s_fwd = 0.02;
  FitReport rep;
  OperatorParams fit = fit_geometry(pairs, init, sched, &rep);

  CHECK(rep.best_loss < 1e-4 * rep.initial_loss);
  CHECK(std::abs(fit.s_fwd - 1.3) < 0.01);

  // cross-check against the conditional closed form at the fitted geometry
  OperatorParams unit = fit;
  unit.s_fwd = 1.0;
  double num = 0.0, den = 0.0;
  for (const auto& [x, y] : pairs) {
    Tensor ax = forward_project(x, unit);
    num += dot(ax, y);
    den += norm2_sq(ax);
  }
  CHECK(std::abs(fit.s_fwd - num / den) < 0.01);
}

TEST_CASE("fitted reconstruction scale matches a golden-section search") {
  OperatorParams p = oracle::desk_params(32, 8, 96);
  PhantomConfig pc;
  pc.size = 32;
  pc.seed = 11;
  CalibPairs pairs;
  for (std::uint64_t i = 0; i < 2; ++i) {
    Tensor x = generate_phantom(pc, i).to(Dtype::f64);
    Tensor y = forward_project(x, p);
    pairs.emplace_back(std::move(x), std::move(y));
  }
  double s_hat = fit_fbp_scale(pairs, p);

  FbpParams unscaled;
  std::vector<std::pair<Tensor, Tensor>> recon;  // (x, unscaled FBP)
  for (const auto& [x, y] : pairs) recon.emplace_back(x, fbp(y, p, unscaled));
  auto objective = [&](double s) {
    double acc = 0.0;
    for (const auto& [x, f] : recon) acc += norm2_sq(sub(x, scaled(f, s)));
    return acc;
  };
  double s_gold = oracle::golden_section(objective, -1.0, 5.0);
  CHECK(std::abs(s_hat - s_gold) < 1e-6 * std::max(1.0, std::abs(s_hat)));
}

TEST_CASE("all-zero sinograms cannot be scaled") {
  OperatorParams p = oracle::desk_params(16, 4, 48);
  CalibPairs pairs;
  pairs.emplace_back(oracle::smooth_random_image(16, 1),
                     Tensor::zeros({4, 48}, Dtype::f64));
  CHECK_THROWS_AS(fit_fbp_scale(pairs, p), std::invalid_argument);

  Tensor b = estimate_bias(pairs, p, 1.0);
  Tensor want = forward_project(pairs.front().first.to(Dtype::f64), p);
  CHECK(b.same_bits(want));
}

TEST_CASE("constant detector offsets show up in the bias map") {
  OperatorParams p = oracle::desk_params(32, 5, 64);
  CalibPairs pairs;
  double offsets[2] = {0.3, 0.7};
  for (int i = 0; i < 2; ++i) {
    Tensor x = oracle::smooth_random_image(32, 50 + i);
    Tensor y = forward_project(x, p);
    auto v = y.as<double>();
    for (std::size_t q = 0; q < y.size(); ++q) v[q] += offsets[i];
    pairs.emplace_back(std::move(x), std::move(y));
  }
  Tensor b = estimate_bias(pairs, p, 1.0);
  REQUIRE(b.dim(0) == 5);
  REQUIRE(b.dim(1) == 64);
  double worst = 0.0;
  for (std::size_t q = 0; q < b.size(); ++q)
    worst = std::max(worst, std::abs(b.at(q) + 0.5));
  CHECK(worst < 1e-9);
}

TEST_CASE("the divergence guard throws with the loss history attached") {
  OperatorParams truth = oracle::desk_params(32, 4, 48);
  truth.s_fwd = 1.3;
  CalibPairs pairs = make_pairs(truth, 1, 600);

  OperatorParams init = truth;
  init.s_fwd = 1.0;

  CalibSchedule sched;
  sched.rounds = 5;
  sched.inner = 5;
  sched.lr_s_fwd = 5.0;  // one Adam step explodes the scale by ~e^5
  CHECK_THROWS_AS(fit_geometry(pairs, init, sched), CalibrationError);
}

TEST_CASE("schedules and configs reject bad settings") {
  CalibSchedule s;
  s.inner = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = CalibSchedule{};
  s.lr_angles = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = CalibSchedule{};
  s.lr_decay = 0.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = CalibSchedule{};
  s.lr_decay = 1.5;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = CalibSchedule{};
  s.plateau_rel = -1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  s = CalibSchedule{};
  s.divergence_factor = 1.0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);

  CalibConfig c;
  c.init_s_fwd = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = CalibConfig{};
  c.init_d_source = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = CalibConfig{};
  c.step = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  OperatorParams p = oracle::desk_params(16, 4, 48);
  CHECK_THROWS_AS(fit_geometry({}, p, CalibSchedule{}), std::invalid_argument);
  CHECK_THROWS_AS(fit_fbp_scale({}, p), std::invalid_argument);
  CHECK_THROWS_AS(estimate_bias({}, p, 1.0), std::invalid_argument);

  CalibPairs bad;
  bad.emplace_back(oracle::smooth_random_image(16, 1), Tensor::zeros({4, 32}, Dtype::f64));
  CHECK_THROWS_AS(fit_fbp_scale(bad, p), std::invalid_argument);
}

TEST_CASE("zero rounds return the initialization untouched") {
  OperatorParams truth = oracle::desk_params(32, 4, 48);
  CalibPairs pairs = make_pairs(truth, 1, 700);

  OperatorParams init = truth;
  init.d_source *= 1.1;

  CalibSchedule sched;
  sched.rounds = 0;
  FitReport rep;
  OperatorParams fit = fit_geometry(pairs, init, sched, &rep);
  CHECK(rep.rounds_run == 0);
  CHECK(rep.round_losses.empty());
  CHECK(rep.best_loss == rep.initial_loss);
  CHECK(fit.d_source == init.d_source);
  CHECK(fit.s_fwd == init.s_fwd);
}

TEST_CASE("calibrate() runs off a manifest and round-trips through disk") {
  auto dir = fresh_dir("pipeline");
  PhantomConfig pc;
  pc.size = 32;
  pc.seed = 7;
  SimConfig sc;
  sc.geometry.d_source = 64.0;  // equals the 4 * r_image init heuristic
  sc.geometry.n_detector = 96;
  sc.geometry.angles = uniform_angles(8);
  sc.geometry.image = {32, 32};
  sc.count = 5;
  DatasetManifest m = simulate_dataset(pc, sc, dir);

  CalibConfig cfg;
  cfg.pairs = 2;
  cfg.split = "";
  cfg.schedule.rounds = 2;
  cfg.schedule.inner = 3;
  CalibrationResult r = calibrate(m, cfg);

  // the init heuristic lands on the simulation truth, so the fit stays put
  CHECK(std::abs(r.params.d_source - 64.0) < 1e-3);
  CHECK(std::abs(r.params.s_fwd - 1.0) < 1e-3);
  for (std::size_t j = 0; j < 8; ++j)
    CHECK(std::abs(r.params.angles[j] - uniform_angles(8)[j]) < 1e-5);
  CHECK(r.s_fbp > 0.0);
  REQUIRE(!r.bias.empty());
  REQUIRE(r.bias.dim(0) == 8);
  REQUIRE(r.bias.dim(1) == 96);
  CHECK(oracle::max_abs(r.bias) < 1e-4);  // clean data: only f32 storage error

  auto path = dir / "calib.json";
  save_calibration(r, path);
  CHECK(std::filesystem::exists(dir / "calib_bias.ctt"));
  CalibrationResult back = load_calibration(path);
  CHECK(back.params.s_fwd == r.params.s_fwd);
  CHECK(back.params.d_source == r.params.d_source);
  CHECK(back.params.angles == r.params.angles);
  CHECK(back.params.n_detector == r.params.n_detector);
  CHECK(back.params.step == r.params.step);
  CHECK(back.s_fbp == r.s_fbp);
  CHECK(back.bias.same_bits(r.bias));
  CHECK(back.fit.round_losses == r.fit.round_losses);

  // a fit drawn from the train split only
  CalibConfig cfg_train = cfg;
  cfg_train.split = "train";
  cfg_train.with_bias = false;
  cfg_train.schedule.rounds = 0;
  CalibrationResult rt = calibrate(m, cfg_train);
  CHECK(rt.bias.empty());
  auto path2 = dir / "calib2.json";
  save_calibration(rt, path2);
  CHECK(load_calibration(path2).bias.empty());

  // init_angles must match the sinogram height
  CalibConfig bad = cfg;
  bad.init_angles = {0.0, 0.1};
  CHECK_THROWS_AS(calibrate(m, bad), std::invalid_argument);
}
