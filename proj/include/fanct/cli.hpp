#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fanct/calibrate.hpp"
#include "fanct/neural.hpp"
#include "fanct/phantom.hpp"
#include "fanct/training.hpp"

namespace fanct {

/// Reconstruction-command knobs. Solver modules keep their own defaults; these
/// mirror them so the config file can override every numeric.
struct SolveConfig {
  std::string method = "fbp";
  std::string split = "test";
  std::size_t limit = 0;  // 0 = whole split
  double lambda = 1.0;    // landweber relaxation
  std::size_t iterations = 50;
  double tv_alpha = 1e-4;
  std::size_t tv_iterations = 500;
  bool hamming = true;
};

/// Everything a command can consume, layered defaults < config file < flags.
struct RunConfig {
  // generate: scanner laid out from these, s_detector pinned to 1
  std::size_t size = 256;
  std::size_t views = 64;
  std::size_t n_detector = 512;
  double d_source = 0.0;  // 0 = 2 * size

  PhantomConfig phantom;
  SimConfig sim;  // geometry/count filled from the fields above when unset
  CalibConfig calib;
  NetConfig net;
  TrainConfig train;
  SolveConfig solve;

  // train-command shape
  std::string stage = "postproc";  // postproc | unrolled | extend
  std::size_t k = 4;
  std::size_t ensemble_size = 1;
  std::vector<double> lambdas_init;  // empty = stage defaults

  // paths (flags only)
  std::string manifest_path;
  std::string out_dir;
  std::string calibration_path;
  std::vector<std::string> model_paths;
  std::string init_path;
  std::string pred_dir;

  RunConfig();
};

/// Applies a JSON config document onto cfg. Unknown keys anywhere are
/// rejected with std::invalid_argument.
void apply_config_json(RunConfig& cfg, const std::string& text);

/// Full provenance dump of the layered configuration (sorted keys).
std::string effective_config_json(const RunConfig& cfg, const std::string& command);

/// Dispatches one command; returns the process exit code
/// (0 = success, 1 = usage/validation error, 2 = runtime error).
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace fanct
