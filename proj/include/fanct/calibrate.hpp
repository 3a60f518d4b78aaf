#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fanct/manifest.hpp"
#include "fanct/projector.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

/// Block learning rates and iteration counts for the geometry fit.
struct CalibSchedule {
  std::size_t rounds = 50;
  std::size_t inner = 20;
  double lr_s_fwd = 1e-3;    // relative, via log-parametrization
  double lr_d_source = 1e-1;
  double lr_angles = 1e-4;
  double lr_decay = 1.0;     // per-round multiplier on every block rate
  double plateau_rel = 1e-10;
  // Throw when the loss passes this multiple of max(initial loss, 1% of the
  // mean data energy); the floor keeps a nearly-converged init from tripping
  // the guard on lr-sized exploration steps.
  double divergence_factor = 10.0;

  void validate() const;
};

/// Thrown when the fit loss blows past the divergence guard. Carries the
/// per-round loss history for diagnostics.
class CalibrationError : public std::runtime_error {
public:
  CalibrationError(const std::string& msg, std::vector<double> history)
      : std::runtime_error(msg), history_(std::move(history)) {}
  const std::vector<double>& history() const { return history_; }

private:
  std::vector<double> history_;
};

/// Extra outputs of fit_geometry for callers that want them.
struct FitReport {
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::vector<double> round_losses;
  std::size_t rounds_run = 0;
};

using CalibPairs = std::vector<std::pair<Tensor, Tensor>>;  // (image, sinogram)

/// Block coordinate descent over (s_fwd | d_source | angles), each block ran
/// with its own Adam optimizer. Returns the parameters with the lowest
/// observed full-data loss.
OperatorParams fit_geometry(const CalibPairs& data, const OperatorParams& init,
                            const CalibSchedule& schedule, FitReport* report = nullptr);

/// Closed-form least squares s_fbp = sum_i <x_i, F_i> / sum_i ||F_i||^2 with
/// F_i the unscaled FBP of y_i.
double fit_fbp_scale(const CalibPairs& data, const OperatorParams& p);

/// Sinogram-domain model bias b = (1/M) sum_i (A_Theta x_i - y_i); downstream
/// the corrected operator is Abar(x) = A_Theta(x) - b.
Tensor estimate_bias(const CalibPairs& data, const OperatorParams& p, double s_fbp);

struct CalibrationResult {
  OperatorParams params;
  double s_fbp = 1.0;
  Tensor bias;  // empty tensor -> no correction
  FitReport fit;
};

struct CalibConfig {
  CalibSchedule schedule;
  std::size_t pairs = 4;          // fit subset size taken from the front (0 = all)
  std::string split = "train";    // record split to draw pairs from ("" = all)
  double init_s_fwd = 1.0;
  double init_d_source = 0.0;     // 0 = heuristic (4 * r_image)
  std::vector<double> init_angles;  // empty = uniform [0, 2pi)
  double step = 0.5;
  bool with_bias = true;

  void validate() const;
};

/// Orchestrates the three fits in order on pairs drawn from the manifest.
CalibrationResult calibrate(const DatasetManifest& manifest, const CalibConfig& cfg);

/// JSON descriptor next to a CTT1 bias map ("<stem>_bias.ctt").
void save_calibration(const CalibrationResult& r, const std::filesystem::path& path);
CalibrationResult load_calibration(const std::filesystem::path& path);

}  // namespace fanct
