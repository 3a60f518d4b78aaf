#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "fanct/calibrate.hpp"
#include "fanct/fbp.hpp"
#include "fanct/manifest.hpp"
#include "fanct/projector.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

/// The fitted measurement model plus its approximate inversion, bundled so
/// solvers never touch raw parameters. forward() applies the bias-corrected
/// operator when a bias map is present; forward_linear()/adjoint() are the
/// exact transpose pair of the linear part.
struct OperatorBundle {
  OperatorParams params;
  double s_fbp = 1.0;
  Tensor bias;  // sinogram-domain; empty = no correction
  bool hamming = true;

  static OperatorBundle from_calibration(const CalibrationResult& r);
  static OperatorBundle from_truth(const SimTruth& t);

  FbpParams fbp_params() const;

  Tensor forward(const Tensor& x) const;         // Abar(x) = A x - bias
  Tensor forward_linear(const Tensor& x) const;  // A x
  Tensor adjoint(const Tensor& y) const;         // A^T y
  Tensor apply_fbp(const Tensor& y) const;
  Tensor apply_fbp_transpose(const Tensor& x) const;

  /// Cached spectral-norm estimates (power iteration, deterministic seed).
  double norm_forward(std::size_t iters = 64) const;
  double norm_fbp_forward(std::size_t iters = 64) const;

private:
  mutable std::optional<double> norm_a_;
  mutable std::optional<double> norm_fbpa_;
};

/// Enhancement block: (image, memory) -> (image, memory).
using EnhanceFn = std::function<std::pair<Tensor, Tensor>(const Tensor&, const Tensor&)>;

/// Unrolled composition skeleton: K enhancement blocks interleaved with
/// data-consistency steps. Blocks may alias one shared parameter set.
struct UnrolledModel {
  std::vector<EnhanceFn> blocks;
  std::vector<double> lambdas;
  std::size_t c_mem = 0;

  std::size_t k() const { return blocks.size(); }
  void validate() const;
};

/// x - lambda * FBP(Abar(x) - y).
Tensor dc_step(const Tensor& x, const Tensor& y, double lambda, const OperatorBundle& ops);

/// x_0 = FBP(y); x_k = dc_step(block_k(x_{k-1}), y, lambda_k). Memory channels
/// start at zero and are threaded through the blocks.
Tensor unrolled_reconstruct(const Tensor& y, const UnrolledModel& model,
                            const OperatorBundle& ops);

/// Enhancement-free limit of the unrolled scheme, used as a baseline.
Tensor landweber_fbp(const Tensor& y, double lambda, std::size_t iters,
                     const OperatorBundle& ops);

struct TvOptions {
  std::size_t record_residual_every = 1;   // 0 = off
  std::size_t record_objective_every = 0;  // 0 = off (costs one extra forward)
  double step_ratio = 0.0;                 // tau/sigma; 0 = auto (||A||)
};

struct TvResult {
  Tensor x;
  std::vector<double> residual_history;   // ||Abar(xbar) - y|| per recorded iter
  std::vector<double> objective_history;  // 0.5||Abar(x)-y||^2 + alpha*TV(x)
};

/// Chambolle-Pock for min_x 0.5 ||Abar(x) - y||^2 + alpha * TV(x), anisotropic
/// TV with forward differences and Neumann boundary; step sizes certified by
/// operator_norm_estimate: tau * sigma * (||A||^2 + 8) = 1 with the split
/// tau/sigma = step_ratio (pixel-scale primal steps by default).
TvResult tv_reconstruct(const Tensor& y, double alpha, std::size_t iters,
                        const OperatorBundle& ops, const TvOptions& opt = {});

double tv_value(const Tensor& x);  // anisotropic TV, forward diff, Neumann

enum class NormWhich { forward, fbp_forward };

/// Power iteration on the normal operator; returns the largest-singular-value
/// estimate. Deterministic start vector.
double operator_norm_estimate(const std::function<Tensor(const Tensor&)>& op,
                              const std::function<Tensor(const Tensor&)>& op_adjoint,
                              const std::vector<std::size_t>& input_dims, std::size_t iters,
                              std::uint64_t seed = 0x6e6f726dULL);
double operator_norm_estimate(const OperatorBundle& ops, NormWhich which,
                              std::size_t iters = 64);

}  // namespace fanct
