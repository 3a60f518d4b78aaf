#pragma once

#include <cstddef>
#include <vector>

#include "fanct/geometry.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

/// Learnable operator parameters Theta = (s_fwd, d_source, angles) plus the
/// frozen geometry context. The parameter vector dimension is 2 + n_angle.
struct OperatorParams {
  double s_fwd = 1.0;
  double d_source = 0.0;
  std::vector<double> angles;
  std::size_t n_detector = 0;
  double s_detector = 1.0;
  ImageGrid image;
  double step = 0.5;

  std::size_t n_angle() const { return angles.size(); }
  double r_image() const { return image.r_image(); }
  double fov() const { return derive_fov(d_source, r_image()); }
  double d_detector() const {
    return derive_detector_distance(d_source, n_detector, s_detector, fov());
  }
  FanbeamGeometry geometry() const;
  static OperatorParams from_geometry(const FanbeamGeometry& g, double s_fwd = 1.0,
                                      double step = 0.5);
  void validate() const;
};

/// d(d_detector)/d(d_source) with the inscribed-circle FOV rule, used by the
/// forward-mode d_source channel (d_detector is eliminated, not independent).
double detector_distance_derivative(double d_source, std::size_t n_detector, double s_detector,
                                    double r_image);

/// Entrywise partial derivatives of the sinogram w.r.t. the parameters.
/// d_angles is sinogram-shaped with row j holding d(row j)/d(phi_j); rows of
/// other views are structurally zero (block sparsity).
struct ParamGradient {
  Tensor d_s_fwd;
  Tensor d_d_source;
  Tensor d_angles;
};

/// Gradient of the calibration loss (1/M) sum_i ||A_Theta(x_i) - y_i||^2.
struct ThetaGradient {
  double loss = 0.0;
  double g_s_fwd = 0.0;
  double g_d_source = 0.0;
  std::vector<double> g_angles;
};

/// Selects which gradient channels loss_param_gradient computes; unset
/// channels are returned as zero. Used by block coordinate descent to skip
/// work for frozen blocks.
struct GradMask {
  bool s_fwd = true;
  bool d_source = true;
  bool angles = true;
};

/// Ray-driven fanbeam transform: for ray (j, i) the value is
/// s_fwd * step * sum_k bilinear(x, p_k) over equally spaced sample points
/// between the ray's entry and exit of the circle of radius r_image + 1.
Tensor forward_project(const Tensor& x, const OperatorParams& p);

/// Exact adjoint of forward_project (same sampling, transposed accumulation).
Tensor unfiltered_backproject(const Tensor& y, const OperatorParams& p);

/// Forward projection plus forward-mode derivatives w.r.t. s_fwd, d_source
/// and the owning phi_j. At interpolation-cell boundaries the one-sided value
/// from the cell containing the point is used (derivative defined a.e.).
std::pair<Tensor, ParamGradient> project_with_param_grads(const Tensor& x,
                                                          const OperatorParams& p);

/// 2/M * sum_i <A x_i - y_i, dA/dTheta x_i>, assembled per parameter block;
/// the phi_j component only sees view-j residual rows. Also reports the loss.
ThetaGradient loss_param_gradient(const std::vector<std::pair<Tensor, Tensor>>& batch,
                                  const OperatorParams& p, const GradMask& mask = {});

}  // namespace fanct
