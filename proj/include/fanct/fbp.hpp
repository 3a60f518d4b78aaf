#pragma once

#include "fanct/projector.hpp"
#include "fanct/tensor.hpp"

namespace fanct {

struct FbpParams {
  double s_fbp = 1.0;
  std::size_t pad = 0;  // 0 selects the next power of two >= 2 * n_detector
  bool hamming = true;
};

/// Flat-detector fanbeam reweighting: entry (j, i) scaled by
/// d_source / sqrt(d_source^2 + t_i^2), t_i the element offset projected onto
/// the virtual detector through the origin.
Tensor cosine_reweight(const Tensor& y, const FanbeamGeometry& g);

/// Per-row convolution with the discrete ramp kernel
/// h(0) = 1/(4 delta^2), h(n) = -1/(pi n delta)^2 for odd n, 0 otherwise,
/// applied in the frequency domain on zero-padded rows, with an optional
/// Hamming window 0.54 + 0.46 cos(pi f / f_max) on the transfer function.
Tensor ramp_filter(const Tensor& y, double delta, std::size_t pad, bool hamming);

/// ramp_filter with the standard settings (delta = 1, auto pad, Hamming on).
Tensor ramp_filter_hamming(const Tensor& y);

/// Pixel-driven fanbeam backprojection of a filtered sinogram: for each pixel
/// and view, interpolate the row at the pixel's detector coordinate, weight by
/// d_source^2 / U^2 and the angular spacing 2 pi / n_angle.
Tensor pixel_driven_backproject(const Tensor& q, const OperatorParams& p);

/// Exact adjoint of pixel_driven_backproject (image-to-sinogram scatter).
Tensor pixel_driven_backproject_adjoint(const Tensor& g, const OperatorParams& p);

/// s_fbp * backproject(filter(reweight(y))).
Tensor fbp(const Tensor& y, const OperatorParams& p, const FbpParams& f);

/// Exact adjoint of fbp: the reweighting is diagonal and the padded filter is
/// self-adjoint, so the transpose is s_fbp * reweight(filter(backproject^T(g))).
/// Needed to backpropagate through data-consistency layers.
Tensor fbp_transpose(const Tensor& g, const OperatorParams& p, const FbpParams& f);

}  // namespace fanct
