#pragma once

#include <cstddef>
#include <vector>

namespace fanct {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct ImageGrid {
  std::size_t nx = 0;
  std::size_t ny = 0;
  double r_image() const { return 0.5 * static_cast<double>(nx < ny ? nx : ny); }
};

/// Half fan angle gamma = arcsin(r_image / d_source).
double derive_fov(double d_source, double r_image);

/// Origin->detector distance n_detector*s_detector/(2 tan gamma) - d_source.
double derive_detector_distance(double d_source, std::size_t n_detector, double s_detector,
                                double fov);

/// n uniformly spaced view angles 2*pi*k/n, k = 0..n-1.
std::vector<double> uniform_angles(std::size_t n_angle);

/// Fanbeam scanner description. Pixel size is 1 with the image centered at the
/// origin, s_detector is normalized to 1; physical units are absorbed by the
/// learnable scale factors. At angle phi = 0 the source sits at (0, d_source)
/// and the flat detector array lies on the line y = -d_detector; general views
/// rotate both counterclockwise about the origin.
struct FanbeamGeometry {
  double d_source = 0.0;
  std::size_t n_detector = 0;
  double s_detector = 1.0;
  std::vector<double> angles;
  ImageGrid image;

  std::size_t n_angle() const { return angles.size(); }
  double r_image() const { return image.r_image(); }
  double fov() const { return derive_fov(d_source, r_image()); }
  double d_detector() const {
    return derive_detector_distance(d_source, n_detector, s_detector, fov());
  }

  /// Throws std::invalid_argument when any invariant is violated.
  void validate() const;
};

struct RayEndpoints {
  Vec2 source;
  Vec2 detector;
};

/// Detector element offset t_i = (i - (n_detector - 1)/2) * s_detector.
double detector_offset(std::size_t i, std::size_t n_detector, double s_detector);

/// Endpoints of the ray through detector element i at view j, in image coordinates.
RayEndpoints ray_endpoints(const FanbeamGeometry& g, std::size_t j, std::size_t i);

/// Endpoint helper shared with the projector: rotation by phi applied to the
/// source (0, d_source) and the detector point (t, -d_detector).
RayEndpoints fan_ray(double d_source, double d_detector, double t, double phi);

}  // namespace fanct
