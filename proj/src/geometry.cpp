#include "fanct/geometry.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fanct {

double derive_fov(double d_source, double r_image) {
  if (!(r_image > 0.0)) throw std::invalid_argument("geometry: r_image must be positive");
  if (!(d_source > r_image))
    throw std::invalid_argument("geometry: d_source must exceed r_image (source inside object)");
  return std::asin(r_image / d_source);
}

double derive_detector_distance(double d_source, std::size_t n_detector, double s_detector,
                                double fov) {
  if (!(fov > 0.0) || !(fov < 0.5 * std::numbers::pi))
    throw std::invalid_argument("geometry: fov must lie in (0, pi/2)");
  double dd =
      static_cast<double>(n_detector) * s_detector / (2.0 * std::tan(fov)) - d_source;
  if (!(dd > 0.0))
    throw std::invalid_argument("geometry: derived detector distance is not positive");
  return dd;
}

std::vector<double> uniform_angles(std::size_t n_angle) {
  std::vector<double> a(n_angle);
  for (std::size_t k = 0; k < n_angle; ++k)
    a[k] = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_angle);
  return a;
}

void FanbeamGeometry::validate() const {
  if (image.nx == 0 || image.ny == 0)
    throw std::invalid_argument("geometry: image grid must be non-empty");
  if (n_detector == 0) throw std::invalid_argument("geometry: n_detector must be positive");
  if (s_detector != 1.0) throw std::invalid_argument("geometry: s_detector is fixed to 1");
  if (angles.empty()) throw std::invalid_argument("geometry: angles must be non-empty");
  for (double a : angles)
    if (!std::isfinite(a)) throw std::invalid_argument("geometry: angles must be finite");
  if (!std::isfinite(d_source))
    throw std::invalid_argument("geometry: d_source must be finite");
  (void)fov();         // throws if d_source <= r_image
  (void)d_detector();  // throws if the detector lands behind the origin
}

double detector_offset(std::size_t i, std::size_t n_detector, double s_detector) {
  return (static_cast<double>(i) - 0.5 * static_cast<double>(n_detector - 1)) * s_detector;
}

RayEndpoints fan_ray(double d_source, double d_detector, double t, double phi) {
  double c = std::cos(phi), s = std::sin(phi);
  RayEndpoints r;
  r.source = {-d_source * s, d_source * c};
  r.detector = {t * c + d_detector * s, t * s - d_detector * c};
  return r;
}

RayEndpoints ray_endpoints(const FanbeamGeometry& g, std::size_t j, std::size_t i) {
  if (j >= g.n_angle()) throw std::out_of_range("geometry: angle index out of range");
  if (i >= g.n_detector) throw std::out_of_range("geometry: detector index out of range");
  double t = detector_offset(i, g.n_detector, g.s_detector);
  return fan_ray(g.d_source, g.d_detector(), t, g.angles[j]);
}

}  // namespace fanct
