#include <cmath>

#include "doctest.h"
#include "fanct/geometry.hpp"

using namespace fanct;

namespace {
constexpr double kPi = 3.14159265358979323846;
}

TEST_CASE("derive_fov worked examples") {
  CHECK(derive_fov(512.0, 256.0) == doctest::Approx(kPi / 6.0).epsilon(1e-12));
  CHECK(derive_fov(256.0 * std::sqrt(2.0), 256.0) == doctest::Approx(kPi / 4.0).epsilon(1e-12));
  CHECK_THROWS(derive_fov(200.0, 256.0));
  CHECK_THROWS(derive_fov(256.0, 256.0));
}

TEST_CASE("derive_detector_distance worked example and degeneracy") {
  double gamma = kPi / 6.0;
  double want = 512.0 * (std::sqrt(3.0) - 1.0);
  CHECK(derive_detector_distance(512.0, 1024, 1.0, gamma) ==
        doctest::Approx(want).epsilon(1e-12));

  // n_detector small enough that the detector would sit behind the origin
  CHECK_THROWS(derive_detector_distance(512.0, 100, 1.0, gamma));
}

TEST_CASE("dual-formula oracle for the detector distance") {
  // Using the inscribed-circle rule, tan(gamma) = r / sqrt(d^2 - r^2), so
  // n s / (2 tan gamma) - d = n s sqrt(d^2 - r^2) / (2 r) - d.
  double d = 600.0, r = 256.0;
  std::size_t n = 1024;
  double s = 1.0;
  double gamma = derive_fov(d, r);
  double got = derive_detector_distance(d, n, s, gamma);
  double alt = static_cast<double>(n) * s * std::sqrt(d * d - r * r) / (2.0 * r) - d;
  CHECK(std::abs(got - alt) / std::abs(alt) < 1e-9);
}

TEST_CASE("detector offsets are half-pixel centered") {
  CHECK(detector_offset(0, 5, 1.0) == doctest::Approx(-2.0));
  CHECK(detector_offset(2, 5, 1.0) == doctest::Approx(0.0));
  CHECK(detector_offset(4, 5, 1.0) == doctest::Approx(2.0));
  CHECK(detector_offset(0, 4, 1.0) == doctest::Approx(-1.5));
  CHECK(detector_offset(3, 4, 1.0) == doctest::Approx(1.5));
}

namespace {

FanbeamGeometry toy_geometry(std::size_t n_detector, std::size_t n_angle,
                             std::size_t size = 512) {
  FanbeamGeometry g;
  g.d_source = 2.0 * static_cast<double>(size);
  g.n_detector = n_detector;
  g.s_detector = 1.0;
  g.angles = uniform_angles(n_angle);
  g.image = ImageGrid{size, size};
  g.validate();
  return g;
}

}  // namespace

TEST_CASE("ray endpoints at the pinned orientations") {
  FanbeamGeometry g = toy_geometry(2049, 4);  // odd count -> exact center element
  std::size_t c = 1024;                       // (2049 - 1) / 2
  double dd = g.d_detector();

  RayEndpoints r0 = ray_endpoints(g, 0, c);
  CHECK(r0.source.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r0.source.y == doctest::Approx(g.d_source));
  CHECK(r0.detector.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r0.detector.y == doctest::Approx(-dd));

  // phi = pi is angle index 2 of 4 uniform angles
  RayEndpoints r2 = ray_endpoints(g, 2, c);
  CHECK(r2.source.x == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r2.source.y == doctest::Approx(-g.d_source));
  CHECK(r2.detector.x == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r2.detector.y == doctest::Approx(dd));
}

TEST_CASE("quarter-turn equals the rotation-matrix oracle") {
  FanbeamGeometry g = toy_geometry(1024, 4);  // angle index 1 = pi/2
  RayEndpoints base = ray_endpoints(g, 0, 0);
  RayEndpoints quarter = ray_endpoints(g, 1, 0);
  double cth = std::cos(kPi / 2.0), sth = std::sin(kPi / 2.0);
  CHECK(quarter.source.x == doctest::Approx(cth * base.source.x - sth * base.source.y));
  CHECK(quarter.source.y == doctest::Approx(sth * base.source.x + cth * base.source.y));
  CHECK(quarter.detector.x == doctest::Approx(cth * base.detector.x - sth * base.detector.y));
  CHECK(quarter.detector.y == doctest::Approx(sth * base.detector.x + cth * base.detector.y));
}

TEST_CASE("source stays on its circle and the detector on its line") {
  FanbeamGeometry g = toy_geometry(140, 7, 64);
  for (std::size_t j = 0; j < g.n_angle(); ++j) {
    for (std::size_t i : {std::size_t(0), std::size_t(13), std::size_t(63)}) {
      RayEndpoints r = ray_endpoints(g, j, i);
      double sn = std::sqrt(r.source.x * r.source.x + r.source.y * r.source.y);
      CHECK(sn == doctest::Approx(g.d_source).epsilon(1e-12));
      // detector point projected onto the source direction sits at -d_detector
      double ux = r.source.x / sn, uy = r.source.y / sn;
      double along = r.detector.x * ux + r.detector.y * uy;
      CHECK(along == doctest::Approx(-g.d_detector()).epsilon(1e-9));
    }
  }
}

TEST_CASE("extreme rays cover the inscribed circle") {
  FanbeamGeometry g = toy_geometry(512, 3, 256);
  double slack = g.r_image() * (1.0 - 2.0 / static_cast<double>(g.n_detector));
  for (std::size_t j = 0; j < g.n_angle(); ++j) {
    for (std::size_t i : {std::size_t(0), g.n_detector - 1}) {
      RayEndpoints r = ray_endpoints(g, j, i);
      double dx = r.detector.x - r.source.x, dy = r.detector.y - r.source.y;
      double len = std::sqrt(dx * dx + dy * dy);
      double dist = std::abs(dx * r.source.y - dy * r.source.x) / len;
      CHECK(dist >= slack);
    }
  }
}

TEST_CASE("validate rejects broken scanners") {
  FanbeamGeometry g = toy_geometry(1024, 8);
  g.d_source = 100.0;  // inside the inscribed circle
  CHECK_THROWS(g.validate());

  g = toy_geometry(1024, 8);
  g.angles[3] = std::nan("");
  CHECK_THROWS(g.validate());

  g = toy_geometry(1024, 8);
  g.n_detector = 10;  // detector behind the origin
  CHECK_THROWS(g.validate());
}

TEST_CASE("index range errors") {
  FanbeamGeometry g = toy_geometry(48, 4, 16);
  CHECK_THROWS(ray_endpoints(g, 4, 0));
  CHECK_THROWS(ray_endpoints(g, 0, 48));
}
