#include "fanct/fbp.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fanct/fft.hpp"
#include "fanct/parallel.hpp"

namespace fanct {

namespace {

Tensor pack_like(const Tensor& ref, std::vector<std::size_t> dims, std::vector<double> vals) {
  if (ref.dtype() == Dtype::f64) return Tensor::from_f64(std::move(dims), std::move(vals));
  std::vector<float> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) out[i] = static_cast<float>(vals[i]);
  return Tensor::from_f32(std::move(dims), std::move(out));
}

void check_sino(const Tensor& y) {
  if (y.ndim() != 2) throw std::invalid_argument("fbp: sinogram must be 2-D");
}

/// Real transfer function of the windowed ramp kernel on a padded row.
std::vector<double> ramp_transfer(std::size_t pad, double delta, bool hamming) {
  std::vector<std::complex<double>> kr(pad, {0.0, 0.0});
  kr[0] = 0.25 / (delta * delta);
  for (std::size_t m = 1; m <= pad / 2; ++m) {
    if (m % 2 == 0) continue;
    double v = -1.0 / std::pow(std::numbers::pi * static_cast<double>(m) * delta, 2.0);
    kr[m] = v;
    if (pad - m != m) kr[pad - m] = v;  // even kernel on the circulant domain
  }
  fft(kr, false);
  std::vector<double> h(pad);
  double half = 0.5 * static_cast<double>(pad);
  for (std::size_t k = 0; k < pad; ++k) {
    double tf = kr[k].real();
    if (hamming) {
      double m = static_cast<double>(k <= pad / 2 ? k : pad - k);
      double nu = m / half;  // frequency as a fraction of Nyquist
      tf *= 0.54 + 0.46 * std::cos(std::numbers::pi * nu);
    }
    h[k] = tf;
  }
  return h;
}

struct BpContext {
  std::size_t nx, ny, ndet, nang;
  double d, dd, dphi, hx, hy, rmax2;
  std::vector<double> cs, sn;
};

BpContext make_bp_context(const OperatorParams& p) {
  p.validate();
  BpContext ctx;
  ctx.nx = p.image.nx;
  ctx.ny = p.image.ny;
  ctx.ndet = p.n_detector;
  ctx.nang = p.n_angle();
  ctx.d = p.d_source;
  ctx.dd = p.d_detector();
  ctx.dphi = 2.0 * std::numbers::pi / static_cast<double>(ctx.nang);
  ctx.hx = 0.5 * static_cast<double>(ctx.nx - 1);
  ctx.hy = 0.5 * static_cast<double>(ctx.ny - 1);
  double r = p.r_image();
  ctx.rmax2 = r * r;  // pixels beyond the scan FOV are not reconstructable
  ctx.cs.resize(ctx.nang);
  ctx.sn.resize(ctx.nang);
  for (std::size_t j = 0; j < ctx.nang; ++j) {
    ctx.cs[j] = std::cos(p.angles[j]);
    ctx.sn[j] = std::sin(p.angles[j]);
  }
  return ctx;
}

}  // namespace

Tensor cosine_reweight(const Tensor& y, const FanbeamGeometry& g) {
  check_sino(y);
  g.validate();
  if (y.dim(0) != g.n_angle() || y.dim(1) != g.n_detector)
    throw std::invalid_argument("fbp: sinogram dims do not match the geometry");
  std::vector<double> vals = y.to_f64_vector();
  std::vector<double> w(g.n_detector);
  double mag = g.d_source / (g.d_source + g.d_detector());
  for (std::size_t i = 0; i < g.n_detector; ++i) {
    // detector offset rescaled to the virtual detector through the origin
    double t = mag * detector_offset(i, g.n_detector, g.s_detector);
    w[i] = g.d_source / std::sqrt(g.d_source * g.d_source + t * t);
  }
  for (std::size_t j = 0; j < g.n_angle(); ++j)
    for (std::size_t i = 0; i < g.n_detector; ++i) vals[j * g.n_detector + i] *= w[i];
  return pack_like(y, {g.n_angle(), g.n_detector}, std::move(vals));
}

Tensor ramp_filter(const Tensor& y, double delta, std::size_t pad, bool hamming) {
  check_sino(y);
  std::size_t rows = y.dim(0), n = y.dim(1);
  if (pad == 0) pad = next_pow2(2 * n);
  if (pad < n) throw std::invalid_argument("fbp: pad must be >= n_detector");
  pad = next_pow2(pad);

  std::vector<double> h = ramp_transfer(pad, delta, hamming);
  std::vector<double> src = y.to_f64_vector();
  std::vector<double> out(rows * n, 0.0);

  parallel_for(0, rows, [&](std::size_t r) {
    std::vector<std::complex<double>> buf(pad, {0.0, 0.0});
    for (std::size_t i = 0; i < n; ++i) buf[i] = src[r * n + i];
    fft(buf, false);
    for (std::size_t k = 0; k < pad; ++k) buf[k] *= h[k];
    fft(buf, true);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = buf[i].real();
  });
  return pack_like(y, {rows, n}, std::move(out));
}

Tensor ramp_filter_hamming(const Tensor& y) { return ramp_filter(y, 1.0, 0, true); }

Tensor pixel_driven_backproject(const Tensor& q, const OperatorParams& p) {
  BpContext ctx = make_bp_context(p);
  check_sino(q);
  if (q.dim(0) != ctx.nang || q.dim(1) != ctx.ndet)
    throw std::invalid_argument("fbp: sinogram dims do not match the geometry");
  std::vector<double> rows = q.to_f64_vector();
  std::vector<double> img(ctx.nx * ctx.ny, 0.0);

  parallel_for_ranges(0, ctx.ny, [&](std::size_t ylo, std::size_t yhi) {
    for (std::size_t iy = ylo; iy < yhi; ++iy) {
      double py = static_cast<double>(iy) - ctx.hy;
      for (std::size_t ix = 0; ix < ctx.nx; ++ix) {
        double px = static_cast<double>(ix) - ctx.hx;
        if (px * px + py * py > ctx.rmax2) continue;
        double acc = 0.0;
        for (std::size_t j = 0; j < ctx.nang; ++j) {
          double c = ctx.cs[j], s = ctx.sn[j];
          double rx = c * px + s * py;    // across-fan coordinate
          double ry = -s * px + c * py;   // toward-source coordinate
          double u = ctx.d - ry;
          if (u <= 0.0) continue;
          double t = rx * (ctx.d + ctx.dd) / u;
          double fi = t / p.s_detector + 0.5 * static_cast<double>(ctx.ndet - 1);
          double fl = std::floor(fi);
          long i0 = static_cast<long>(fl);
          double a = fi - fl;
          double v = 0.0;
          if (static_cast<std::size_t>(i0) < ctx.ndet) v += (1.0 - a) * rows[j * ctx.ndet + i0];
          if (static_cast<std::size_t>(i0 + 1) < ctx.ndet) v += a * rows[j * ctx.ndet + i0 + 1];
          acc += v * (ctx.d * ctx.d) / (u * u);
        }
        img[iy * ctx.nx + ix] = acc * ctx.dphi;
      }
    }
  });
  return pack_like(q, {ctx.ny, ctx.nx}, std::move(img));
}

Tensor pixel_driven_backproject_adjoint(const Tensor& g, const OperatorParams& p) {
  BpContext ctx = make_bp_context(p);
  if (g.ndim() != 2 || g.dim(0) != ctx.ny || g.dim(1) != ctx.nx)
    throw std::invalid_argument("fbp: image dims do not match the grid");
  std::vector<double> img = g.to_f64_vector();
  std::vector<double> out(ctx.nang * ctx.ndet, 0.0);

  // Each view owns its sinogram row, so the scatter is race-free and the
  // result does not depend on the view schedule.
  parallel_for(0, ctx.nang, [&](std::size_t j) {
    double c = ctx.cs[j], s = ctx.sn[j];
    double* row = out.data() + j * ctx.ndet;
    for (std::size_t iy = 0; iy < ctx.ny; ++iy) {
      double py = static_cast<double>(iy) - ctx.hy;
      for (std::size_t ix = 0; ix < ctx.nx; ++ix) {
        double px = static_cast<double>(ix) - ctx.hx;
        if (px * px + py * py > ctx.rmax2) continue;
        double rx = c * px + s * py;
        double ry = -s * px + c * py;
        double u = ctx.d - ry;
        if (u <= 0.0) continue;
        double t = rx * (ctx.d + ctx.dd) / u;
        double fi = t / p.s_detector + 0.5 * static_cast<double>(ctx.ndet - 1);
        double fl = std::floor(fi);
        long i0 = static_cast<long>(fl);
        double a = fi - fl;
        double w = img[iy * ctx.nx + ix] * (ctx.d * ctx.d) / (u * u) * ctx.dphi;
        if (static_cast<std::size_t>(i0) < ctx.ndet) row[i0] += (1.0 - a) * w;
        if (static_cast<std::size_t>(i0 + 1) < ctx.ndet) row[i0 + 1] += a * w;
      }
    }
  });
  return pack_like(g, {ctx.nang, ctx.ndet}, std::move(out));
}

Tensor fbp(const Tensor& y, const OperatorParams& p, const FbpParams& f) {
  if (!(f.s_fbp > 0.0)) throw std::invalid_argument("fbp: s_fbp must be positive");
  Tensor q = cosine_reweight(y, p.geometry());
  q = ramp_filter(q, p.s_detector, f.pad, f.hamming);
  Tensor img = pixel_driven_backproject(q, p);
  if (img.dtype() == Dtype::f64) {
    auto v = img.as<double>();
    for (auto& e : v) e *= f.s_fbp;
  } else {
    auto v = img.as<float>();
    float sc = static_cast<float>(f.s_fbp);
    for (auto& e : v) e *= sc;
  }
  return img;
}

Tensor fbp_transpose(const Tensor& g, const OperatorParams& p, const FbpParams& f) {
  if (!(f.s_fbp > 0.0)) throw std::invalid_argument("fbp: s_fbp must be positive");
  Tensor q = pixel_driven_backproject_adjoint(g, p);
  q = ramp_filter(q, p.s_detector, f.pad, f.hamming);
  q = cosine_reweight(q, p.geometry());
  if (q.dtype() == Dtype::f64) {
    auto v = q.as<double>();
    for (auto& e : v) e *= f.s_fbp;
  } else {
    auto v = q.as<float>();
    float sc = static_cast<float>(f.s_fbp);
    for (auto& e : v) e *= sc;
  }
  return q;
}

}  // namespace fanct
