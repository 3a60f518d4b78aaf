#include "fanct/projector.hpp"

#include <cmath>
#include <stdexcept>

#include "fanct/parallel.hpp"

namespace fanct {

FanbeamGeometry OperatorParams::geometry() const {
  FanbeamGeometry g;
  g.d_source = d_source;
  g.n_detector = n_detector;
  g.s_detector = s_detector;
  g.angles = angles;
  g.image = image;
  return g;
}

OperatorParams OperatorParams::from_geometry(const FanbeamGeometry& g, double s_fwd,
                                             double step) {
  OperatorParams p;
  p.s_fwd = s_fwd;
  p.d_source = g.d_source;
  p.angles = g.angles;
  p.n_detector = g.n_detector;
  p.s_detector = g.s_detector;
  p.image = g.image;
  p.step = step;
  return p;
}

void OperatorParams::validate() const {
  if (!(s_fwd > 0.0) || !std::isfinite(s_fwd))
    throw std::invalid_argument("projector: s_fwd must be positive");
  if (!(step > 0.0) || !std::isfinite(step))
    throw std::invalid_argument("projector: step must be positive");
  geometry().validate();
}

double detector_distance_derivative(double d_source, std::size_t n_detector, double s_detector,
                                    double r_image) {
  double root = std::sqrt(d_source * d_source - r_image * r_image);
  return static_cast<double>(n_detector) * s_detector * d_source / (2.0 * r_image * root) - 1.0;
}

namespace {

struct RayCursor {
  long n = 0;        // sample count; 0 when the ray misses the circle
  double gx = 0.0;   // first sample point, grid coordinates
  double gy = 0.0;
  double gsx = 0.0;  // per-sample increment
  double gsy = 0.0;
};

struct ViewTrig {
  double c, s;
};

struct ProjectorContext {
  const OperatorParams* p;
  std::size_t nx, ny, ndet, nang;
  double dd;    // derived detector distance
  double ddp;   // d(d_detector)/d(d_source)
  double rc;    // integration circle radius r_image + 1
  double sfs;   // s_fwd * step
  double hx, hy;  // grid coordinate shifts (nx-1)/2, (ny-1)/2
  std::vector<ViewTrig> trig;
};

ProjectorContext make_context(const OperatorParams& p) {
  p.validate();
  ProjectorContext ctx;
  ctx.p = &p;
  ctx.nx = p.image.nx;
  ctx.ny = p.image.ny;
  ctx.ndet = p.n_detector;
  ctx.nang = p.n_angle();
  ctx.dd = p.d_detector();
  ctx.ddp = detector_distance_derivative(p.d_source, p.n_detector, p.s_detector, p.r_image());
  ctx.rc = p.r_image() + 1.0;
  ctx.sfs = p.s_fwd * p.step;
  ctx.hx = 0.5 * static_cast<double>(ctx.nx - 1);
  ctx.hy = 0.5 * static_cast<double>(ctx.ny - 1);
  ctx.trig.resize(ctx.nang);
  for (std::size_t j = 0; j < ctx.nang; ++j)
    ctx.trig[j] = {std::cos(p.angles[j]), std::sin(p.angles[j])};
  return ctx;
}

/// Entry/exit of the integration circle and the midpoint sample walk.
/// Sample k sits at arc parameter tin + (k + 1/2) * step from the source.
RayCursor setup_ray(const ProjectorContext& ctx, std::size_t j, std::size_t i,
                    double* ray_state = nullptr) {
  const OperatorParams& p = *ctx.p;
  double c = ctx.trig[j].c, s = ctx.trig[j].s;
  double t = detector_offset(i, ctx.ndet, p.s_detector);

  double srcx = -p.d_source * s, srcy = p.d_source * c;
  double detx = t * c + ctx.dd * s, dety = t * s - ctx.dd * c;
  double dx = detx - srcx, dy = dety - srcy;
  double len = std::sqrt(dx * dx + dy * dy);
  double ux = dx / len, uy = dy / len;
  double b = srcx * ux + srcy * uy;
  double disc = b * b - (p.d_source * p.d_source - ctx.rc * ctx.rc);

  RayCursor cur;
  if (disc <= 0.0) return cur;
  double sq = std::sqrt(disc);
  double tin = -b - sq;
  double chord = 2.0 * sq;
  cur.n = static_cast<long>(std::ceil(chord / p.step));
  if (cur.n <= 0) {
    cur.n = 0;
    return cur;
  }
  double t0 = tin + 0.5 * p.step;
  cur.gx = srcx + t0 * ux + ctx.hx;
  cur.gy = srcy + t0 * uy + ctx.hy;
  cur.gsx = p.step * ux;
  cur.gsy = p.step * uy;

  if (ray_state) {
    // srcx srcy ux uy b sq tin t len
    ray_state[0] = srcx;
    ray_state[1] = srcy;
    ray_state[2] = ux;
    ray_state[3] = uy;
    ray_state[4] = b;
    ray_state[5] = sq;
    ray_state[6] = tin;
    ray_state[7] = t;
    ray_state[8] = len;
  }
  return cur;
}

/// Directional derivative of the first sample point and of the per-sample
/// increment w.r.t. one scalar parameter (forward mode through the circle
/// entry point; the step length itself is a constant).
struct RayTangent {
  double qx = 0.0, qy = 0.0;    // derivative of the first sample point
  double qsx = 0.0, qsy = 0.0;  // derivative of the per-sample increment
};

enum class Channel { d_source, angle };

RayTangent ray_tangent(const ProjectorContext& ctx, std::size_t j, const double* st,
                       Channel ch) {
  const OperatorParams& p = *ctx.p;
  double c = ctx.trig[j].c, s = ctx.trig[j].s;
  double srcx = st[0], srcy = st[1], ux = st[2], uy = st[3];
  double b = st[4], sq = st[5], tin = st[6], t = st[7], len = st[8];

  double dsx, dsy, ddx, ddy, dnorms2;
  if (ch == Channel::d_source) {
    dsx = -s;
    dsy = c;
    ddx = ctx.ddp * s;
    ddy = -ctx.ddp * c;
    dnorms2 = 2.0 * p.d_source;
  } else {
    dsx = -p.d_source * c;
    dsy = -p.d_source * s;
    ddx = -t * s + ctx.dd * c;
    ddy = t * c + ctx.dd * s;
    dnorms2 = 0.0;
  }

  double ddirx = ddx - dsx, ddiry = ddy - dsy;
  double dlen = ux * ddirx + uy * ddiry;
  double dux = (ddirx - ux * dlen) / len;
  double duy = (ddiry - uy * dlen) / len;
  double db = dsx * ux + dsy * uy + srcx * dux + srcy * duy;
  double ddisc = 2.0 * b * db - dnorms2;
  double dsq = ddisc / (2.0 * sq);
  double dtin = -db - dsq;

  RayTangent tg;
  double t0 = tin + 0.5 * p.step;
  tg.qx = dsx + dtin * ux + t0 * dux;
  tg.qy = dsy + dtin * uy + t0 * duy;
  tg.qsx = p.step * dux;
  tg.qsy = p.step * duy;
  return tg;
}

inline bool border_tap_range(long ix, long iy, long nx, long ny) {
  return ix >= -1 && iy >= -1 && ix <= nx - 1 && iy <= ny - 1;
}

/// Accumulates the plain line integral for one ray.
double integrate_ray(const ProjectorContext& ctx, const double* img, RayCursor cur) {
  const std::size_t nx = ctx.nx, ny = ctx.ny;
  const std::size_t nxm1 = nx - 1, nym1 = ny - 1;
  double acc = 0.0;
  double gx = cur.gx, gy = cur.gy;
  for (long k = 0; k < cur.n; ++k, gx += cur.gsx, gy += cur.gsy) {
    double flx = std::floor(gx), fly = std::floor(gy);
    long ix = static_cast<long>(flx), iy = static_cast<long>(fly);
    double ax = gx - flx, ay = gy - fly;
    if (static_cast<std::size_t>(ix) < nxm1 && static_cast<std::size_t>(iy) < nym1) {
      const double* p0 = img + static_cast<std::size_t>(iy) * nx + static_cast<std::size_t>(ix);
      double top = (1.0 - ax) * p0[0] + ax * p0[1];
      double bot = (1.0 - ax) * p0[nx] + ax * p0[nx + 1];
      acc += (1.0 - ay) * top + ay * bot;
    } else if (border_tap_range(ix, iy, static_cast<long>(nx), static_cast<long>(ny))) {
      auto tap = [&](long jx, long jy) -> double {
        return (static_cast<std::size_t>(jx) < nx && static_cast<std::size_t>(jy) < ny)
                   ? img[static_cast<std::size_t>(jy) * nx + static_cast<std::size_t>(jx)]
                   : 0.0;
      };
      double top = (1.0 - ax) * tap(ix, iy) + ax * tap(ix + 1, iy);
      double bot = (1.0 - ax) * tap(ix, iy + 1) + ax * tap(ix + 1, iy + 1);
      acc += (1.0 - ay) * top + ay * bot;
    }
  }
  return acc;
}

/// Value plus directional derivatives along up to two tangents.
struct RayEval {
  double val = 0.0;
  double dv0 = 0.0;
  double dv1 = 0.0;
};

template <bool WANT0, bool WANT1>
RayEval integrate_ray_grad(const ProjectorContext& ctx, const double* img, RayCursor cur,
                           const RayTangent& t0, const RayTangent& t1) {
  const std::size_t nx = ctx.nx, ny = ctx.ny;
  const std::size_t nxm1 = nx - 1, nym1 = ny - 1;
  RayEval ev;
  double gx = cur.gx, gy = cur.gy;
  double q0x = t0.qx, q0y = t0.qy;
  double q1x = t1.qx, q1y = t1.qy;
  for (long k = 0; k < cur.n; ++k) {
    double flx = std::floor(gx), fly = std::floor(gy);
    long ix = static_cast<long>(flx), iy = static_cast<long>(fly);
    double ax = gx - flx, ay = gy - fly;
    double v00 = 0, v10 = 0, v01 = 0, v11 = 0;
    bool any = false;
    if (static_cast<std::size_t>(ix) < nxm1 && static_cast<std::size_t>(iy) < nym1) {
      const double* p0 = img + static_cast<std::size_t>(iy) * nx + static_cast<std::size_t>(ix);
      v00 = p0[0];
      v10 = p0[1];
      v01 = p0[nx];
      v11 = p0[nx + 1];
      any = true;
    } else if (border_tap_range(ix, iy, static_cast<long>(nx), static_cast<long>(ny))) {
      auto tap = [&](long jx, long jy) -> double {
        return (static_cast<std::size_t>(jx) < nx && static_cast<std::size_t>(jy) < ny)
                   ? img[static_cast<std::size_t>(jy) * nx + static_cast<std::size_t>(jx)]
                   : 0.0;
      };
      v00 = tap(ix, iy);
      v10 = tap(ix + 1, iy);
      v01 = tap(ix, iy + 1);
      v11 = tap(ix + 1, iy + 1);
      any = true;
    }
    if (any) {
      double top = (1.0 - ax) * v00 + ax * v10;
      double bot = (1.0 - ax) * v01 + ax * v11;
      ev.val += (1.0 - ay) * top + ay * bot;
      double bx = (1.0 - ay) * (v10 - v00) + ay * (v11 - v01);
      double by = (1.0 - ax) * (v01 - v00) + ax * (v11 - v10);
      if constexpr (WANT0) ev.dv0 += bx * q0x + by * q0y;
      if constexpr (WANT1) ev.dv1 += bx * q1x + by * q1y;
    }
    gx += cur.gsx;
    gy += cur.gsy;
    if constexpr (WANT0) {
      q0x += t0.qsx;
      q0y += t0.qsy;
    }
    if constexpr (WANT1) {
      q1x += t1.qsx;
      q1y += t1.qsy;
    }
  }
  return ev;
}

void check_image_dims(const Tensor& x, const ProjectorContext& ctx) {
  if (x.ndim() != 2 || x.dim(0) != ctx.ny || x.dim(1) != ctx.nx)
    throw std::invalid_argument("projector: image dims do not match the grid");
}

void check_sino_dims(const Tensor& y, const ProjectorContext& ctx) {
  if (y.ndim() != 2 || y.dim(0) != ctx.nang || y.dim(1) != ctx.ndet)
    throw std::invalid_argument("projector: sinogram dims do not match the geometry");
}

Tensor pack_like(const Tensor& ref, std::vector<std::size_t> dims, std::vector<double> vals) {
  if (ref.dtype() == Dtype::f64) return Tensor::from_f64(std::move(dims), std::move(vals));
  std::vector<float> out(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) out[i] = static_cast<float>(vals[i]);
  return Tensor::from_f32(std::move(dims), std::move(out));
}

}  // namespace

Tensor forward_project(const Tensor& x, const OperatorParams& p) {
  ProjectorContext ctx = make_context(p);
  check_image_dims(x, ctx);
  std::vector<double> img = x.to_f64_vector();
  std::vector<double> sino(ctx.nang * ctx.ndet, 0.0);

  parallel_for_ranges(0, ctx.nang * ctx.ndet, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      std::size_t j = r / ctx.ndet, i = r % ctx.ndet;
      RayCursor cur = setup_ray(ctx, j, i);
      sino[r] = ctx.sfs * integrate_ray(ctx, img.data(), cur);
    }
  });
  return pack_like(x, {ctx.nang, ctx.ndet}, std::move(sino));
}

Tensor unfiltered_backproject(const Tensor& y, const OperatorParams& p) {
  ProjectorContext ctx = make_context(p);
  check_sino_dims(y, ctx);
  std::vector<double> sino = y.to_f64_vector();
  const std::size_t npix = ctx.nx * ctx.ny;
  const std::size_t nray = ctx.nang * ctx.ndet;

  // Per-chunk scatter buffers merged in fixed order keep the result bitwise
  // independent of the worker count.
  std::size_t chunks = std::min<std::size_t>(nray, kRangeChunks);
  std::size_t per = (nray + chunks - 1) / chunks;
  std::vector<std::vector<double>> bufs(chunks);

  parallel_for(0, chunks, [&](std::size_t cidx) {
    std::size_t lo = cidx * per, hi = std::min(nray, lo + per);
    auto& buf = bufs[cidx];
    buf.assign(npix, 0.0);
    const std::size_t nx = ctx.nx, ny = ctx.ny;
    const std::size_t nxm1 = nx - 1, nym1 = ny - 1;
    for (std::size_t r = lo; r < hi; ++r) {
      std::size_t j = r / ctx.ndet, i = r % ctx.ndet;
      double coef = ctx.sfs * sino[r];
      if (coef == 0.0) continue;
      RayCursor cur = setup_ray(ctx, j, i);
      double gx = cur.gx, gy = cur.gy;
      for (long k = 0; k < cur.n; ++k, gx += cur.gsx, gy += cur.gsy) {
        double flx = std::floor(gx), fly = std::floor(gy);
        long ix = static_cast<long>(flx), iy = static_cast<long>(fly);
        double ax = gx - flx, ay = gy - fly;
        if (static_cast<std::size_t>(ix) < nxm1 && static_cast<std::size_t>(iy) < nym1) {
          double* p0 = buf.data() + static_cast<std::size_t>(iy) * nx + static_cast<std::size_t>(ix);
          p0[0] += (1.0 - ax) * (1.0 - ay) * coef;
          p0[1] += ax * (1.0 - ay) * coef;
          p0[nx] += (1.0 - ax) * ay * coef;
          p0[nx + 1] += ax * ay * coef;
        } else if (border_tap_range(ix, iy, static_cast<long>(nx), static_cast<long>(ny))) {
          auto put = [&](long jx, long jy, double w) {
            if (static_cast<std::size_t>(jx) < nx && static_cast<std::size_t>(jy) < ny)
              buf[static_cast<std::size_t>(jy) * nx + static_cast<std::size_t>(jx)] += w * coef;
          };
          put(ix, iy, (1.0 - ax) * (1.0 - ay));
          put(ix + 1, iy, ax * (1.0 - ay));
          put(ix, iy + 1, (1.0 - ax) * ay);
          put(ix + 1, iy + 1, ax * ay);
        }
      }
    }
  });

  std::vector<double> img(npix, 0.0);
  for (std::size_t c = 0; c < chunks; ++c)
    for (std::size_t q = 0; q < npix; ++q) img[q] += bufs[c][q];
  return pack_like(y, {ctx.ny, ctx.nx}, std::move(img));
}

std::pair<Tensor, ParamGradient> project_with_param_grads(const Tensor& x,
                                                          const OperatorParams& p) {
  ProjectorContext ctx = make_context(p);
  check_image_dims(x, ctx);
  std::vector<double> img = x.to_f64_vector();
  const std::size_t nray = ctx.nang * ctx.ndet;
  std::vector<double> sino(nray, 0.0), g_s(nray, 0.0), g_d(nray, 0.0), g_a(nray, 0.0);

  parallel_for_ranges(0, nray, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      std::size_t j = r / ctx.ndet, i = r % ctx.ndet;
      double st[9];
      RayCursor cur = setup_ray(ctx, j, i, st);
      if (cur.n == 0) continue;
      RayTangent td = ray_tangent(ctx, j, st, Channel::d_source);
      RayTangent ta = ray_tangent(ctx, j, st, Channel::angle);
      RayEval ev = integrate_ray_grad<true, true>(ctx, img.data(), cur, td, ta);
      sino[r] = ctx.sfs * ev.val;
      g_s[r] = p.step * ev.val;          // d(value)/d(s_fwd) = value / s_fwd
      g_d[r] = ctx.sfs * ev.dv0;
      g_a[r] = ctx.sfs * ev.dv1;
    }
  });

  ParamGradient grad;
  grad.d_s_fwd = pack_like(x, {ctx.nang, ctx.ndet}, std::move(g_s));
  grad.d_d_source = pack_like(x, {ctx.nang, ctx.ndet}, std::move(g_d));
  grad.d_angles = pack_like(x, {ctx.nang, ctx.ndet}, std::move(g_a));
  return {pack_like(x, {ctx.nang, ctx.ndet}, std::move(sino)), std::move(grad)};
}

ThetaGradient loss_param_gradient(const std::vector<std::pair<Tensor, Tensor>>& batch,
                                  const OperatorParams& p, const GradMask& mask) {
  ProjectorContext ctx = make_context(p);
  if (batch.empty()) throw std::invalid_argument("projector: empty batch");
  for (const auto& [x, y] : batch) {
    check_image_dims(x, ctx);
    check_sino_dims(y, ctx);
  }

  const std::size_t nray = ctx.nang * ctx.ndet;
  std::size_t chunks = std::min<std::size_t>(nray, kRangeChunks);
  std::size_t per = (nray + chunks - 1) / chunks;

  ThetaGradient total;
  total.g_angles.assign(ctx.nang, 0.0);
  double inv_m = 1.0 / static_cast<double>(batch.size());

  std::vector<double> c_loss(chunks), c_gs(chunks), c_gd(chunks);
  std::vector<std::vector<double>> c_ga(chunks);

  for (const auto& [xt, yt] : batch) {
    std::vector<double> img = xt.to_f64_vector();
    std::vector<double> meas = yt.to_f64_vector();

    parallel_for(0, chunks, [&](std::size_t cidx) {
      std::size_t lo = cidx * per, hi = std::min(nray, lo + per);
      double loss = 0.0, gs = 0.0, gd = 0.0;
      auto& ga = c_ga[cidx];
      ga.assign(ctx.nang, 0.0);
      for (std::size_t r = lo; r < hi; ++r) {
        std::size_t j = r / ctx.ndet, i = r % ctx.ndet;
        double st[9];
        RayCursor cur = setup_ray(ctx, j, i, st);
        double val = 0.0, dvd = 0.0, dva = 0.0;
        if (cur.n > 0) {
          if (mask.d_source && mask.angles) {
            RayTangent td = ray_tangent(ctx, j, st, Channel::d_source);
            RayTangent ta = ray_tangent(ctx, j, st, Channel::angle);
            RayEval ev = integrate_ray_grad<true, true>(ctx, img.data(), cur, td, ta);
            val = ev.val;
            dvd = ev.dv0;
            dva = ev.dv1;
          } else if (mask.d_source) {
            RayTangent td = ray_tangent(ctx, j, st, Channel::d_source);
            RayEval ev = integrate_ray_grad<true, false>(ctx, img.data(), cur, td, td);
            val = ev.val;
            dvd = ev.dv0;
          } else if (mask.angles) {
            RayTangent ta = ray_tangent(ctx, j, st, Channel::angle);
            RayEval ev = integrate_ray_grad<true, false>(ctx, img.data(), cur, ta, ta);
            val = ev.val;
            dva = ev.dv0;
          } else {
            val = integrate_ray(ctx, img.data(), cur);
          }
        }
        double res = ctx.sfs * val - meas[r];
        loss += res * res;
        if (mask.s_fwd) gs += res * p.step * val;
        if (mask.d_source) gd += res * ctx.sfs * dvd;
        if (mask.angles) ga[j] += res * ctx.sfs * dva;
      }
      c_loss[cidx] = loss;
      c_gs[cidx] = gs;
      c_gd[cidx] = gd;
    });

    for (std::size_t c = 0; c < chunks; ++c) {
      total.loss += inv_m * c_loss[c];
      total.g_s_fwd += 2.0 * inv_m * c_gs[c];
      total.g_d_source += 2.0 * inv_m * c_gd[c];
      for (std::size_t j = 0; j < ctx.nang; ++j) total.g_angles[j] += 2.0 * inv_m * c_ga[c][j];
    }
  }
  return total;
}

}  // namespace fanct
