#include "fanct/phantom.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fanct/fbp.hpp"
#include "fanct/rng.hpp"
#include "fanct/tensor_io.hpp"

namespace fanct {

void PhantomConfig::validate() const {
  if (size < 32) throw std::invalid_argument("phantom: size below minimum (32)");
  for (double a : {att_adipose, att_skin, att_fibro, att_micro})
    if (!(a > 0.0) || a > 1.0)
      throw std::invalid_argument("phantom: attenuations must lie in (0, 1]");
  if (!(sigma >= 0.0)) throw std::invalid_argument("phantom: sigma must be >= 0");
  if (sigma > static_cast<double>(size) / 12.0)
    throw std::invalid_argument("phantom: sigma too large for the support margin");
  if (blob_min > blob_max || micro_min > micro_max)
    throw std::invalid_argument("phantom: invalid count range");
}

void SimConfig::validate() const {
  geometry.validate();
  if (count == 0) throw std::invalid_argument("sim: count must be >= 1");
  if (!(s_fwd > 0.0)) throw std::invalid_argument("sim: s_fwd must be positive");
  if (!(step > 0.0) || !(fine_step > 0.0))
    throw std::invalid_argument("sim: step sizes must be positive");
  if (noise_std < 0.0) throw std::invalid_argument("sim: noise_std must be >= 0");
  if (train_frac < 0.0 || val_frac < 0.0 || test_frac < 0.0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("sim: split fractions must be nonnegative and sum to 1");
}

namespace {

struct Ellipse {
  double cx, cy;  // pixel coordinates
  double a, b;    // semi-axes, pixels
  double cth, sth;

  // normalized squared elliptic radius of pixel (x, y)
  double rho2(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    double ex = cth * dx + sth * dy;
    double ey = -sth * dx + cth * dy;
    return (ex / a) * (ex / a) + (ey / b) * (ey / b);
  }
};

Ellipse sample_ellipse(Rng& rng, double cx, double cy, double amin, double amax) {
  Ellipse e;
  e.cx = cx;
  e.cy = cy;
  e.a = rng.uniform(amin, amax);
  e.b = rng.uniform(amin, amax);
  double th = rng.uniform(0.0, std::numbers::pi);
  e.cth = std::cos(th);
  e.sth = std::sin(th);
  return e;
}

/// Uniform point inside the outline at normalized radius < rmax.
void sample_interior_point(Rng& rng, const Ellipse& outline, double rmax, double& px,
                           double& py) {
  for (int tries = 0; tries < 256; ++tries) {
    double u = rng.uniform(-rmax, rmax);
    double v = rng.uniform(-rmax, rmax);
    if (u * u + v * v >= rmax * rmax) continue;
    double ex = u * outline.a, ey = v * outline.b;
    px = outline.cx + outline.cth * ex - outline.sth * ey;
    py = outline.cy + outline.sth * ex + outline.cth * ey;
    return;
  }
  px = outline.cx;
  py = outline.cy;
}

}  // namespace

std::vector<std::uint8_t> generate_phantom_labels(const PhantomConfig& cfg,
                                                  std::uint64_t index) {
  cfg.validate();
  const std::size_t n = cfg.size;
  const double nd = static_cast<double>(n);
  Rng rng(Rng::mix(cfg.seed, index));

  double cx = 0.5 * (nd - 1.0) + rng.uniform(-0.02, 0.02) * nd;
  double cy = 0.5 * (nd - 1.0) + rng.uniform(-0.02, 0.02) * nd;
  Ellipse outline = sample_ellipse(rng, cx, cy, 0.26 * nd, 0.38 * nd);
  double ring = rng.uniform(2.0, 4.0);
  double rho_skin = 1.0 - ring / std::min(outline.a, outline.b);

  std::vector<std::uint8_t> lab(n * n, kLabelBackground);
  for (std::size_t iy = 0; iy < n; ++iy)
    for (std::size_t ix = 0; ix < n; ++ix) {
      double r2 = outline.rho2(static_cast<double>(ix), static_cast<double>(iy));
      if (r2 > 1.0) continue;
      lab[iy * n + ix] = std::sqrt(r2) >= rho_skin ? kLabelSkin : kLabelAdipose;
    }

  std::size_t nblob = rng.uniform_int(cfg.blob_min, cfg.blob_max);
  for (std::size_t bi = 0; bi < nblob; ++bi) {
    double px, py;
    sample_interior_point(rng, outline, 0.8, px, py);
    Ellipse blob = sample_ellipse(rng, px, py, 0.02 * nd, 0.09 * nd);
    long lo_x = std::max(0L, static_cast<long>(std::floor(px - 0.09 * nd - 1)));
    long hi_x = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(px + 0.09 * nd + 1)));
    long lo_y = std::max(0L, static_cast<long>(std::floor(py - 0.09 * nd - 1)));
    long hi_y = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(py + 0.09 * nd + 1)));
    for (long iy = lo_y; iy <= hi_y; ++iy)
      for (long ix = lo_x; ix <= hi_x; ++ix) {
        std::size_t q = static_cast<std::size_t>(iy) * n + static_cast<std::size_t>(ix);
        if (lab[q] != kLabelAdipose) continue;
        if (blob.rho2(static_cast<double>(ix), static_cast<double>(iy)) <= 1.0)
          lab[q] = kLabelFibro;
      }
  }

  std::size_t nmic = rng.uniform_int(cfg.micro_min, cfg.micro_max);
  for (std::size_t mi = 0; mi < nmic; ++mi) {
    double px, py;
    sample_interior_point(rng, outline, 0.8, px, py);
    double rad = rng.uniform(0.5, 1.5);
    long lo_x = std::max(0L, static_cast<long>(std::floor(px - rad)));
    long hi_x = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(px + rad)));
    long lo_y = std::max(0L, static_cast<long>(std::floor(py - rad)));
    long hi_y = std::min(static_cast<long>(n) - 1, static_cast<long>(std::ceil(py + rad)));
    for (long iy = lo_y; iy <= hi_y; ++iy)
      for (long ix = lo_x; ix <= hi_x; ++ix) {
        double dx = static_cast<double>(ix) - px, dy = static_cast<double>(iy) - py;
        if (dx * dx + dy * dy > rad * rad) continue;
        std::size_t q = static_cast<std::size_t>(iy) * n + static_cast<std::size_t>(ix);
        if (lab[q] == kLabelAdipose || lab[q] == kLabelFibro) lab[q] = kLabelMicro;
      }
  }
  return lab;
}

Tensor generate_phantom(const PhantomConfig& cfg, std::uint64_t index) {
  std::vector<std::uint8_t> lab = generate_phantom_labels(cfg, index);
  const std::size_t n = cfg.size;
  double lut[5] = {0.0, cfg.att_adipose, cfg.att_skin, cfg.att_fibro, cfg.att_micro};
  std::vector<double> img(n * n);
  for (std::size_t q = 0; q < n * n; ++q) img[q] = lut[lab[q]];

  if (cfg.sigma > 0.0) {
    long rad = static_cast<long>(std::ceil(3.0 * cfg.sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * rad + 1));
    double ksum = 0.0;
    for (long t = -rad; t <= rad; ++t) {
      double v = std::exp(-0.5 * static_cast<double>(t * t) / (cfg.sigma * cfg.sigma));
      k[static_cast<std::size_t>(t + rad)] = v;
      ksum += v;
    }
    for (double& v : k) v /= ksum;

    std::vector<double> tmp(n * n, 0.0);
    for (std::size_t iy = 0; iy < n; ++iy)
      for (std::size_t ix = 0; ix < n; ++ix) {
        double acc = 0.0;
        for (long t = -rad; t <= rad; ++t) {
          long jx = static_cast<long>(ix) + t;
          if (static_cast<std::size_t>(jx) < n)
            acc += k[static_cast<std::size_t>(t + rad)] * img[iy * n + static_cast<std::size_t>(jx)];
        }
        tmp[iy * n + ix] = acc;
      }
    for (std::size_t iy = 0; iy < n; ++iy)
      for (std::size_t ix = 0; ix < n; ++ix) {
        double acc = 0.0;
        for (long t = -rad; t <= rad; ++t) {
          long jy = static_cast<long>(iy) + t;
          if (static_cast<std::size_t>(jy) < n)
            acc += k[static_cast<std::size_t>(t + rad)] * tmp[static_cast<std::size_t>(jy) * n + ix];
        }
        img[iy * n + ix] = acc;
      }
  }
  return Tensor::from_f64({n, n}, std::move(img));
}

Tensor siddon_project(const Tensor& x, const OperatorParams& p) {
  p.validate();
  const std::size_t nx = p.image.nx, ny = p.image.ny;
  if (x.ndim() != 2 || x.dim(0) != ny || x.dim(1) != nx)
    throw std::invalid_argument("phantom: image dims do not match the grid");
  std::vector<double> img = x.to_f64_vector();
  const std::size_t nang = p.n_angle(), ndet = p.n_detector;
  std::vector<double> sino(nang * ndet, 0.0);
  const double dd = p.d_detector();
  const double hx = 0.5 * static_cast<double>(nx), hy = 0.5 * static_cast<double>(ny);
  constexpr double kInf = std::numeric_limits<double>::infinity();

  for (std::size_t j = 0; j < nang; ++j) {
    for (std::size_t i = 0; i < ndet; ++i) {
      double t = detector_offset(i, ndet, p.s_detector);
      RayEndpoints ep = fan_ray(p.d_source, dd, t, p.angles[j]);
      double su = ep.source.x + hx, sv = ep.source.y + hy;  // boundary-plane units
      double du = ep.detector.x + hx - su, dv = ep.detector.y + hy - sv;
      double len = std::sqrt(du * du + dv * dv);

      double amin = 0.0, amax = 1.0;
      if (du != 0.0) {
        double a0 = (0.0 - su) / du, a1 = (static_cast<double>(nx) - su) / du;
        amin = std::max(amin, std::min(a0, a1));
        amax = std::min(amax, std::max(a0, a1));
      } else if (su <= 0.0 || su >= static_cast<double>(nx)) {
        continue;
      }
      if (dv != 0.0) {
        double a0 = (0.0 - sv) / dv, a1 = (static_cast<double>(ny) - sv) / dv;
        amin = std::max(amin, std::min(a0, a1));
        amax = std::min(amax, std::max(a0, a1));
      } else if (sv <= 0.0 || sv >= static_cast<double>(ny)) {
        continue;
      }
      if (amin >= amax) continue;

      auto first_crossing = [](double s, double d, double a, double& anext, double& astep) {
        if (d > 0.0) {
          double k = std::floor(s + a * d) + 1.0;
          anext = (k - s) / d;
          astep = 1.0 / d;
        } else if (d < 0.0) {
          double k = std::ceil(s + a * d) - 1.0;
          anext = (k - s) / d;
          astep = -1.0 / d;
        } else {
          anext = kInf;
          astep = kInf;
        }
      };
      double ax, dax, ay, day;
      first_crossing(su, du, amin, ax, dax);
      first_crossing(sv, dv, amin, ay, day);

      double acc = 0.0;
      double a = amin;
      for (;;) {
        double an = std::min(std::min(ax, ay), amax);
        if (an > a) {
          double mid = 0.5 * (a + an);
          long px = static_cast<long>(std::floor(su + mid * du));
          long py = static_cast<long>(std::floor(sv + mid * dv));
          if (static_cast<std::size_t>(px) < nx && static_cast<std::size_t>(py) < ny)
            acc += (an - a) * len * img[static_cast<std::size_t>(py) * nx + static_cast<std::size_t>(px)];
        }
        if (an >= amax) break;
        if (ax <= ay)
          ax += dax;
        else
          ay += day;
        a = an;
      }
      sino[j * ndet + i] = p.s_fwd * acc;
    }
  }
  if (x.dtype() == Dtype::f64) return Tensor::from_f64({nang, ndet}, std::move(sino));
  std::vector<float> out(sino.size());
  for (std::size_t q = 0; q < sino.size(); ++q) out[q] = static_cast<float>(sino[q]);
  return Tensor::from_f32({nang, ndet}, std::move(out));
}

DatasetManifest simulate_dataset(const PhantomConfig& pcfg, const SimConfig& scfg,
                                 const std::filesystem::path& out_dir) {
  pcfg.validate();
  scfg.validate();
  if (scfg.geometry.image.nx != pcfg.size || scfg.geometry.image.ny != pcfg.size)
    throw std::invalid_argument("sim: geometry image grid does not match the phantom size");

  std::filesystem::create_directories(out_dir / "phantoms");
  std::filesystem::create_directories(out_dir / "sinograms");
  if (scfg.write_fbp) std::filesystem::create_directories(out_dir / "fbp");

  OperatorParams prod = OperatorParams::from_geometry(scfg.geometry, scfg.s_fwd, scfg.step);
  OperatorParams fine = prod;
  fine.step = scfg.fine_step;

  std::size_t n_train = static_cast<std::size_t>(
      std::llround(scfg.train_frac * static_cast<double>(scfg.count)));
  std::size_t n_val =
      static_cast<std::size_t>(std::llround(scfg.val_frac * static_cast<double>(scfg.count)));
  if (n_train + n_val > scfg.count) n_val = scfg.count - n_train;

  DatasetManifest m;
  m.seed = scfg.seed;
  SimTruth truth;
  truth.geometry = scfg.geometry;
  truth.s_fwd = scfg.s_fwd;
  truth.step = scfg.step;
  truth.quadrature = scfg.quadrature == Quadrature::matched      ? "matched"
                     : scfg.quadrature == Quadrature::fine_step ? "fine_step"
                                                                : "exact_siddon";
  truth.fine_step = scfg.fine_step;
  truth.noise_std = scfg.noise_std;
  m.sim = truth;
  m.root = out_dir;

  PhantomConfig pc = pcfg;
  pc.seed = scfg.seed;

  for (std::size_t idx = 0; idx < scfg.count; ++idx) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "rec_%05zu", idx);
    ManifestRecord rec;
    rec.id = idbuf;
    rec.split = idx < n_train ? "train" : (idx < n_train + n_val ? "val" : "test");

    Tensor x_store = generate_phantom(pc, idx).to(scfg.dtype);
    Tensor sino;
    switch (scfg.quadrature) {
      case Quadrature::matched: sino = forward_project(x_store, prod); break;
      case Quadrature::fine_step: sino = forward_project(x_store, fine); break;
      case Quadrature::exact_siddon: sino = siddon_project(x_store, prod); break;
    }
    Tensor sino_store = std::move(sino);
    if (scfg.noise_std > 0.0) {
      Tensor noisy = sino_store.to(Dtype::f64);
      Rng nrng(Rng::mix(Rng::mix(scfg.seed, idx), 0x6e6f697365ull));
      auto s = noisy.as<double>();
      for (auto& v : s) v += scfg.noise_std * nrng.normal();
      sino_store = noisy.to(scfg.dtype);
    }
    rec.phantom = std::string("phantoms/") + idbuf + ".ctt";
    rec.sinogram = std::string("sinograms/") + idbuf + ".ctt";
    write_tensor(out_dir / rec.phantom, x_store);
    write_tensor(out_dir / rec.sinogram, sino_store);
    if (scfg.write_fbp) {
      Tensor rec_fbp = fbp(sino_store, prod, FbpParams{});
      rec.fbp = std::string("fbp/") + idbuf + ".ctt";
      write_tensor(out_dir / rec.fbp, rec_fbp);
    }
    m.records.push_back(std::move(rec));
  }

  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace fanct
