#include "fanct/solvers.hpp"

#include <cmath>
#include <stdexcept>

#include "fanct/rng.hpp"
#include "fanct/tensor_ops.hpp"

namespace fanct {

OperatorBundle OperatorBundle::from_calibration(const CalibrationResult& r) {
  OperatorBundle b;
  b.params = r.params;
  b.s_fbp = r.s_fbp;
  b.bias = r.bias;
  b.params.validate();
  if (!b.bias.empty() &&
      (b.bias.ndim() != 2 || b.bias.dim(0) != b.params.n_angle() ||
       b.bias.dim(1) != b.params.n_detector))
    throw std::invalid_argument("solvers: bias map shape mismatch");
  return b;
}

OperatorBundle OperatorBundle::from_truth(const SimTruth& t) {
  OperatorBundle b;
  b.params = OperatorParams::from_geometry(t.geometry, t.s_fwd, t.step);
  b.params.validate();
  return b;
}

FbpParams OperatorBundle::fbp_params() const {
  FbpParams fp;
  fp.s_fbp = s_fbp;
  fp.hamming = hamming;
  return fp;
}

Tensor OperatorBundle::forward(const Tensor& x) const {
  Tensor ax = forward_project(x, params);
  if (bias.empty()) return ax;
  return sub(ax, bias.to(ax.dtype()));
}

Tensor OperatorBundle::forward_linear(const Tensor& x) const {
  return forward_project(x, params);
}

Tensor OperatorBundle::adjoint(const Tensor& y) const {
  return unfiltered_backproject(y, params);
}

Tensor OperatorBundle::apply_fbp(const Tensor& y) const { return fbp(y, params, fbp_params()); }

Tensor OperatorBundle::apply_fbp_transpose(const Tensor& x) const {
  return fbp_transpose(x, params, fbp_params());
}

double OperatorBundle::norm_forward(std::size_t iters) const {
  if (!norm_a_) norm_a_ = operator_norm_estimate(*this, NormWhich::forward, iters);
  return *norm_a_;
}

double OperatorBundle::norm_fbp_forward(std::size_t iters) const {
  if (!norm_fbpa_) norm_fbpa_ = operator_norm_estimate(*this, NormWhich::fbp_forward, iters);
  return *norm_fbpa_;
}

void UnrolledModel::validate() const {
  if (blocks.size() != lambdas.size())
    throw std::invalid_argument("solvers: blocks/lambdas length mismatch");
  for (double l : lambdas)
    if (!std::isfinite(l)) throw std::invalid_argument("solvers: non-finite lambda");
}

Tensor dc_step(const Tensor& x, const Tensor& y, double lambda, const OperatorBundle& ops) {
  if (!std::isfinite(lambda)) throw std::invalid_argument("solvers: non-finite lambda");
  Tensor res = sub(ops.forward(x), y);
  Tensor corr = ops.apply_fbp(res);
  Tensor out = x;
  axpy(-lambda, corr, out);
  return out;
}

Tensor unrolled_reconstruct(const Tensor& y, const UnrolledModel& model,
                            const OperatorBundle& ops) {
  model.validate();
  Tensor x = ops.apply_fbp(y);
  Tensor mem;
  if (model.c_mem > 0)
    mem = Tensor::zeros({model.c_mem, x.dim(0), x.dim(1)}, x.dtype());
  for (std::size_t k = 0; k < model.k(); ++k) {
    auto [xe, mem2] = model.blocks[k](x, mem);
    mem = std::move(mem2);
    x = dc_step(xe, y, model.lambdas[k], ops);
  }
  return x;
}

Tensor landweber_fbp(const Tensor& y, double lambda, std::size_t iters,
                     const OperatorBundle& ops) {
  Tensor x = ops.apply_fbp(y);
  for (std::size_t t = 0; t < iters; ++t) x = dc_step(x, y, lambda, ops);
  return x;
}

double tv_value(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("solvers: tv_value expects a 2-d image");
  const std::size_t ny = x.dim(0), nx = x.dim(1);
  std::vector<double> img = x.to_f64_vector();
  double tv = 0.0;
  for (std::size_t iy = 0; iy < ny; ++iy)
    for (std::size_t ix = 0; ix < nx; ++ix) {
      double v = img[iy * nx + ix];
      if (ix + 1 < nx) tv += std::abs(img[iy * nx + ix + 1] - v);
      if (iy + 1 < ny) tv += std::abs(img[(iy + 1) * nx + ix] - v);
    }
  return tv;
}

TvResult tv_reconstruct(const Tensor& y, double alpha, std::size_t iters,
                        const OperatorBundle& ops, const TvOptions& opt) {
  if (alpha < 0.0) throw std::invalid_argument("solvers: alpha must be >= 0");
  const std::size_t nx = ops.params.image.nx, ny = ops.params.image.ny;
  const std::size_t npix = nx * ny;

  double norm_a = ops.norm_forward();
  double base = 1.0 / std::sqrt(norm_a * norm_a + 8.0);
  // tau * sigma * (||A||^2 + 8) = 1 holds for any split; skewing the split
  // toward the primal (pixel-scale steps, heavily damped dual) converges far
  // faster than the balanced choice because ||A|| >> 1 for CT operators.
  double ratio = opt.step_ratio > 0.0 ? opt.step_ratio : std::max(1.0, norm_a);
  const double tau = base * ratio, sigma = base / ratio;

  std::vector<double> meas = y.to_f64_vector();
  std::vector<double> x = ops.apply_fbp(y).to_f64_vector();
  std::vector<double> xbar = x;
  std::vector<double> p(meas.size(), 0.0);
  std::vector<double> qx(npix, 0.0), qy(npix, 0.0);
  std::vector<double> bias;
  if (!ops.bias.empty()) bias = ops.bias.to_f64_vector();

  auto pack_image = [&](const std::vector<double>& v) {
    return Tensor::from_f64({ny, nx}, v);
  };
  auto pack_sino = [&](const std::vector<double>& v) {
    return Tensor::from_f64({y.dim(0), y.dim(1)}, v);
  };

  TvResult out;
  for (std::size_t it = 0; it < iters; ++it) {
    // dual update for the data term
    std::vector<double> ax = ops.forward_linear(pack_image(xbar)).to_f64_vector();
    double res_norm2 = 0.0;
    for (std::size_t q = 0; q < p.size(); ++q) {
      double r = ax[q] - (bias.empty() ? 0.0 : bias[q]) - meas[q];
      res_norm2 += r * r;
      p[q] = (p[q] + sigma * r) / (1.0 + sigma);
    }
    if (opt.record_residual_every && it % opt.record_residual_every == 0)
      out.residual_history.push_back(std::sqrt(res_norm2));

    // dual update for the TV term (forward differences, Neumann boundary)
    for (std::size_t iy = 0; iy < ny; ++iy)
      for (std::size_t ix = 0; ix < nx; ++ix) {
        std::size_t q = iy * nx + ix;
        double gx = ix + 1 < nx ? xbar[q + 1] - xbar[q] : 0.0;
        double gy = iy + 1 < ny ? xbar[q + nx] - xbar[q] : 0.0;
        qx[q] = std::clamp(qx[q] + sigma * gx, -alpha, alpha);
        qy[q] = std::clamp(qy[q] + sigma * gy, -alpha, alpha);
      }

    // primal update: x -= tau * (A^T p + div^T q)
    std::vector<double> atp = ops.adjoint(pack_sino(p)).to_f64_vector();
    for (std::size_t iy = 0; iy < ny; ++iy)
      for (std::size_t ix = 0; ix < nx; ++ix) {
        std::size_t q = iy * nx + ix;
        double div = 0.0;
        if (ix + 1 < nx) div -= qx[q];
        if (ix > 0) div += qx[q - 1];
        if (iy + 1 < ny) div -= qy[q];
        if (iy > 0) div += qy[q - nx];
        double xn = x[q] - tau * (atp[q] + div);
        xbar[q] = 2.0 * xn - x[q];
        x[q] = xn;
      }

    if (opt.record_objective_every && (it + 1) % opt.record_objective_every == 0) {
      Tensor xi = pack_image(x);
      std::vector<double> axc = ops.forward_linear(xi).to_f64_vector();
      double data = 0.0;
      for (std::size_t q = 0; q < axc.size(); ++q) {
        double r = axc[q] - (bias.empty() ? 0.0 : bias[q]) - meas[q];
        data += r * r;
      }
      out.objective_history.push_back(0.5 * data + alpha * tv_value(xi));
    }
  }
  Tensor xi = pack_image(x);
  out.x = y.dtype() == Dtype::f64 ? std::move(xi) : xi.to(y.dtype());
  return out;
}

double operator_norm_estimate(const std::function<Tensor(const Tensor&)>& op,
                              const std::function<Tensor(const Tensor&)>& op_adjoint,
                              const std::vector<std::size_t>& input_dims, std::size_t iters,
                              std::uint64_t seed) {
  if (iters == 0) throw std::invalid_argument("solvers: norm estimate needs iters >= 1");
  Tensor v = Tensor::zeros(input_dims, Dtype::f64);
  {
    Rng rng(seed);
    auto s = v.as<double>();
    for (auto& e : s) e = rng.normal();
  }
  double nv = std::sqrt(norm2_sq(v));
  if (nv == 0.0) throw std::logic_error("solvers: degenerate start vector");
  double est = 0.0;
  for (std::size_t t = 0; t < iters; ++t) {
    Tensor vn = scaled(v, 1.0 / nv);
    Tensor w = op(vn);
    est = std::sqrt(norm2_sq(w));
    v = op_adjoint(w);
    nv = std::sqrt(norm2_sq(v));
    if (nv == 0.0) return 0.0;  // operator annihilated the iterate
  }
  return est;
}

double operator_norm_estimate(const OperatorBundle& ops, NormWhich which, std::size_t iters) {
  std::vector<std::size_t> dims{ops.params.image.ny, ops.params.image.nx};
  if (which == NormWhich::forward) {
    return operator_norm_estimate([&](const Tensor& x) { return ops.forward_linear(x); },
                                  [&](const Tensor& y) { return ops.adjoint(y); }, dims,
                                  iters);
  }
  return operator_norm_estimate(
      [&](const Tensor& x) { return ops.apply_fbp(ops.forward_linear(x)); },
      [&](const Tensor& y) { return ops.adjoint(ops.apply_fbp_transpose(y)); }, dims, iters);
}

}  // namespace fanct
