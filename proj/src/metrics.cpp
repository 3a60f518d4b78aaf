#include "fanct/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace fanct {

namespace {

void check_match(const Tensor& x, const Tensor& xhat) {
  if (x.ndim() != 2 || xhat.ndim() != 2 || !x.same_shape(xhat))
    throw std::invalid_argument("metrics: inputs must be 2-D tensors of equal shape");
}

std::vector<double> diff_f64(const Tensor& x, const Tensor& xhat) {
  std::vector<double> a = x.to_f64_vector();
  std::vector<double> b = xhat.to_f64_vector();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
  return a;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double rmse(const Tensor& x, const Tensor& xhat) {
  check_match(x, xhat);
  std::vector<double> d = diff_f64(x, xhat);
  double acc = 0.0;
  for (double v : d) acc += v * v;
  return std::sqrt(acc / static_cast<double>(d.size()));
}

WcrmseResult wcrmse(const Tensor& x, const Tensor& xhat, std::size_t patch) {
  check_match(x, xhat);
  std::size_t h = x.dim(0), w = x.dim(1);
  if (patch == 0 || h < patch || w < patch)
    throw std::invalid_argument("metrics: image smaller than the patch size");
  std::vector<double> d = diff_f64(x, xhat);
  double denom = static_cast<double>(patch * patch);

  WcrmseResult best;
  best.value = -1.0;
  for (std::size_t r = 0; r + patch <= h; ++r) {
    for (std::size_t c = 0; c + patch <= w; ++c) {
      double acc = 0.0;
      for (std::size_t wy = 0; wy < patch; ++wy) {
        const double* row = d.data() + (r + wy) * w + c;
        for (std::size_t wx = 0; wx < patch; ++wx) acc += row[wx] * row[wx];
      }
      double val = std::sqrt(acc / denom);
      if (val > best.value) {
        best.value = val;
        best.row = r;
        best.col = c;
      }
    }
  }
  return best;
}

double psnr(const Tensor& x, const Tensor& xhat, double data_range) {
  check_match(x, xhat);
  if (!(data_range > 0.0)) throw std::invalid_argument("metrics: data_range must be positive");
  std::vector<double> d = diff_f64(x, xhat);
  double acc = 0.0;
  for (double v : d) acc += v * v;
  double mse = acc / static_cast<double>(d.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const Tensor& x, const Tensor& xhat, std::size_t window, double k1, double k2,
            double data_range) {
  check_match(x, xhat);
  std::size_t h = x.dim(0), w = x.dim(1);
  if (window == 0 || window % 2 == 0)
    throw std::invalid_argument("metrics: ssim window must be odd");
  if (h < window || w < window)
    throw std::invalid_argument("metrics: image smaller than the ssim window");

  std::vector<double> a = x.to_f64_vector();
  std::vector<double> b = xhat.to_f64_vector();

  const double sigma = 1.5;
  std::vector<double> kern(window * window);
  long half = static_cast<long>(window) / 2;
  double ksum = 0.0;
  for (long ky = -half; ky <= half; ++ky)
    for (long kx = -half; kx <= half; ++kx) {
      double v = std::exp(-0.5 * (static_cast<double>(ky * ky + kx * kx)) / (sigma * sigma));
      kern[static_cast<std::size_t>(ky + half) * window + static_cast<std::size_t>(kx + half)] = v;
      ksum += v;
    }
  for (double& v : kern) v /= ksum;

  double c1 = (k1 * data_range) * (k1 * data_range);
  double c2 = (k2 * data_range) * (k2 * data_range);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t cy = static_cast<std::size_t>(half); cy + half < h; ++cy) {
    for (std::size_t cx = static_cast<std::size_t>(half); cx + half < w; ++cx) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (long ky = -half; ky <= half; ++ky) {
        const double* ra = a.data() + (cy + ky) * w + (cx - half);
        const double* rb = b.data() + (cy + ky) * w + (cx - half);
        const double* kr = kern.data() + static_cast<std::size_t>(ky + half) * window;
        for (std::size_t kx = 0; kx < window; ++kx) {
          double kv = kr[kx];
          double va = ra[kx], vb = rb[kx];
          mx += kv * va;
          my += kv * vb;
          mxx += kv * va * va;
          myy += kv * vb * vb;
          mxy += kv * va * vb;
        }
      }
      double vx = mxx - mx * mx;
      double vy = myy - my * my;
      double cxy = mxy - mx * my;
      double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

EvalRow evaluate_pair(const std::string& id, const Tensor& truth, const Tensor& pred,
                      double data_range) {
  EvalRow row;
  row.id = id;
  row.rmse = rmse(truth, pred);
  WcrmseResult wc = wcrmse(truth, pred);
  row.wcrmse = wc.value;
  row.wc_row = wc.row;
  row.wc_col = wc.col;
  row.psnr = psnr(truth, pred, data_range);
  row.ssim = ssim(truth, pred, 7, 0.01, 0.03, data_range);
  return row;
}

EvalReport aggregate_report(std::vector<EvalRow> rows) {
  EvalReport rep;
  rep.rows = std::move(rows);
  if (rep.rows.empty()) return rep;
  std::vector<double> rs, ws;
  double worst_r = -1.0, worst_w = -1.0;
  for (const auto& r : rep.rows) {
    rs.push_back(r.rmse);
    ws.push_back(r.wcrmse);
    rep.mean_rmse += r.rmse;
    rep.mean_wcrmse += r.wcrmse;
    rep.mean_psnr += r.psnr;
    rep.mean_ssim += r.ssim;
    if (r.rmse > worst_r) {
      worst_r = r.rmse;
      rep.worst_rmse_id = r.id;
    }
    if (r.wcrmse > worst_w) {
      worst_w = r.wcrmse;
      rep.worst_wcrmse_id = r.id;
    }
  }
  double n = static_cast<double>(rep.rows.size());
  rep.mean_rmse /= n;
  rep.mean_wcrmse /= n;
  rep.mean_psnr /= n;
  rep.mean_ssim /= n;
  rep.median_rmse = median_of(rs);
  rep.median_wcrmse = median_of(ws);
  return rep;
}

namespace {
std::string fmt_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}
}  // namespace

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("metrics: cannot open " + path.string());
  f << "id,rmse,wcrmse,wc_row,wc_col,psnr,ssim\n";
  for (const auto& r : report.rows)
    f << r.id << ',' << fmt_metric(r.rmse) << ',' << fmt_metric(r.wcrmse) << ',' << r.wc_row
      << ',' << r.wc_col << ',' << fmt_metric(r.psnr) << ',' << fmt_metric(r.ssim) << '\n';
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::json j;
  j["count"] = report.rows.size();
  j["mean_rmse"] = report.mean_rmse;
  j["median_rmse"] = report.median_rmse;
  j["mean_wcrmse"] = report.mean_wcrmse;
  j["median_wcrmse"] = report.median_wcrmse;
  j["mean_psnr"] = std::isfinite(report.mean_psnr) ? nlohmann::json(report.mean_psnr)
                                                   : nlohmann::json("inf");
  j["mean_ssim"] = report.mean_ssim;
  j["worst_rmse_id"] = report.worst_rmse_id;
  j["worst_wcrmse_id"] = report.worst_wcrmse_id;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("metrics: cannot open " + path.string());
  f << j.dump(2) << '\n';
}

}  // namespace fanct
