#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fanct/tensor.hpp"

namespace fanct {

double rmse(const Tensor& x, const Tensor& xhat);

struct WcrmseResult {
  double value = 0.0;
  std::size_t row = 0;  // top-left corner of the worst window
  std::size_t col = 0;
};

/// Maximum RMSE over all stride-1 patch x patch windows fully inside the
/// image. Summation is plain row-major per window so the result is exactly
/// the brute-force double-loop value.
WcrmseResult wcrmse(const Tensor& x, const Tensor& xhat, std::size_t patch = 25);

/// 10 log10(range^2 / mse); +infinity for identical inputs.
double psnr(const Tensor& x, const Tensor& xhat, double data_range = 1.0);

/// Mean local SSIM with a Gaussian window (sigma = 1.5), valid-mode borders.
double ssim(const Tensor& x, const Tensor& xhat, std::size_t window = 7, double k1 = 0.01,
            double k2 = 0.03, double data_range = 1.0);

struct EvalRow {
  std::string id;
  double rmse = 0.0;
  double wcrmse = 0.0;
  std::size_t wc_row = 0;
  std::size_t wc_col = 0;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_rmse = 0.0, median_rmse = 0.0;
  double mean_wcrmse = 0.0, median_wcrmse = 0.0;
  double mean_psnr = 0.0, mean_ssim = 0.0;
  std::string worst_rmse_id, worst_wcrmse_id;
};

EvalRow evaluate_pair(const std::string& id, const Tensor& truth, const Tensor& pred,
                      double data_range = 1.0);
EvalReport aggregate_report(std::vector<EvalRow> rows);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace fanct
