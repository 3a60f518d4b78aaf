#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace fanct {

/// Adam state for one parameter group. Step math is done in f64 regardless of
/// how the parameters themselves are stored.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  Adam() = default;
  explicit Adam(double lr_, std::size_t n = 0) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

  void reset(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    t = 0;
  }

  /// One update of `params` in place given `grad`. Sizes must agree with the
  /// state (lazily initialized on first use).
  template <typename T, typename G>
  void step(T* params, const G* grad, std::size_t n) {
    if (m.empty()) reset(n);
    if (m.size() != n) throw std::logic_error("adam: size changed between steps");
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < n; ++i) {
      double g = static_cast<double>(grad[i]);
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      double mh = m[i] / c1;
      double vh = v[i] / c2;
      params[i] = static_cast<T>(static_cast<double>(params[i]) -
                                 lr * mh / (std::sqrt(vh) + eps));
    }
  }

  void step_scalar(double& param, double grad) { step(&param, &grad, 1); }
};

}  // namespace fanct
