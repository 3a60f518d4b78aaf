#pragma once

#include "fanct/tensor.hpp"

namespace fanct {

/// Elementwise arithmetic in the operands' dtype; mixed dtypes are rejected.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
/// y += alpha * x, in place.
void axpy(double alpha, const Tensor& x, Tensor& y);

/// Inner product and squared norm, always accumulated in f64.
double dot(const Tensor& a, const Tensor& b);
double norm2_sq(const Tensor& a);

}  // namespace fanct
