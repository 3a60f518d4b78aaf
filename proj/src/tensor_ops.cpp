#include "fanct/tensor_ops.hpp"

#include <stdexcept>

namespace fanct {

namespace {
void check_pair(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b) || a.dtype() != b.dtype())
    throw std::invalid_argument("tensor ops: shape or dtype mismatch");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_pair(a, b);
  Tensor out = a;
  if (a.dtype() == Dtype::f32) {
    auto o = out.as<float>();
    auto bb = b.as<float>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bb[i];
  } else {
    auto o = out.as<double>();
    auto bb = b.as<double>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bb[i];
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_pair(a, b);
  Tensor out = a;
  if (a.dtype() == Dtype::f32) {
    auto o = out.as<float>();
    auto bb = b.as<float>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bb[i];
  } else {
    auto o = out.as<double>();
    auto bb = b.as<double>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bb[i];
  }
  return out;
}

Tensor scaled(const Tensor& a, double s) {
  Tensor out = a;
  if (a.dtype() == Dtype::f32) {
    auto o = out.as<float>();
    float f = static_cast<float>(s);
    for (auto& v : o) v *= f;
  } else {
    auto o = out.as<double>();
    for (auto& v : o) v *= s;
  }
  return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  check_pair(x, y);
  if (x.dtype() == Dtype::f32) {
    auto xx = x.as<float>();
    auto yy = y.as<float>();
    float a = static_cast<float>(alpha);
    for (std::size_t i = 0; i < xx.size(); ++i) yy[i] += a * xx[i];
  } else {
    auto xx = x.as<double>();
    auto yy = y.as<double>();
    for (std::size_t i = 0; i < xx.size(); ++i) yy[i] += alpha * xx[i];
  }
}

double dot(const Tensor& a, const Tensor& b) {
  check_pair(a, b);
  double acc = 0.0;
  if (a.dtype() == Dtype::f32) {
    auto aa = a.as<float>();
    auto bb = b.as<float>();
    for (std::size_t i = 0; i < aa.size(); ++i)
      acc += static_cast<double>(aa[i]) * static_cast<double>(bb[i]);
  } else {
    auto aa = a.as<double>();
    auto bb = b.as<double>();
    for (std::size_t i = 0; i < aa.size(); ++i) acc += aa[i] * bb[i];
  }
  return acc;
}

double norm2_sq(const Tensor& a) { return dot(a, a); }

}  // namespace fanct
