#include "fanct/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace fanct {

std::size_t Tensor::checked_element_count(const std::vector<std::size_t>& dims) {
  if (dims.empty()) throw std::invalid_argument("tensor: dims must be non-empty");
  std::size_t n = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw std::invalid_argument("tensor: dims must be positive");
    if (n > std::numeric_limits<std::size_t>::max() / d)
      throw std::invalid_argument("tensor: dims overflow");
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(std::vector<std::size_t> dims, Dtype dt) {
  std::size_t n = checked_element_count(dims);
  Tensor t;
  t.dims_ = std::move(dims);
  t.dtype_ = dt;
  if (dt == Dtype::f32)
    t.data_ = std::vector<float>(n, 0.0f);
  else
    t.data_ = std::vector<double>(n, 0.0);
  return t;
}

Tensor Tensor::from_f32(std::vector<std::size_t> dims, std::vector<float> data) {
  std::size_t n = checked_element_count(dims);
  if (n != data.size()) throw std::invalid_argument("tensor: data size does not match dims");
  Tensor t;
  t.dims_ = std::move(dims);
  t.dtype_ = Dtype::f32;
  t.data_ = std::move(data);
  return t;
}

Tensor Tensor::from_f64(std::vector<std::size_t> dims, std::vector<double> data) {
  std::size_t n = checked_element_count(dims);
  if (n != data.size()) throw std::invalid_argument("tensor: data size does not match dims");
  Tensor t;
  t.dims_ = std::move(dims);
  t.dtype_ = Dtype::f64;
  t.data_ = std::move(data);
  return t;
}

std::size_t Tensor::size() const {
  if (dims_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : dims_) n *= d;
  return n;
}

Tensor Tensor::to(Dtype dt) const {
  if (dt == dtype_) return *this;
  if (dtype_ == Dtype::f32) {
    auto src = as<float>();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<double>(src[i]);
    return from_f64(dims_, std::move(out));
  }
  auto src = as<double>();
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<float>(src[i]);
  return from_f32(dims_, std::move(out));
}

double Tensor::at(std::size_t i) const {
  if (dtype_ == Dtype::f32) return static_cast<double>(as<float>()[i]);
  return as<double>()[i];
}

void Tensor::set(std::size_t i, double v) {
  if (dtype_ == Dtype::f32)
    as<float>()[i] = static_cast<float>(v);
  else
    as<double>()[i] = v;
}

bool Tensor::all_finite() const {
  if (dtype_ == Dtype::f32) {
    for (float v : as<float>())
      if (!std::isfinite(v)) return false;
  } else {
    for (double v : as<double>())
      if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::same_bits(const Tensor& o) const {
  if (dtype_ != o.dtype_ || dims_ != o.dims_) return false;
  if (dtype_ == Dtype::f32) {
    auto a = as<float>(), b = o.as<float>();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
  }
  auto a = as<double>(), b = o.as<double>();
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<double> Tensor::to_f64_vector() const {
  if (dtype_ == Dtype::f64) {
    auto s = as<double>();
    return std::vector<double>(s.begin(), s.end());
  }
  auto s = as<float>();
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<double>(s[i]);
  return out;
}

}  // namespace fanct
