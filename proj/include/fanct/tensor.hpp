#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace fanct {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

/// Dense n-dimensional array, row-major, single owned buffer.
/// Images are stored as {ny, nx} (row index = y), sinograms as {n_angle, n_detector}.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> dims, Dtype dt);
  static Tensor from_f32(std::vector<std::size_t> dims, std::vector<float> data);
  static Tensor from_f64(std::vector<std::size_t> dims, std::vector<double> data);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t ndim() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  Dtype dtype() const { return dtype_; }
  std::size_t size() const;
  bool empty() const { return dims_.empty(); }

  template <typename T>
  std::span<T> as();
  template <typename T>
  std::span<const T> as() const;

  /// Copy with a different element type (f32 <-> f64).
  Tensor to(Dtype dt) const;

  /// Element access through the common double type (slow path, not for kernels).
  double at(std::size_t i) const;
  void set(std::size_t i, double v);

  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }
  /// Bitwise equality of dtype, dims and payload.
  bool same_bits(const Tensor& o) const;

  /// Whole buffer as doubles regardless of dtype (copying for f32).
  std::vector<double> to_f64_vector() const;

private:
  std::vector<std::size_t> dims_;
  Dtype dtype_ = Dtype::f32;
  std::variant<std::vector<float>, std::vector<double>> data_;

  static std::size_t checked_element_count(const std::vector<std::size_t>& dims);
};

template <typename T>
std::span<T> Tensor::as() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  auto* p = std::get_if<std::vector<T>>(&data_);
  if (!p) throw std::logic_error("tensor: dtype mismatch in as<>()");
  return std::span<T>(p->data(), p->size());
}

template <typename T>
std::span<const T> Tensor::as() const {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  const auto* p = std::get_if<std::vector<T>>(&data_);
  if (!p) throw std::logic_error("tensor: dtype mismatch in as<>()");
  return std::span<const T>(p->data(), p->size());
}

}  // namespace fanct
