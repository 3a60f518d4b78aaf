#pragma once

#include <filesystem>

#include "fanct/tensor.hpp"

namespace fanct {

/// Binary tensor container, extension ".ctt".
/// Layout: magic "CTT1", u8 dtype (0 = f32, 1 = f64), u8 ndim,
/// ndim x u64 little-endian dims, then raw little-endian element data.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace fanct
