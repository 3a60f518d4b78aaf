#pragma once

#include <filesystem>

#include "fanct/tensor.hpp"

namespace fanct {

/// Writes a 2-d tensor as an 8-bit grayscale PNG. Values are windowed from
/// [lo, hi] onto [0, 255]; anything outside the window clamps.
void write_png_gray(const std::filesystem::path& path, const Tensor& image, double lo = 0.0,
                    double hi = 1.0);

}  // namespace fanct
