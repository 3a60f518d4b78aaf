#pragma once

#include <complex>
#include <vector>

namespace fanct {

/// In-place iterative radix-2 FFT; a.size() must be a power of two.
/// The inverse transform includes the 1/n normalization.
void fft(std::vector<std::complex<double>>& a, bool inverse);

/// Smallest power of two >= n.
std::size_t next_pow2(std::size_t n);

}  // namespace fanct
