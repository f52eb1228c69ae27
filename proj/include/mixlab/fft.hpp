#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace mixlab {

// In-place radix-2 FFT. The length must be a power of two; callers zero-pad.
void fft_pow2(std::vector<std::complex<double>>& a, bool inverse);

std::size_t next_pow2(std::size_t n);

// Lagged cross-correlation of two equal-length series via FFT:
//   out[tau] = sum_t q[t + tau] * k[t]   for tau = 0 .. L-1.
// Inputs are zero-padded to the next power of two >= 2L so circular wraparound
// never contaminates the linear lags.
std::vector<double> fft_autocorrelation(const std::vector<double>& q,
                                        const std::vector<double>& k);

}  // namespace mixlab
