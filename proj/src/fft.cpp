#include "mixlab/fft.hpp"

#include <numbers>
#include <stdexcept>

namespace mixlab {

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw std::invalid_argument("fft_pow2: length " + std::to_string(n) +
                                    " is not a power of two");
    // bit-reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) *
                           (inverse ? 1.0 : -1.0);
        const std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

std::vector<double> fft_autocorrelation(const std::vector<double>& q,
                                        const std::vector<double>& k) {
    if (q.size() != k.size())
        throw std::invalid_argument("fft_autocorrelation: length mismatch " +
                                    std::to_string(q.size()) + " vs " + std::to_string(k.size()));
    const std::size_t L = q.size();
    if (L == 0) throw std::invalid_argument("fft_autocorrelation: empty input");
    const std::size_t n = next_pow2(2 * L);
    std::vector<std::complex<double>> fq(n), fk(n);
    for (std::size_t i = 0; i < L; ++i) {
        fq[i] = q[i];
        fk[i] = k[i];
    }
    fft_pow2(fq, false);
    fft_pow2(fk, false);
    for (std::size_t i = 0; i < n; ++i) fq[i] *= std::conj(fk[i]);
    fft_pow2(fq, true);
    std::vector<double> out(L);
    for (std::size_t tau = 0; tau < L; ++tau) out[tau] = fq[tau].real();
    return out;
}

}  // namespace mixlab
