#include "mixlab/svd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mixlab {

std::vector<double> singular_values(const Matrix& a, int max_sweeps) {
    if (a.size() == 0) return {};
    // Work on the tall orientation so we orthogonalize the smaller column set.
    Matrix w = a.rows() >= a.cols() ? a : transpose(a);
    const std::size_t m = w.rows(), n = w.cols();
    // Column-major working copy for contiguous column access.
    std::vector<double> col(m * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) col[j * m + i] = w(i, j);

    const double tol = 1e-14;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* cp = col.data() + p * m;
                double* cq = col.data() + q * m;
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (std::fabs(gamma) <= tol * std::sqrt(alpha * beta) || gamma == 0.0)
                    continue;
                converged = false;
                // Jacobi rotation that zeroes the (p,q) inner product.
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = cp[i], vq = cq[i];
                    cp[i] = c * vp - s * vq;
                    cq[i] = s * vp + c * vq;
                }
            }
        }
    }
    if (!converged)
        throw std::runtime_error("singular_values: Jacobi sweeps did not converge within " +
                                 std::to_string(max_sweeps) + " sweeps");
    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += col[j * m + i] * col[j * m + i];
        sigma[j] = std::sqrt(s);
    }
    std::sort(sigma.begin(), sigma.end(), std::greater<double>());
    return sigma;
}

int numerical_rank(const Matrix& a, double rel_tol) {
    const std::vector<double> sigma = singular_values(a);
    if (sigma.empty() || sigma[0] == 0.0) return 0;
    const double cutoff = rel_tol * sigma[0];
    int rank = 0;
    for (double s : sigma)
        if (s > cutoff) ++rank;
    return rank;
}

double nuclear_norm(const Matrix& a) {
    double sum = 0.0;
    for (double s : singular_values(a)) sum += s;
    return sum;
}

}  // namespace mixlab
