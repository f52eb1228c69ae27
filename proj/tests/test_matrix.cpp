#include <doctest.h>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "mixlab/fft.hpp"
#include "mixlab/matrix.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/svd.hpp"

using namespace mixlab;

namespace {

// Independent oracle: row-reduction rank with partial pivoting.
int elimination_rank(Matrix a, double tol = 1e-9) {
    const std::size_t m = a.rows(), n = a.cols();
    int rank = 0;
    std::size_t row = 0;
    for (std::size_t col = 0; col < n && row < m; ++col) {
        std::size_t piv = row;
        for (std::size_t i = row + 1; i < m; ++i)
            if (std::fabs(a(i, col)) > std::fabs(a(piv, col))) piv = i;
        if (std::fabs(a(piv, col)) < tol) continue;
        for (std::size_t j = 0; j < n; ++j) std::swap(a(row, j), a(piv, j));
        for (std::size_t i = 0; i < m; ++i) {
            if (i == row) continue;
            const double f = a(i, col) / a(row, col);
            for (std::size_t j = 0; j < n; ++j) a(i, j) -= f * a(row, j);
        }
        ++row;
        ++rank;
    }
    return rank;
}

// Independent oracle: eigenvalues of the symmetric matrix A^T A via cyclic
// Jacobi rotations; singular values are their square roots.
std::vector<double> eig_singular_values(const Matrix& a) {
    Matrix s = matmul(transpose(a), a);
    const std::size_t n = s.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += s(p, q) * s(p, q);
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(s(p, q)) < 1e-30) continue;
                const double theta = (s(q, q) - s(p, p)) / (2.0 * s(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t), sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double skp = s(k, p), skq = s(k, q);
                    s(k, p) = c * skp - sn * skq;
                    s(k, q) = sn * skp + c * skq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double spk = s(p, k), sqk = s(q, k);
                    s(p, k) = c * spk - sn * sqk;
                    s(q, k) = sn * spk + c * sqk;
                }
            }
    }
    std::vector<double> sv(n);
    for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, s(i, i)));
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

// Independent oracle: direct O(L^2) lagged correlation.
std::vector<double> direct_corr(const std::vector<double>& q, const std::vector<double>& k) {
    const std::size_t L = q.size();
    std::vector<double> out(L, 0.0);
    for (std::size_t tau = 0; tau < L; ++tau)
        for (std::size_t t = 0; t + tau < L; ++t) out[tau] += q[t + tau] * k[t];
    return out;
}

}  // namespace

TEST_CASE("matmul hand-computed 2x2") {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
    const Matrix c = matmul(a, b);
    // [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]] = [[19,22],[43,50]]
    CHECK(c(0, 0) == 19.0);
    CHECK(c(0, 1) == 22.0);
    CHECK(c(1, 0) == 43.0);
    CHECK(c(1, 1) == 50.0);
}

TEST_CASE("matmul rejects mismatched shapes") {
    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
    CHECK_THROWS_AS(add(Matrix(2, 3), Matrix(3, 2)), std::invalid_argument);
    CHECK_THROWS_AS(hadamard(Matrix(2, 3), Matrix(2, 2)), std::invalid_argument);
}

TEST_CASE("matmul associativity on random 8x8") {
    RandomStream rs(11);
    const Matrix a = random_normal(8, 8, rs), b = random_normal(8, 8, rs),
                 c = random_normal(8, 8, rs);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    CHECK(max_abs(sub(left, right)) < 1e-9);
}

TEST_CASE("identity is a matmul unit") {
    RandomStream rs(12);
    const Matrix a = random_normal(5, 5, rs);
    CHECK(max_abs(sub(matmul(Matrix::identity(5), a), a)) == 0.0);
    CHECK(max_abs(sub(matmul(a, Matrix::identity(5)), a)) == 0.0);
}

TEST_CASE("softmax_rows on [0, ln 2] gives [1/3, 2/3]") {
    const Matrix m = softmax_rows(Matrix::from_rows({{0.0, std::log(2.0)}}));
    CHECK(m(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(m(0, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax_rows rows sum to 1 and survive large offsets") {
    RandomStream rs(13);
    Matrix x = random_normal(6, 9, rs);
    for (std::size_t j = 0; j < x.cols(); ++j) x(2, j) += 1e4;  // stress max-subtraction
    const Matrix m = softmax_rows(x);
    REQUIRE(all_finite(m));
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            s += m(i, j);
            CHECK(m(i, j) >= 0.0);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("shift invariance of softmax rows") {
    RandomStream rs(14);
    const Matrix x = random_normal(4, 7, rs);
    Matrix shifted = x;
    for (std::size_t j = 0; j < x.cols(); ++j) shifted(1, j) += 42.0;
    const Matrix a = softmax_rows(x), b = softmax_rows(shifted);
    for (std::size_t j = 0; j < x.cols(); ++j)
        CHECK(a(1, j) == doctest::Approx(b(1, j)).epsilon(1e-12));
}

TEST_CASE("mean_squared_error hand case") {
    // ((1-3)^2 + (2-2)^2)/2 = 2
    CHECK(mean_squared_error(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3, 2}})) == 2.0);
}

TEST_CASE("reverse_rows and flatten round-trip") {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    const Matrix r = reverse_rows(m);
    CHECK(r(0, 0) == 5.0);
    CHECK(r(2, 1) == 2.0);
    CHECK(max_abs(sub(reverse_rows(r), m)) == 0.0);
    const Matrix f = flatten_row(m);
    REQUIRE(f.rows() == 1);
    REQUIRE(f.cols() == 6);
    CHECK(max_abs(sub(unflatten_row(f, 3, 2), m)) == 0.0);
    CHECK_THROWS_AS(unflatten_row(f, 4, 2), std::invalid_argument);
}

// ---- FFT ----------------------------------------------------------------

TEST_CASE("fft round-trip recovers the input") {
    RandomStream rs(21);
    std::vector<std::complex<double>> a(16);
    std::vector<std::complex<double>> orig(16);
    for (auto i = 0u; i < a.size(); ++i) orig[i] = a[i] = {rs.normal(), rs.normal()};
    fft_pow2(a, false);
    fft_pow2(a, true);
    for (auto i = 0u; i < a.size(); ++i) CHECK(std::abs(a[i] - orig[i]) < 1e-12);
}

TEST_CASE("fft rejects non-power-of-two lengths") {
    std::vector<std::complex<double>> a(6);
    CHECK_THROWS_AS(fft_pow2(a, false), std::invalid_argument);
}

TEST_CASE("autocorrelation of constant-1 series of length 4 is [4,3,2,1]") {
    const std::vector<double> one(4, 1.0);
    const std::vector<double> c = fft_autocorrelation(one, one);
    REQUIRE(c.size() == 4);
    CHECK(c[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(c[1] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(c[2] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(c[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fft autocorrelation matches the direct O(L^2) oracle") {
    RandomStream rs(22);
    for (std::size_t L : {1u, 2u, 3u, 5u, 8u, 13u, 64u}) {
        std::vector<double> q(L), k(L);
        for (std::size_t i = 0; i < L; ++i) {
            q[i] = rs.normal();
            k[i] = rs.normal();
        }
        const auto fast = fft_autocorrelation(q, k);
        const auto slow = direct_corr(q, k);
        for (std::size_t tau = 0; tau < L; ++tau)
            CHECK(fast[tau] == doctest::Approx(slow[tau]).epsilon(1e-9));
    }
}

TEST_CASE("fft autocorrelation input validation") {
    CHECK_THROWS_AS(fft_autocorrelation({}, {}), std::invalid_argument);
    CHECK_THROWS_AS(fft_autocorrelation({1.0}, {1.0, 2.0}), std::invalid_argument);
}

// ---- singular values / rank --------------------------------------------

TEST_CASE("singular values of a diagonal matrix") {
    const auto sv = singular_values(Matrix::from_rows({{3, 0}, {0, -4}}));
    REQUIRE(sv.size() == 2);
    CHECK(sv[0] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(sv[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("singular values match the eigenvalue oracle") {
    RandomStream rs(31);
    for (std::size_t n : {2u, 5u, 16u, 33u}) {
        const Matrix a = random_normal(n, n, rs);
        const auto sv = singular_values(a);
        const auto oracle = eig_singular_values(a);
        REQUIRE(sv.size() == oracle.size());
        for (std::size_t i = 0; i < sv.size(); ++i)
            CHECK(sv[i] == doctest::Approx(oracle[i]).epsilon(1e-8));
    }
}

TEST_CASE("singular values of a rectangular matrix match the oracle") {
    RandomStream rs(32);
    const Matrix a = random_normal(12, 5, rs);
    const auto sv = singular_values(a);
    const auto oracle = eig_singular_values(a);
    REQUIRE(sv.size() == 5);
    for (std::size_t i = 0; i < sv.size(); ++i)
        CHECK(sv[i] == doctest::Approx(oracle[i]).epsilon(1e-8));
    // transpose has the same spectrum
    const auto svt = singular_values(transpose(a));
    for (std::size_t i = 0; i < sv.size(); ++i)
        CHECK(sv[i] == doctest::Approx(svt[i]).epsilon(1e-10));
}

TEST_CASE("numerical rank: zero, identity, outer product") {
    CHECK(numerical_rank(Matrix(7, 7)) == 0);
    CHECK(numerical_rank(Matrix::identity(9)) == 9);
    RandomStream rs(33);
    const Matrix u = random_normal(10, 1, rs), v = random_normal(10, 1, rs);
    CHECK(numerical_rank(matmul(u, transpose(v))) == 1);
}

TEST_CASE("numerical rank agrees with the elimination oracle on random low-rank products") {
    RandomStream rs(34);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 12;
        const std::size_t r = 1 + rep % 6;
        const Matrix a = random_normal(n, r, rs), b = random_normal(r, n, rs);
        const Matrix m = matmul(a, b);
        CHECK(numerical_rank(m) == static_cast<int>(r));
        CHECK(numerical_rank(m) == elimination_rank(m));
    }
}

TEST_CASE("pre-softmax attention scores have rank at most the head width") {
    RandomStream rs(35);
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix q = random_normal(16, 4, rs), k = random_normal(16, 4, rs);
        CHECK(numerical_rank(matmul(q, transpose(k))) <= 4);
    }
}

TEST_CASE("nuclear norm dominates the spectral norm and matches the oracle") {
    RandomStream rs(36);
    const Matrix a = random_normal(9, 9, rs);
    const auto sv = singular_values(a);
    const double nn = nuclear_norm(a);
    CHECK(nn >= sv[0]);
    double oracle = 0.0;
    for (double s : eig_singular_values(a)) oracle += s;
    CHECK(nn == doctest::Approx(oracle).epsilon(1e-8));
}
