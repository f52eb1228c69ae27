#include "mixlab/matrix.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mixlab {

namespace {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c)
            throw std::invalid_argument("Matrix::from_rows: ragged initializer");
        std::size_t j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

double& Matrix::at(std::size_t i, std::size_t j) {
    if (i >= rows_ || j >= cols_)
        throw std::out_of_range("Matrix::at: (" + std::to_string(i) + "," + std::to_string(j) +
                                ") outside " + std::to_string(rows_) + "x" + std::to_string(cols_));
    return data_[i * cols_ + j];
}

double Matrix::at(std::size_t i, std::size_t j) const {
    return const_cast<Matrix*>(this)->at(i, j);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) shape_error("matmul", a, b);
    Matrix c(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.data() + i * m;
        const double* ai = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("add", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("sub", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("hadamard", a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
    return c;
}

Matrix scale(const Matrix& a, double c) {
    Matrix r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.data()[i] *= c;
    return r;
}

Matrix map(const Matrix& a, double (*f)(double)) {
    Matrix r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.data()[i] = f(r.data()[i]);
    return r;
}

Matrix softmax_rows(const Matrix& a) {
    if (a.cols() == 0) throw std::invalid_argument("softmax_rows: empty rows");
    Matrix r(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            r(i, j) = std::exp(a(i, j) - mx);
            sum += r(i, j);
        }
        for (std::size_t j = 0; j < a.cols(); ++j) r(i, j) /= sum;
    }
    return r;
}

Matrix reverse_rows(const Matrix& a) {
    Matrix r(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) r(i, j) = a(a.rows() - 1 - i, j);
    return r;
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data()[i]));
    return m;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * a.data()[i];
    return std::sqrt(s);
}

double mean_squared_error(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) shape_error("mean_squared_error", a, b);
    if (a.size() == 0) throw std::invalid_argument("mean_squared_error: empty matrices");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

bool all_finite(const Matrix& a) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(a.data()[i])) return false;
    return true;
}

Matrix flatten_row(const Matrix& a) {
    Matrix r(1, a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r.data()[i] = a.data()[i];
    return r;
}

Matrix unflatten_row(const Matrix& row, std::size_t rows, std::size_t cols) {
    if (row.rows() != 1 || row.size() != rows * cols)
        throw std::invalid_argument("unflatten_row: size " + std::to_string(row.size()) +
                                    " cannot fill " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = row.data()[i];
    return m;
}

}  // namespace mixlab
