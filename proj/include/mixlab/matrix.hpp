#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace mixlab {

struct Shape {
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool operator==(const Shape&) const = default;
};

// Dense row-major 2-D array of 64-bit floats. All numerics in the project run
// on this type; there is no float32 path.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    Shape shape() const { return {rows_, cols_}; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Shape mismatches throw std::invalid_argument naming the operation and both
// shapes; silent broadcasting is confined to the autodiff layer.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);
Matrix map(const Matrix& a, double (*f)(double));

// Row-wise softmax with max-subtraction; every row of the result sums to 1.
Matrix softmax_rows(const Matrix& a);

// Reverses the row order (sequence reversal for bidirectional composition).
Matrix reverse_rows(const Matrix& a);

double max_abs(const Matrix& a);
double frobenius_norm(const Matrix& a);
double mean_squared_error(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);

// Flatten to a single row (row-major order) and back.
Matrix flatten_row(const Matrix& a);
Matrix unflatten_row(const Matrix& row, std::size_t rows, std::size_t cols);

}  // namespace mixlab
