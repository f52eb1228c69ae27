#pragma once

#include <vector>

#include "mixlab/matrix.hpp"

namespace mixlab {

// Singular values in descending order, computed by one-sided Jacobi
// orthogonalization sweeps. Sized for matrices up to a few hundred rows;
// throws std::runtime_error if the sweeps do not converge within the budget
// rather than returning silently wrong values.
std::vector<double> singular_values(const Matrix& a, int max_sweeps = 60);

// Number of singular values above rel_tol * sigma_max. The zero matrix has
// rank 0.
int numerical_rank(const Matrix& a, double rel_tol = 1e-8);

double nuclear_norm(const Matrix& a);

}  // namespace mixlab
