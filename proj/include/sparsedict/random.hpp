#pragma once

#include <random>

#include "sparsedict/types.hpp"

namespace sparsedict {

using Rng = std::mt19937_64;

// Isotropic Gaussian rows scaled to unit L2 norm.
inline Matrix random_unit_rows(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    do {
      for (Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    } while (m.row(i).squaredNorm() == 0.0f);
    m.row(i).normalize();
  }
  return m;
}

// Rows with zero norm are left untouched.
template <typename Derived>
void normalize_rows(Eigen::MatrixBase<Derived>& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    auto norm = m.row(i).norm();
    if (norm > 0) m.row(i) /= norm;
  }
}

}  // namespace sparsedict
