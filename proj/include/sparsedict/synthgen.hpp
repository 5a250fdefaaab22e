#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/SparseCore>

#include "sparsedict/types.hpp"

namespace sparsedict::synth {

using SparseCodes = Eigen::SparseMatrix<float, Eigen::RowMajor>;

struct SyntheticConfig {
  Index n_gt = 512;
  Index d = 256;
  Index n_samples = 10000;
  double avg_active = 5.0;
  double coeff_scale = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Matrix truth;  // n_gt x d, unit rows
  Matrix data;   // n_samples x d
  SparseCodes codes;  // n_samples x n_gt, the true coefficients
};

// Each feature is active independently with probability avg_active / n_gt;
// active coefficients are Exponential with mean coeff_scale; isotropic
// Gaussian noise of standard deviation noise_sigma is added.
SyntheticData generate(const SyntheticConfig& config);

struct RecoveryReport {
  double mmcs = 0.0;
  std::vector<double> per_feature_max_cos;
  std::vector<Index> matched_index;
};

// Mean over truth rows of the best cosine against any learned row.
// Zero learned rows score cosine 0; ties go to the lowest learned index.
RecoveryReport mmcs(const Matrix& learned, const Matrix& truth);

}  // namespace sparsedict::synth
