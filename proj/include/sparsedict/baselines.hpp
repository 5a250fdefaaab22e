#pragma once

#include <cstdint>
#include <optional>

#include "sparsedict/activation_store.hpp"
#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict::baselines {

enum class DirectionKind { pca, ica, random, neuron_basis, learned };

std::string to_string(DirectionKind kind);
DirectionKind direction_kind_from_string(const std::string& name);

// A set of unit-norm readout directions. For most kinds the readout rows
// also reconstruct; ICA keeps a separate `decoder` (the estimated mixing
// directions, scaled so that decoding readout projections is exact).
struct DirectionSet {
  Matrix directions;  // k x d_in, unit rows
  DirectionKind kind = DirectionKind::learned;
  Vector mean;        // d_in; zero for random and neuron_basis
  std::optional<Matrix> decoder;
  Vector explained_variance;  // PCA only, nonincreasing
  bool converged = true;      // ICA convergence flag
  std::int64_t iterations = 0;

  Index size() const { return directions.rows(); }
  Index d_in() const { return directions.cols(); }
  const Matrix& decoder_rows() const { return decoder ? *decoder : directions; }
};

struct TopKConfig {
  Index k_active = 1;
};

// Streaming covariance accumulator; batches are merged exactly in double.
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(Index dim);
  void add(const Matrix& batch);
  std::uint64_t count() const { return count_; }
  Index dim() const { return mean_.size(); }
  const VectorD& mean() const { return mean_; }
  // Population covariance (divides by n).
  MatrixD covariance() const;

 private:
  VectorD mean_;
  MatrixD scatter_;
  std::uint64_t count_ = 0;
};

DirectionSet pca_from_accumulator(const CovarianceAccumulator& acc, Index n_components);
DirectionSet fit_pca_online(DatasetReader& reader, Index n_components);
DirectionSet fit_pca(const Matrix& data, Index n_components, Index batch_size = 4096);

struct IcaConfig {
  Index n_components = 0;
  std::int64_t max_iter = 200;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

// Symmetric FastICA with log-cosh contrast on whitened data.
DirectionSet fit_ica(const Matrix& data, const IcaConfig& config);

DirectionSet make_fixed_directions(DirectionKind kind, Index d_in, Index k, std::uint64_t seed);

// Flip each row so that its largest-magnitude entry is positive. Rows of
// `companion`, when given, are flipped alongside.
void canonicalize_signs(Matrix& rows, Matrix* companion = nullptr);

// max(0, <d_i, x - mean>), then keep only the K largest (ties: lower index).
Vector project_codes(const DirectionSet& dirs, const Eigen::Ref<const Vector>& x,
                     const std::optional<TopKConfig>& topk = std::nullopt);
Matrix project_codes_batch(const DirectionSet& dirs, const Matrix& x,
                           const std::optional<TopKConfig>& topk = std::nullopt);
// Unclamped projections <d_i, x - mean>.
Matrix project_linear_batch(const DirectionSet& dirs, const Matrix& x);
// mean + codes * decoder rows.
Matrix reconstruct_batch(const DirectionSet& dirs, const Matrix& codes);

// Keeps the K largest entries of each row (ties to the lower index).
void apply_topk(Matrix& codes, Index k_active);

// .sdic persistence; the mean is appended and the kind stored in the flags.
void write_direction_set(const DirectionSet& dirs, const fs::path& path);
DirectionSet read_direction_set(const fs::path& path);
DirectionSet from_dictionary_file(const DictionaryFile& file);

}  // namespace sparsedict::baselines
