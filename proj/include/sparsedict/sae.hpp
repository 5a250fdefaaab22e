#pragma once

// Sparse autoencoder: c = ReLU(M x + b), x_hat = M_d^T c with M_d = M when
// tied, trained on ||x - x_hat||^2 + alpha * ||c||_1 with Adam and unit-norm
// decoder rows.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict::sae {

struct TrainConfig {
  double alpha = 8.6e-4;
  double ratio = 1.0;
  double learning_rate = 1e-3;
  std::int64_t epochs = 1;
  std::int64_t batch_size = 1024;
  std::uint64_t seed = 0;
  bool tied = true;
  bool dead_reinit = false;
  std::int64_t dead_threshold_per_10m = 10;

  // Throws ArgumentError naming the offending field.
  void validate(Index d_in) const;
  Index hidden_size(Index d_in) const;
};

struct LossTerms {
  double total = 0.0;
  double reconstruction = 0.0;
  double sparsity = 0.0;  // alpha * ||c||_1
};

struct LossPoint {
  std::int64_t step = 0;
  LossTerms loss;
};

struct TrainReport {
  double final_loss = 0.0;
  double final_reconstruction_loss = 0.0;
  double final_sparsity_loss = 0.0;
  double mean_l0 = 0.0;
  double fvu = 0.0;  // NaN when the training data has zero variance
  std::int64_t dead_feature_count = 0;
  std::int64_t steps = 0;
  std::vector<LossPoint> loss_curve;
};

Vector encode(const Dictionary& dict, const Eigen::Ref<const Vector>& x);
Matrix encode_batch(const Dictionary& dict, const Matrix& x);
Vector decode(const Dictionary& dict, const Eigen::Ref<const Vector>& codes);
Matrix decode_batch(const Dictionary& dict, const Matrix& codes);

LossTerms loss(const Dictionary& dict, const Eigen::Ref<const Vector>& x, double alpha);
// Mean of the per-sample loss over the rows of `x`.
LossTerms batch_loss(const Dictionary& dict, const Matrix& x, double alpha);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct Gradients {
  RowMatrix<Scalar> encoder;
  ColVector<Scalar> bias;
  std::optional<RowMatrix<Scalar>> decoder;
};

// Mean batch loss and its gradient. `decoder == nullptr` means tied weights,
// in which case grad.encoder carries both the encoder and decoder paths.
// The ReLU subgradient at exactly zero is zero.
template <typename Scalar>
LossTerms loss_and_gradient(const RowMatrix<Scalar>& encoder, const ColVector<Scalar>& bias,
                            const RowMatrix<Scalar>* decoder, const RowMatrix<Scalar>& batch,
                            double alpha, Gradients<Scalar>& grad);

// Random unit rows, zero bias; untied dictionaries start with encoder = decoder.
Dictionary initialize(Index d_in, Index d_hid, bool tied, std::uint64_t seed);

struct StepInfo {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  LossTerms loss;  // on the batch, before the update; the callback sees the updated dictionary
};

using StepCallback = std::function<void(const StepInfo&, const Dictionary&)>;

// Trains from a fresh seeded initialization.
std::pair<Dictionary, TrainReport> train(const Matrix& data, const TrainConfig& config,
                                         const StepCallback& on_step = {});
// Trains starting from `initial`; config.ratio and config.tied are ignored.
std::pair<Dictionary, TrainReport> train(const Matrix& data, const TrainConfig& config,
                                         Dictionary initial, const StepCallback& on_step = {});

struct DeadScan {
  std::int64_t count = 0;
  std::vector<bool> mask;  // true = dead
  std::vector<std::uint64_t> activation_counts;
  std::uint64_t scaled_threshold = 0;
};

// floor(threshold_per_10m * n / 10^7); a feature is dead iff it fires at
// most that many times. A feature that never fires is always dead.
std::uint64_t scaled_dead_threshold(std::uint64_t threshold_per_10m, std::uint64_t n_samples);
DeadScan dead_feature_scan(const Dictionary& dict, const Matrix& data,
                           std::uint64_t threshold_per_10m = 10);
DeadScan dead_feature_scan_counts(std::vector<std::uint64_t> activation_counts,
                                  std::uint64_t n_samples, std::uint64_t threshold_per_10m);

}  // namespace sparsedict::sae
