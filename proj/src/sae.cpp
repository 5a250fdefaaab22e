#include "sparsedict/sae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "sparsedict/adam.hpp"
#include "sparsedict/random.hpp"

namespace sparsedict::sae {

namespace {

void check_input(const Dictionary& dict, Index d_in) {
  dict.validate();
  if (d_in != dict.d_in()) {
    throw DimensionError("input has dimension " + std::to_string(d_in) + ", dictionary expects " +
                         std::to_string(dict.d_in()));
  }
}

}  // namespace

void TrainConfig::validate(Index d_in) const {
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw ArgumentError("alpha must be finite and >= 0");
  if (!(ratio > 0) || !std::isfinite(ratio)) throw ArgumentError("ratio must be positive");
  if (!(learning_rate > 0)) throw ArgumentError("learning_rate must be positive");
  if (epochs < 1) throw ArgumentError("epochs must be positive");
  if (batch_size < 1) throw ArgumentError("batch_size must be positive");
  if (dead_threshold_per_10m < 1) throw ArgumentError("dead_threshold_per_10m must be positive");
  if (hidden_size(d_in) < 1) throw ArgumentError("round(ratio * d_in) must be at least 1");
}

Index TrainConfig::hidden_size(Index d_in) const {
  return static_cast<Index>(std::llround(ratio * static_cast<double>(d_in)));
}

Vector encode(const Dictionary& dict, const Eigen::Ref<const Vector>& x) {
  check_input(dict, x.size());
  return (dict.encoder * x + dict.bias).cwiseMax(0.0f);
}

Matrix encode_batch(const Dictionary& dict, const Matrix& x) {
  check_input(dict, x.cols());
  Matrix pre = x * dict.encoder.transpose();
  pre.rowwise() += dict.bias.transpose();
  return pre.cwiseMax(0.0f);
}

Vector decode(const Dictionary& dict, const Eigen::Ref<const Vector>& codes) {
  dict.validate();
  if (codes.size() != dict.d_hid()) throw DimensionError("code length must equal d_hid");
  return dict.decoder_rows().transpose() * codes;
}

Matrix decode_batch(const Dictionary& dict, const Matrix& codes) {
  dict.validate();
  if (codes.cols() != dict.d_hid()) throw DimensionError("code width must equal d_hid");
  return codes * dict.decoder_rows();
}

LossTerms loss(const Dictionary& dict, const Eigen::Ref<const Vector>& x, double alpha) {
  if (alpha < 0) throw ArgumentError("alpha must be >= 0");
  Vector c = encode(dict, x);
  Vector x_hat = decode(dict, c);
  LossTerms terms;
  terms.reconstruction = (x - x_hat).cast<double>().squaredNorm();
  terms.sparsity = alpha * c.cast<double>().sum();
  terms.total = terms.reconstruction + terms.sparsity;
  return terms;
}

LossTerms batch_loss(const Dictionary& dict, const Matrix& x, double alpha) {
  if (alpha < 0) throw ArgumentError("alpha must be >= 0");
  if (x.rows() == 0) throw ValidationError("empty batch");
  Matrix c = encode_batch(dict, x);
  Matrix residual = decode_batch(dict, c) - x;
  LossTerms terms;
  const auto n = static_cast<double>(x.rows());
  terms.reconstruction = residual.cast<double>().rowwise().squaredNorm().sum() / n;
  terms.sparsity = alpha * c.cast<double>().sum() / n;
  terms.total = terms.reconstruction + terms.sparsity;
  return terms;
}

template <typename Scalar>
LossTerms loss_and_gradient(const RowMatrix<Scalar>& encoder, const ColVector<Scalar>& bias,
                            const RowMatrix<Scalar>* decoder, const RowMatrix<Scalar>& batch,
                            double alpha, Gradients<Scalar>& grad) {
  if (batch.cols() != encoder.cols()) throw DimensionError("batch dimension mismatch");
  if (bias.size() != encoder.rows()) throw DimensionError("bias length must equal d_hid");
  if (decoder && (decoder->rows() != encoder.rows() || decoder->cols() != encoder.cols())) {
    throw DimensionError("decoder shape must equal encoder shape");
  }
  const RowMatrix<Scalar>& dec = decoder ? *decoder : encoder;
  const auto n = static_cast<Scalar>(batch.rows());

  RowMatrix<Scalar> pre = batch * encoder.transpose();
  pre.rowwise() += bias.transpose();
  RowMatrix<Scalar> codes = pre.cwiseMax(Scalar(0));
  RowMatrix<Scalar> residual = codes * dec - batch;

  LossTerms terms;
  terms.reconstruction =
      static_cast<double>(residual.rowwise().squaredNorm().sum()) / static_cast<double>(n);
  terms.sparsity = alpha * static_cast<double>(codes.sum()) / static_cast<double>(n);
  terms.total = terms.reconstruction + terms.sparsity;

  // d(loss)/d(x_hat) = 2 (x_hat - x) / n
  RowMatrix<Scalar> d_xhat = residual * (Scalar(2) / n);
  RowMatrix<Scalar> d_dec = codes.transpose() * d_xhat;
  RowMatrix<Scalar> d_codes = d_xhat * dec.transpose();
  d_codes.array() += static_cast<Scalar>(alpha) / n;
  RowMatrix<Scalar> d_pre = (pre.array() > Scalar(0)).select(d_codes, Scalar(0));

  grad.bias = d_pre.colwise().sum().transpose();
  grad.encoder = d_pre.transpose() * batch;
  if (decoder) {
    grad.decoder = std::move(d_dec);
  } else {
    grad.encoder += d_dec;
    grad.decoder.reset();
  }
  return terms;
}

template LossTerms loss_and_gradient<float>(const RowMatrix<float>&, const ColVector<float>&,
                                            const RowMatrix<float>*, const RowMatrix<float>&,
                                            double, Gradients<float>&);
template LossTerms loss_and_gradient<double>(const RowMatrix<double>&, const ColVector<double>&,
                                             const RowMatrix<double>*, const RowMatrix<double>&,
                                             double, Gradients<double>&);

Dictionary initialize(Index d_in, Index d_hid, bool tied, std::uint64_t seed) {
  if (d_in < 1 || d_hid < 1) throw ArgumentError("d_in and d_hid must be positive");
  Rng rng(seed);
  Dictionary dict;
  dict.encoder = random_unit_rows(d_hid, d_in, rng);
  dict.bias = Vector::Zero(d_hid);
  if (!tied) dict.decoder = dict.encoder;
  return dict;
}

std::uint64_t scaled_dead_threshold(std::uint64_t threshold_per_10m, std::uint64_t n_samples) {
  auto product = static_cast<unsigned __int128>(threshold_per_10m) * n_samples;
  return static_cast<std::uint64_t>(product / 10'000'000u);
}

DeadScan dead_feature_scan_counts(std::vector<std::uint64_t> activation_counts,
                                  std::uint64_t n_samples, std::uint64_t threshold_per_10m) {
  if (n_samples == 0) throw ValidationError("dead feature scan needs a nonempty dataset");
  if (threshold_per_10m == 0) throw ArgumentError("threshold_per_10m must be positive");
  DeadScan scan;
  scan.scaled_threshold = scaled_dead_threshold(threshold_per_10m, n_samples);
  scan.mask.resize(activation_counts.size());
  for (std::size_t i = 0; i < activation_counts.size(); ++i) {
    bool dead = activation_counts[i] == 0 || activation_counts[i] <= scan.scaled_threshold;
    scan.mask[i] = dead;
    scan.count += dead ? 1 : 0;
  }
  scan.activation_counts = std::move(activation_counts);
  return scan;
}

DeadScan dead_feature_scan(const Dictionary& dict, const Matrix& data,
                           std::uint64_t threshold_per_10m) {
  check_input(dict, data.cols());
  if (data.rows() == 0) throw ValidationError("dead feature scan needs a nonempty dataset");
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(dict.d_hid()), 0);
  constexpr Index kChunk = 4096;
  for (Index start = 0; start < data.rows(); start += kChunk) {
    Index n = std::min(kChunk, data.rows() - start);
    Matrix codes = encode_batch(dict, data.middleRows(start, n));
    for (Index j = 0; j < codes.cols(); ++j) {
      counts[static_cast<std::size_t>(j)] +=
          static_cast<std::uint64_t>((codes.col(j).array() > 0.0f).count());
    }
  }
  return dead_feature_scan_counts(std::move(counts), static_cast<std::uint64_t>(data.rows()),
                                  threshold_per_10m);
}

namespace {

struct FinalPass {
  LossTerms loss;
  double mean_l0 = 0.0;
  double fvu = 0.0;
};

FinalPass evaluate_training_set(const Dictionary& dict, const Matrix& data, double alpha,
                                Index chunk) {
  const auto n = static_cast<double>(data.rows());
  VectorD mean = data.cast<double>().colwise().mean().transpose();
  double recon = 0.0;
  double l1 = 0.0;
  double active = 0.0;
  double total_var = 0.0;
  for (Index start = 0; start < data.rows(); start += chunk) {
    Index rows = std::min(chunk, data.rows() - start);
    Matrix x = data.middleRows(start, rows);
    Matrix c = encode_batch(dict, x);
    Matrix residual = decode_batch(dict, c) - x;
    recon += residual.cast<double>().rowwise().squaredNorm().sum();
    l1 += c.cast<double>().sum();
    active += static_cast<double>((c.array() > 0.0f).count());
    total_var += (x.cast<double>().rowwise() - mean.transpose()).rowwise().squaredNorm().sum();
  }
  FinalPass out;
  out.loss.reconstruction = recon / n;
  out.loss.sparsity = alpha * l1 / n;
  out.loss.total = out.loss.reconstruction + out.loss.sparsity;
  out.mean_l0 = active / n;
  out.fvu = total_var > 0 ? recon / total_var : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace

std::pair<Dictionary, TrainReport> train(const Matrix& data, const TrainConfig& config,
                                         const StepCallback& on_step) {
  if (data.rows() == 0) throw ValidationError("training dataset is empty");
  config.validate(data.cols());
  auto initial = initialize(data.cols(), config.hidden_size(data.cols()), config.tied, config.seed);
  return train(data, config, std::move(initial), on_step);
}

std::pair<Dictionary, TrainReport> train(const Matrix& data, const TrainConfig& config,
                                         Dictionary dict, const StepCallback& on_step) {
  if (data.rows() == 0) throw ValidationError("training dataset is empty");
  config.validate(data.cols());
  check_input(dict, data.cols());
  if (!data.allFinite()) throw ValidationError("training data contains non-finite values");

  // Distinct stream from initialize() so that batch order and init are independent.
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamParams adam{config.learning_rate, 0.9, 0.999, 1e-8};
  AdamState<Matrix> enc_state(dict.encoder);
  AdamState<Vector> bias_state(dict.bias);
  std::optional<AdamState<Matrix>> dec_state;
  if (!dict.tied()) dec_state.emplace(*dict.decoder);

  normalize_rows(dict.decoder_rows());

  const Index n = data.rows();
  const Index batch_size = std::min<Index>(config.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});

  TrainReport report;
  Gradients<float> grad;
  Matrix batch;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < n; start += batch_size) {
      Index rows = std::min(batch_size, n - start);
      batch.resize(rows, data.cols());
      for (Index r = 0; r < rows; ++r) {
        batch.row(r) = data.row(order[static_cast<std::size_t>(start + r)]);
      }
      const Matrix* decoder = dict.tied() ? nullptr : &*dict.decoder;
      LossTerms terms =
          loss_and_gradient<float>(dict.encoder, dict.bias, decoder, batch, config.alpha, grad);
      ++step;
      if (!std::isfinite(terms.total) || !grad.encoder.allFinite() || !grad.bias.allFinite()) {
        throw DivergenceError(step, "non-finite loss at step " + std::to_string(step));
      }

      enc_state.step(dict.encoder, grad.encoder, static_cast<long>(step), adam);
      bias_state.step(dict.bias, grad.bias, static_cast<long>(step), adam);
      if (dec_state) dec_state->step(*dict.decoder, *grad.decoder, static_cast<long>(step), adam);
      normalize_rows(dict.decoder_rows());
      if (on_step) on_step(StepInfo{step, epoch, terms}, dict);

      report.loss_curve.push_back(LossPoint{step, terms});
    }

    const bool last_epoch = epoch + 1 == config.epochs;
    if (config.dead_reinit && !last_epoch) {
      auto scan = dead_feature_scan(dict, data,
                                    static_cast<std::uint64_t>(config.dead_threshold_per_10m));
      if (scan.count > 0) {
        Matrix fresh = random_unit_rows(dict.d_hid(), dict.d_in(), rng);
        for (Index i = 0; i < dict.d_hid(); ++i) {
          if (!scan.mask[static_cast<std::size_t>(i)]) continue;
          dict.encoder.row(i) = fresh.row(i);
          if (dict.decoder) dict.decoder->row(i) = fresh.row(i);
          dict.bias(i) = 0.0f;
          enc_state.reset_row(i);
          bias_state.reset_row(i);
          if (dec_state) dec_state->reset_row(i);
        }
      }
    }
  }

  auto final_pass = evaluate_training_set(dict, data, config.alpha, 4096);
  if (!std::isfinite(final_pass.loss.total)) {
    throw DivergenceError(step, "non-finite loss on final pass after step " + std::to_string(step));
  }
  report.final_loss = final_pass.loss.total;
  report.final_reconstruction_loss = final_pass.loss.reconstruction;
  report.final_sparsity_loss = final_pass.loss.sparsity;
  report.mean_l0 = final_pass.mean_l0;
  report.fvu = final_pass.fvu;
  report.dead_feature_count =
      dead_feature_scan(dict, data, static_cast<std::uint64_t>(config.dead_threshold_per_10m)).count;
  report.steps = step;
  return {std::move(dict), std::move(report)};
}

}  // namespace sparsedict::sae
