#include "sparsedict/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sparsedict/random.hpp"

namespace sparsedict::synth {

void SyntheticConfig::validate() const {
  if (n_gt < 1 || d < 1 || n_samples < 1) {
    throw ArgumentError("n_gt, d and n_samples must be positive");
  }
  if (!std::isfinite(avg_active) || !std::isfinite(coeff_scale) || !std::isfinite(noise_sigma)) {
    throw ArgumentError("synthetic config values must be finite");
  }
  if (avg_active <= 0) throw ArgumentError("avg_active must be positive");
  if (avg_active > static_cast<double>(n_gt)) throw ArgumentError("avg_active exceeds n_gt");
  if (coeff_scale <= 0) throw ArgumentError("coeff_scale must be positive");
  if (noise_sigma < 0) throw ArgumentError("noise_sigma must be nonnegative");
}

SyntheticData generate(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);

  SyntheticData out;
  out.truth = random_unit_rows(config.n_gt, config.d, rng);
  out.data = Matrix::Zero(config.n_samples, config.d);

  std::bernoulli_distribution active(config.avg_active / static_cast<double>(config.n_gt));
  std::exponential_distribution<double> magnitude(1.0 / config.coeff_scale);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(config.noise_sigma));

  std::vector<Eigen::Triplet<float>> triplets;
  triplets.reserve(static_cast<std::size_t>(config.avg_active * config.n_samples * 1.1) + 16);
  for (Index i = 0; i < config.n_samples; ++i) {
    auto row = out.data.row(i);
    for (Index j = 0; j < config.n_gt; ++j) {
      if (!active(rng)) continue;
      auto a = static_cast<float>(magnitude(rng));
      if (a == 0.0f) continue;
      triplets.emplace_back(static_cast<int>(i), static_cast<int>(j), a);
      row += a * out.truth.row(j);
    }
    if (config.noise_sigma > 0) {
      for (Index k = 0; k < config.d; ++k) row(k) += noise(rng);
    }
  }
  out.codes.resize(config.n_samples, config.n_gt);
  out.codes.setFromTriplets(triplets.begin(), triplets.end());
  return out;
}

RecoveryReport mmcs(const Matrix& learned, const Matrix& truth) {
  if (learned.rows() < 1) throw ArgumentError("learned dictionary is empty");
  if (truth.rows() < 1) throw ArgumentError("truth dictionary is empty");
  if (learned.cols() != truth.cols()) {
    throw DimensionError("learned and truth dictionaries differ in dimension");
  }
  MatrixD l = learned.cast<double>();
  MatrixD t = truth.cast<double>();
  normalize_rows(l);
  normalize_rows(t);
  MatrixD cos = t * l.transpose();

  RecoveryReport report;
  report.per_feature_max_cos.resize(static_cast<std::size_t>(t.rows()));
  report.matched_index.resize(static_cast<std::size_t>(t.rows()));
  double total = 0.0;
  for (Index j = 0; j < t.rows(); ++j) {
    Index best = 0;
    for (Index k = 1; k < l.rows(); ++k) {
      if (cos(j, k) > cos(j, best)) best = k;
    }
    double value = std::clamp(cos(j, best), -1.0, 1.0);
    report.per_feature_max_cos[static_cast<std::size_t>(j)] = value;
    report.matched_index[static_cast<std::size_t>(j)] = best;
    total += value;
  }
  report.mmcs = total / static_cast<double>(t.rows());
  return report;
}

}  // namespace sparsedict::synth
