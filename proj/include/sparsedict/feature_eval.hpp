#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparsedict/activation_store.hpp"
#include "sparsedict/baselines.hpp"
#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict::eval {

using baselines::DirectionSet;
using baselines::TopKConfig;

struct EvalReport {
  double fvu = 0.0;
  double mean_l0 = 0.0;
  std::int64_t dead_count = 0;
  std::int64_t n_samples = 0;
};

// Maps a batch of inputs to (codes, reconstructions).
using Codec = std::function<std::pair<Matrix, Matrix>(const Matrix&)>;

Codec dictionary_codec(const Dictionary& dict, std::optional<TopKConfig> topk = std::nullopt);

// Linear: unclamped projections (classical subspace reconstruction).
// Rectified: negatives clamped, optional top-K, as used for interpretation.
enum class CodeMode { linear, rectified };
Codec direction_codec(const DirectionSet& dirs, CodeMode mode,
                      std::optional<TopKConfig> topk = std::nullopt);

// Sum ||x - x_hat||^2 / Sum ||x - mean||^2 over the dataset, in double.
// Throws ValidationError when the data has zero variance.
double fvu(const Matrix& data, const Codec& codec);
double fvu(DatasetReader& reader, const Codec& codec);
double fvu(const Dictionary& dict, const Matrix& data,
           std::optional<TopKConfig> topk = std::nullopt);
double fvu(const DirectionSet& dirs, const Matrix& data, CodeMode mode = CodeMode::linear,
           std::optional<TopKConfig> topk = std::nullopt);

// One pass computing fvu, mean L0 and dead features together.
EvalReport evaluate(DatasetReader& reader, const Codec& codec, std::uint64_t dead_threshold_per_10m = 10);

class L0Accumulator {
 public:
  void add(const Matrix& codes);
  double mean() const;  // throws ValidationError when empty
  std::uint64_t count() const { return rows_; }

 private:
  std::uint64_t rows_ = 0;
  std::uint64_t active_ = 0;
};

double mean_l0(const Matrix& codes);

// Per-feature moments. Skew and kurtosis are absent ("undefined") when the
// variance is zero or too few samples were seen.
struct Moments {
  std::uint64_t count = 0;
  double mean = 0.0;
  double variance = 0.0;  // population (central second moment)
  std::optional<double> skew;
  std::optional<double> kurtosis;  // raw, Gaussian = 3
};

// Single-pass update of central moments M2..M4 (Terriberry's extension of
// Welford's method).
class MomentAccumulator {
 public:
  void add(double x);
  Moments finish() const;

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
  double m3_ = 0.0;
  double m4_ = 0.0;
};

Moments moments_of(std::span<const double> values);
// One entry per column of `activations`.
std::vector<Moments> activation_moments(const Matrix& activations);

// nullopt when either side has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct MomentCorrelations {
  double mean = 0.0;
  double variance = 0.0;
  double skew = 0.0;
  double kurtosis = 0.0;
};

// Features with undefined moments are dropped pairwise. Throws ArgumentError
// if fewer than 3 valid pairs remain or a correlation is undefined.
MomentCorrelations moment_score_correlation(const std::vector<Moments>& moments,
                                            const std::vector<double>& scores);

struct TokenHistogram {
  Index feature_index = 0;
  double max_activation = 0.0;
  std::vector<double> bin_edges;  // n_bins + 1 ascending values starting at 0
  std::map<std::string, std::vector<std::uint64_t>> counts;

  std::uint64_t total() const;
  bool empty() const { return counts.empty(); }
};

// Equal-width bins over (0, max]; bin b covers (edge[b], edge[b+1]].
TokenHistogram token_histogram(Index feature, const Dictionary& dict, const Matrix& data,
                               const std::vector<std::string>& tokens, Index n_bins = 10);
TokenHistogram token_histogram_from_activations(Index feature, std::span<const float> activations,
                                                const std::vector<std::string>& tokens,
                                                Index n_bins = 10);

// unembed * (x - c_f f) - unembed * x, i.e. -c_f * unembed * f.
Vector logit_effect(Index feature, const Dictionary& dict, const Eigen::Ref<const Vector>& x,
                    const Matrix& unembed);

struct RankedToken {
  Index token_id = 0;
  std::string token;
  double logit = 0.0;
};

// Ranks unembed * f descending, ties to the lower token id.
std::vector<RankedToken> unembed_feature(Index feature, const Dictionary& dict,
                                         const Matrix& unembed,
                                         const std::vector<std::string>& vocab, Index top_n);

}  // namespace sparsedict::eval
