#include "sparsedict/feature_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sparsedict/sae.hpp"

namespace sparsedict::eval {

Codec dictionary_codec(const Dictionary& dict, std::optional<TopKConfig> topk) {
  dict.validate();
  if (topk && (topk->k_active < 1 || topk->k_active > dict.d_hid())) {
    throw ArgumentError("K must lie in [1, d_hid]");
  }
  return [&dict, topk](const Matrix& x) {
    Matrix codes = sae::encode_batch(dict, x);
    if (topk) baselines::apply_topk(codes, topk->k_active);
    Matrix recon = sae::decode_batch(dict, codes);
    return std::make_pair(std::move(codes), std::move(recon));
  };
}

Codec direction_codec(const DirectionSet& dirs, CodeMode mode, std::optional<TopKConfig> topk) {
  if (mode == CodeMode::linear && topk) {
    throw ArgumentError("top-K applies to rectified codes only");
  }
  return [&dirs, mode, topk](const Matrix& x) {
    Matrix codes = mode == CodeMode::linear ? baselines::project_linear_batch(dirs, x)
                                            : baselines::project_codes_batch(dirs, x, topk);
    Matrix recon = baselines::reconstruct_batch(dirs, codes);
    return std::make_pair(std::move(codes), std::move(recon));
  };
}

namespace {

struct FvuAccumulator {
  explicit FvuAccumulator(Index dim) : stats(dim) {}
  void add(const Matrix& x, const Matrix& recon) {
    if (recon.rows() != x.rows() || recon.cols() != x.cols()) {
      throw DimensionError("reconstruction shape does not match input");
    }
    residual += (x - recon).cast<double>().rowwise().squaredNorm().sum();
    stats.add(x);
  }
  double finish() const {
    auto s = stats.finish();
    double denom = s.variance.sum() * static_cast<double>(s.count);
    if (!(denom > 0)) throw ValidationError("dataset has zero variance; FVU undefined");
    return residual / denom;
  }
  RunningStats stats;
  double residual = 0.0;
};

}  // namespace

double fvu(const Matrix& data, const Codec& codec) {
  if (data.rows() == 0) throw ValidationError("empty dataset");
  FvuAccumulator acc(data.cols());
  constexpr Index kChunk = 4096;
  for (Index start = 0; start < data.rows(); start += kChunk) {
    Matrix x = data.middleRows(start, std::min(kChunk, data.rows() - start));
    acc.add(x, codec(x).second);
  }
  return acc.finish();
}

double fvu(DatasetReader& reader, const Codec& codec) {
  FvuAccumulator acc(reader.d_in());
  reader.rewind();
  Matrix batch;
  while (reader.next(batch)) acc.add(batch, codec(batch).second);
  return acc.finish();
}

double fvu(const Dictionary& dict, const Matrix& data, std::optional<TopKConfig> topk) {
  return fvu(data, dictionary_codec(dict, topk));
}

double fvu(const DirectionSet& dirs, const Matrix& data, CodeMode mode,
           std::optional<TopKConfig> topk) {
  return fvu(data, direction_codec(dirs, mode, topk));
}

EvalReport evaluate(DatasetReader& reader, const Codec& codec, std::uint64_t dead_threshold_per_10m) {
  FvuAccumulator fvu_acc(reader.d_in());
  L0Accumulator l0;
  std::vector<std::uint64_t> fire_counts;
  reader.rewind();
  Matrix batch;
  while (reader.next(batch)) {
    auto [codes, recon] = codec(batch);
    fvu_acc.add(batch, recon);
    l0.add(codes);
    fire_counts.resize(static_cast<std::size_t>(codes.cols()), 0);
    for (Index j = 0; j < codes.cols(); ++j) {
      fire_counts[static_cast<std::size_t>(j)] +=
          static_cast<std::uint64_t>((codes.col(j).array() > 0.0f).count());
    }
  }
  EvalReport report;
  report.n_samples = static_cast<std::int64_t>(reader.count());
  report.fvu = fvu_acc.finish();
  report.mean_l0 = l0.mean();
  report.dead_count =
      sae::dead_feature_scan_counts(std::move(fire_counts), reader.count(), dead_threshold_per_10m)
          .count;
  return report;
}

void L0Accumulator::add(const Matrix& codes) {
  rows_ += static_cast<std::uint64_t>(codes.rows());
  active_ += static_cast<std::uint64_t>((codes.array() > 0.0f).count());
}

double L0Accumulator::mean() const {
  if (rows_ == 0) throw ValidationError("mean L0 of an empty code stream");
  return static_cast<double>(active_) / static_cast<double>(rows_);
}

double mean_l0(const Matrix& codes) {
  L0Accumulator acc;
  acc.add(codes);
  return acc.mean();
}

void MomentAccumulator::add(double x) {
  const double n1 = static_cast<double>(n_);
  ++n_;
  const double n = static_cast<double>(n_);
  const double delta = x - mean_;
  const double delta_n = delta / n;
  const double delta_n2 = delta_n * delta_n;
  const double term1 = delta * delta_n * n1;
  mean_ += delta_n;
  m4_ += term1 * delta_n2 * (n * n - 3 * n + 3) + 6 * delta_n2 * m2_ - 4 * delta_n * m3_;
  m3_ += term1 * delta_n * (n - 2) - 3 * delta_n * m2_;
  m2_ += term1;
}

Moments MomentAccumulator::finish() const {
  if (n_ < 2) throw ArgumentError("moments need at least 2 samples");
  Moments m;
  const double n = static_cast<double>(n_);
  m.count = n_;
  m.mean = mean_;
  m.variance = m2_ / n;
  if (m2_ > 0) {
    if (n_ >= 3) m.skew = std::sqrt(n) * m3_ / std::pow(m2_, 1.5);
    if (n_ >= 4) m.kurtosis = n * m4_ / (m2_ * m2_);
  }
  return m;
}

Moments moments_of(std::span<const double> values) {
  MomentAccumulator acc;
  for (double v : values) acc.add(v);
  return acc.finish();
}

std::vector<Moments> activation_moments(const Matrix& activations) {
  std::vector<MomentAccumulator> accs(static_cast<std::size_t>(activations.cols()));
  for (Index i = 0; i < activations.rows(); ++i) {
    for (Index j = 0; j < activations.cols(); ++j) {
      accs[static_cast<std::size_t>(j)].add(activations(i, j));
    }
  }
  std::vector<Moments> out;
  out.reserve(accs.size());
  for (const auto& acc : accs) out.push_back(acc.finish());
  return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson inputs differ in length");
  if (x.empty()) return std::nullopt;
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0) || !(syy > 0)) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

MomentCorrelations moment_score_correlation(const std::vector<Moments>& moments,
                                            const std::vector<double>& scores) {
  if (moments.size() != scores.size()) {
    throw DimensionError("moments and scores differ in length");
  }
  auto correlate = [&](const char* name, auto getter) {
    std::vector<double> xs;
    std::vector<double> ys;
    for (std::size_t i = 0; i < moments.size(); ++i) {
      std::optional<double> value = getter(moments[i]);
      if (!value || !std::isfinite(*value) || !std::isfinite(scores[i])) continue;
      xs.push_back(*value);
      ys.push_back(scores[i]);
    }
    if (xs.size() < 3) {
      throw ArgumentError(std::string("fewer than 3 valid pairs for ") + name);
    }
    auto r = pearson(xs, ys);
    if (!r) throw ArgumentError(std::string("correlation undefined (zero variance) for ") + name);
    return *r;
  };
  MomentCorrelations out;
  out.mean = correlate("mean", [](const Moments& m) { return std::optional<double>(m.mean); });
  out.variance =
      correlate("variance", [](const Moments& m) { return std::optional<double>(m.variance); });
  out.skew = correlate("skew", [](const Moments& m) { return m.skew; });
  out.kurtosis = correlate("kurtosis", [](const Moments& m) { return m.kurtosis; });
  return out;
}

std::uint64_t TokenHistogram::total() const {
  std::uint64_t sum = 0;
  for (const auto& [token, bins] : counts) {
    sum = std::accumulate(bins.begin(), bins.end(), sum);
  }
  return sum;
}

TokenHistogram token_histogram_from_activations(Index feature, std::span<const float> activations,
                                                const std::vector<std::string>& tokens,
                                                Index n_bins) {
  if (n_bins < 1) throw ArgumentError("n_bins must be positive");
  if (tokens.size() != activations.size()) {
    throw DimensionError("token labels must align with dataset rows");
  }
  TokenHistogram hist;
  hist.feature_index = feature;
  for (float a : activations) hist.max_activation = std::max<double>(hist.max_activation, a);
  if (hist.max_activation <= 0) return hist;

  const double width = hist.max_activation / static_cast<double>(n_bins);
  hist.bin_edges.resize(static_cast<std::size_t>(n_bins) + 1);
  for (Index b = 0; b <= n_bins; ++b) {
    hist.bin_edges[static_cast<std::size_t>(b)] = width * static_cast<double>(b);
  }
  hist.bin_edges.back() = hist.max_activation;

  for (std::size_t i = 0; i < activations.size(); ++i) {
    const double a = activations[i];
    if (!(a > 0)) continue;
    auto bin = static_cast<Index>(std::ceil(a / width)) - 1;
    bin = std::clamp<Index>(bin, 0, n_bins - 1);
    auto& bins = hist.counts[tokens[i]];
    if (bins.empty()) bins.assign(static_cast<std::size_t>(n_bins), 0);
    ++bins[static_cast<std::size_t>(bin)];
  }
  return hist;
}

TokenHistogram token_histogram(Index feature, const Dictionary& dict, const Matrix& data,
                               const std::vector<std::string>& tokens, Index n_bins) {
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  if (static_cast<std::size_t>(data.rows()) != tokens.size()) {
    throw DimensionError("token labels must align with dataset rows");
  }
  std::vector<float> acts(static_cast<std::size_t>(data.rows()));
  constexpr Index kChunk = 4096;
  for (Index start = 0; start < data.rows(); start += kChunk) {
    Index n = std::min(kChunk, data.rows() - start);
    Matrix codes = sae::encode_batch(dict, data.middleRows(start, n));
    for (Index i = 0; i < n; ++i) acts[static_cast<std::size_t>(start + i)] = codes(i, feature);
  }
  return token_histogram_from_activations(feature, acts, tokens, n_bins);
}

Vector logit_effect(Index feature, const Dictionary& dict, const Eigen::Ref<const Vector>& x,
                    const Matrix& unembed) {
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  if (unembed.cols() != dict.d_in()) throw DimensionError("unembedding width must equal d_in");
  const float c = sae::encode(dict, x)(feature);
  if (c <= 0.0f) return Vector::Zero(unembed.rows());
  VectorD f = dict.decoder_rows().row(feature).transpose().cast<double>();
  VectorD diff = -static_cast<double>(c) * (unembed.cast<double>() * f);
  return diff.cast<float>();
}

std::vector<RankedToken> unembed_feature(Index feature, const Dictionary& dict,
                                         const Matrix& unembed,
                                         const std::vector<std::string>& vocab, Index top_n) {
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  if (unembed.cols() != dict.d_in()) throw DimensionError("unembedding width must equal d_in");
  if (static_cast<std::size_t>(unembed.rows()) != vocab.size()) {
    throw DimensionError("vocabulary size must equal unembedding rows");
  }
  if (top_n < 1 || top_n > unembed.rows()) throw ArgumentError("top_n must lie in [1, vocab size]");
  VectorD logits = unembed.cast<double>() * dict.decoder_rows().row(feature).transpose().cast<double>();
  std::vector<Index> order(static_cast<std::size_t>(logits.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return logits(a) > logits(b); });
  std::vector<RankedToken> out;
  for (Index i = 0; i < top_n; ++i) {
    Index id = order[static_cast<std::size_t>(i)];
    out.push_back({id, vocab[static_cast<std::size_t>(id)], logits(id)});
  }
  return out;
}

}  // namespace sparsedict::eval
