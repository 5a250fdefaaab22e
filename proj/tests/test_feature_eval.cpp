#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sparsedict/feature_eval.hpp"
#include "sparsedict/sae.hpp"
#include "sparsedict/synthgen.hpp"
#include "support.hpp"

using namespace sparsedict;
using namespace sparsedict::eval;

namespace {

eval::Codec mean_codec(const Matrix& data) {
  Vector mean = data.cast<double>().colwise().mean().transpose().cast<float>();
  return [mean](const Matrix& x) {
    Matrix recon = Matrix(x.rows(), x.cols());
    recon.rowwise() = mean.transpose();
    return std::make_pair(Matrix(Matrix::Zero(x.rows(), 1)), recon);
  };
}

eval::Codec identity_codec() {
  return [](const Matrix& x) { return std::make_pair(x, x); };
}

// Two-pass textbook central moments.
Moments two_pass(const std::vector<double>& v) {
  double n = static_cast<double>(v.size());
  double mean = 0;
  for (double x : v) mean += x;
  mean /= n;
  double m2 = 0, m3 = 0, m4 = 0;
  for (double x : v) {
    double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  Moments m;
  m.mean = mean;
  m.variance = m2;
  m.skew = m3 / std::pow(m2, 1.5);
  m.kurtosis = m4 / (m2 * m2);
  return m;
}

Dictionary tied(const Matrix& rows) { return {rows, Vector::Zero(rows.rows()), std::nullopt}; }

}  // namespace

TEST_CASE("FVU definitions") {
  Matrix data = testing::gaussian(300, 4, 1);
  CHECK(fvu(data, identity_codec()) == 0.0);
  // The codec's mean is rounded to float, hence the tolerance.
  CHECK(fvu(data, mean_codec(data)) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(fvu(Matrix::Ones(5, 3), identity_codec()), ValidationError);
  CHECK_THROWS_AS(fvu(Matrix(0, 3), identity_codec()), ValidationError);
}

TEST_CASE("property: the mean predictor scores one") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Index n = std::uniform_int_distribution<Index>(2, 200)(rng);
    Index d = std::uniform_int_distribution<Index>(1, 7)(rng);
    Matrix data = testing::gaussian(n, d, rng(), 5.0f);
    CHECK(fvu(data, mean_codec(data)) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("rank-1 PCA FVU on axis variances (4, 1) is 1/5") {
  // Balanced +-2 / +-1 values give sample variances exactly 4 and 1.
  Matrix data(4, 2);
  data << 2, 1, -2, 1, 2, -1, -2, -1;
  auto pca = baselines::fit_pca(data, 1);
  CHECK(std::abs(pca.directions(0, 0)) == doctest::Approx(1.0));
  CHECK(fvu(pca, data) == doctest::Approx(0.2).epsilon(1e-6));
  // Rectified codes clamp the negative half and lose more variance.
  CHECK(fvu(pca, data, CodeMode::rectified) > 0.2);
  CHECK_THROWS_AS(direction_codec(pca, CodeMode::linear, TopKConfig{1}), ArgumentError);
}

TEST_CASE("dictionary FVU matches a direct computation and streams identically") {
  testing::TempDir dir;
  Matrix data = testing::gaussian(1000, 6, 2);
  Dictionary dict{testing::gaussian(9, 6, 3), testing::gaussian(9, 1, 4, 0.1f).col(0), std::nullopt};
  for (Index i = 0; i < 9; ++i) dict.encoder.row(i).normalize();
  MatrixD x = data.cast<double>();
  MatrixD recon = sae::decode_batch(dict, sae::encode_batch(dict, data)).cast<double>();
  VectorD mean = x.colwise().mean().transpose();
  double num = (x - recon).squaredNorm();
  double den = (x.rowwise() - mean.transpose()).squaredNorm();
  CHECK(fvu(dict, data) == doctest::Approx(num / den).epsilon(1e-9));

  write_dataset(data, DatasetMeta{}, dir / "d.sact");
  DatasetReader reader(dir / "d.sact", 77);
  CHECK(fvu(reader, dictionary_codec(dict)) == doctest::Approx(num / den).epsilon(1e-9));

  DatasetReader reader2(dir / "d.sact", 64);
  auto report = evaluate(reader2, dictionary_codec(dict));
  CHECK(report.fvu == doctest::Approx(num / den).epsilon(1e-9));
  CHECK(report.n_samples == 1000);
  CHECK(report.mean_l0 == doctest::Approx(mean_l0(sae::encode_batch(dict, data))));
  CHECK(report.dead_count == sae::dead_feature_scan(dict, data).count);
}

TEST_CASE("mean L0 examples") {
  CHECK(mean_l0(Matrix::Zero(3, 4)) == 0.0);
  Matrix codes(2, 2);
  codes << 1, 0, 1, 1;
  CHECK(mean_l0(codes) == 1.5);
  CHECK_THROWS_AS(mean_l0(Matrix(0, 2)), ValidationError);
  L0Accumulator acc;
  acc.add(codes.topRows(1));
  acc.add(codes.bottomRows(1));
  CHECK(acc.mean() == 1.5);
}

TEST_CASE("ground-truth dictionary recovers the synthetic sparsity") {
  synth::SyntheticConfig cfg{.n_gt = 512, .d = 256, .n_samples = 10000, .avg_active = 5.0, .seed = 12};
  auto syn = synth::generate(cfg);
  // alpha -> 0: the true codes are the sparse solution, so count them.
  Matrix codes(syn.codes);
  double l0 = mean_l0(codes);
  CHECK(l0 >= 4.0);
  CHECK(l0 <= 6.0);
}

TEST_CASE("moment examples") {
  std::vector<double> sym;
  for (int i = 0; i < 50; ++i) {
    sym.push_back(-1);
    sym.push_back(1);
  }
  auto m = moments_of(sym);
  REQUIRE(m.skew.has_value());
  CHECK(*m.skew == doctest::Approx(0.0));
  CHECK(m.variance == doctest::Approx(1.0));
  CHECK(*m.kurtosis == doctest::Approx(1.0));

  std::vector<double> constant(10, 3.5);
  auto c = moments_of(constant);
  CHECK(c.variance == 0.0);
  CHECK_FALSE(c.skew.has_value());
  CHECK_FALSE(c.kurtosis.has_value());

  CHECK_FALSE(moments_of(std::vector<double>{1, 2}).skew.has_value());
  CHECK_THROWS_AS(moments_of(std::vector<double>{1}), ArgumentError);
}

TEST_CASE("Gaussian kurtosis is three") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  MomentAccumulator acc;
  for (int i = 0; i < 1'000'000; ++i) acc.add(normal(rng));
  auto m = acc.finish();
  CHECK(std::abs(*m.kurtosis - 3.0) < 0.05);
  CHECK(std::abs(*m.skew) < 0.01);
}

TEST_CASE("single-pass moments match the two-pass formula") {
  std::mt19937_64 rng(6);
  std::exponential_distribution<double> expo(0.5);
  std::vector<double> v;
  for (int i = 0; i < 100000; ++i) v.push_back(1000.0 + expo(rng));
  auto online = moments_of(v);
  auto ref = two_pass(v);
  CHECK(online.mean == doctest::Approx(ref.mean).epsilon(1e-9));
  CHECK(online.variance == doctest::Approx(ref.variance).epsilon(1e-9));
  CHECK(*online.skew == doctest::Approx(*ref.skew).epsilon(1e-9));
  CHECK(*online.kurtosis == doctest::Approx(*ref.kurtosis).epsilon(1e-9));

  Matrix acts(4, 2);
  acts << 0, 1, 0, 2, 0, 3, 0, 4;
  auto per = activation_moments(acts);
  REQUIRE(per.size() == 2);
  CHECK_FALSE(per[0].skew.has_value());
  CHECK(per[1].mean == doctest::Approx(2.5));
}

TEST_CASE("moment-score correlation") {
  std::vector<Moments> moments;
  std::vector<double> skews = {0.5, 1.5, -0.2, 3.0, 2.2};
  for (std::size_t i = 0; i < skews.size(); ++i) {
    Moments m;
    m.mean = double(i);
    m.variance = 1.0 + double(i * i);
    m.skew = skews[i];
    m.kurtosis = 3.0 + double(i % 3);
    moments.push_back(m);
  }
  auto r = moment_score_correlation(moments, skews);
  CHECK(r.skew == doctest::Approx(1.0));
  CHECK_THROWS_AS(moment_score_correlation(moments, std::vector<double>(5, 0.7)), ArgumentError);

  // Undefined moments are dropped; below three pairs is an error.
  moments[0].skew.reset();
  moments[1].skew.reset();
  moments[2].skew.reset();
  CHECK_THROWS_AS(moment_score_correlation(moments, skews), ArgumentError);
}

TEST_CASE("moment-score correlation is small for independent scores") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  std::vector<Moments> moments;
  std::vector<double> scores;
  for (int i = 0; i < 1000; ++i) {
    Moments m;
    m.mean = normal(rng);
    m.variance = std::abs(normal(rng));
    m.skew = normal(rng);
    m.kurtosis = 3 + std::abs(normal(rng));
    moments.push_back(m);
    scores.push_back(normal(rng));
  }
  auto r = moment_score_correlation(moments, scores);
  CHECK(std::abs(r.mean) < 0.1);
  CHECK(std::abs(r.variance) < 0.1);
  CHECK(std::abs(r.skew) < 0.1);
  CHECK(std::abs(r.kurtosis) < 0.1);
}

TEST_CASE("pearson agrees with the oracle") {
  std::vector<double> x = {1, 2, 3, 4, 10};
  std::vector<double> y = {2, 1, 4, 3, 7};
  CHECK(*pearson(x, y) == doctest::Approx(oracle::pearson(x, y)));
  CHECK_FALSE(pearson(x, std::vector<double>(5, 1.0)).has_value());
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1}), DimensionError);
}

TEST_CASE("token histogram examples") {
  std::vector<float> acts = {1.0f, 2.0f};
  auto h = token_histogram_from_activations(0, acts, {"a", "b"}, 2);
  CHECK(h.bin_edges == std::vector<double>{0.0, 1.0, 2.0});
  CHECK(h.counts.at("a") == std::vector<std::uint64_t>{1, 0});
  CHECK(h.counts.at("b") == std::vector<std::uint64_t>{0, 1});

  auto empty = token_histogram_from_activations(0, std::vector<float>{0, 0, 0}, {"x", "y", "z"}, 4);
  CHECK(empty.empty());
  CHECK(empty.max_activation == 0.0);

  CHECK_THROWS_AS(token_histogram_from_activations(0, acts, {"a"}, 2), DimensionError);
  CHECK_THROWS_AS(token_histogram_from_activations(0, acts, {"a", "b"}, 0), ArgumentError);
}

TEST_CASE("single-token feature has single-token support") {
  // Feature 0 reads coordinate 0, which only the apostrophe token carries.
  Matrix data = Matrix::Zero(6, 2);
  std::vector<std::string> tokens = {"a", "\xe2\x80\x99", "b", "\xe2\x80\x99", "c", "d"};
  data(1, 0) = 0.7f;
  data(3, 0) = 1.4f;
  data.col(1).setConstant(1.0f);
  auto h = token_histogram(0, tied(Matrix::Identity(2, 2)), data, tokens, 10);
  CHECK(h.counts.size() == 1);
  CHECK(h.counts.count("\xe2\x80\x99") == 1);
  CHECK(h.total() == 2);
  CHECK(h.max_activation == doctest::Approx(1.4));
}

TEST_CASE("property: histogram total equals the positive count") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t n = std::uniform_int_distribution<std::size_t>(1, 200)(rng);
    Index bins = std::uniform_int_distribution<Index>(1, 12)(rng);
    std::vector<float> acts(n);
    std::vector<std::string> toks(n);
    std::uint64_t positive = 0;
    std::uniform_real_distribution<float> u(-1, 3);
    for (std::size_t i = 0; i < n; ++i) {
      acts[i] = std::max(0.0f, u(rng));
      toks[i] = std::string(1, char('a' + rng() % 5));
      positive += acts[i] > 0;
    }
    auto h = token_histogram_from_activations(0, acts, toks, bins);
    CHECK(h.total() == positive);
    for (std::size_t b = 1; b < h.bin_edges.size(); ++b) CHECK(h.bin_edges[b] > h.bin_edges[b - 1]);
    if (positive) CHECK(h.bin_edges.back() == doctest::Approx(h.max_activation));
  }
}

TEST_CASE("logit effect examples") {
  auto dict = tied(Matrix::Identity(3, 3));
  Matrix unembed = Matrix::Identity(3, 3);
  Vector x(3);
  x << 2, 0.5f, -1;
  Vector diff = logit_effect(0, dict, x, unembed);
  CHECK(diff(0) == doctest::Approx(-2.0));
  CHECK(diff(1) == 0.0f);
  CHECK(diff(2) == 0.0f);
  CHECK(logit_effect(2, dict, x, unembed).isZero());  // c_f = 0
  CHECK_THROWS_AS(logit_effect(0, dict, x, Matrix::Identity(3, 2)), DimensionError);
}

TEST_CASE("property: logit effect norm and linearity") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix rows = testing::gaussian(5, 4, rng());
    for (Index i = 0; i < 5; ++i) rows.row(i).normalize();
    Dictionary dict = tied(rows);
    Matrix unembed = testing::gaussian(7, 4, rng());
    Index f = static_cast<Index>(rng() % 5);
    Vector x = rows.row(f).transpose() * (0.5f + float(rng() % 100) / 50.0f);
    double cf = sae::encode(dict, x)(f);
    Vector diff = logit_effect(f, dict, x, unembed);
    double expected = cf * (unembed * rows.row(f).transpose()).norm();
    CHECK(diff.norm() == doctest::Approx(expected).epsilon(1e-5));
    Vector diff2 = logit_effect(f, dict, 2.0f * x, unembed);
    CHECK((diff2 - 2.0f * diff).norm() <= 1e-4f * (1 + diff.norm()));
  }
}

TEST_CASE("unembed_feature ranking") {
  std::vector<std::string> vocab = {"a", "b", "c", "d"};
  auto dict = tied(Matrix::Identity(4, 4));
  auto top = unembed_feature(2, dict, Matrix::Identity(4, 4), vocab, 1);
  CHECK(top[0].token == "c");
  CHECK(top[0].token_id == 2);

  Matrix unembed = testing::gaussian(10, 4, 3);
  std::vector<std::string> v10;
  for (int i = 0; i < 10; ++i) v10.push_back("t" + std::to_string(i));
  Matrix rows = testing::gaussian(2, 4, 4);
  auto ranked = unembed_feature(1, tied(rows), unembed, v10, 10);
  Matrix scaled_rows = rows;
  scaled_rows.row(1) *= 2.0f;
  auto ranked2 = unembed_feature(1, tied(scaled_rows), unembed, v10, 10);

  std::vector<std::pair<double, Index>> brute;
  for (Index t = 0; t < 10; ++t) brute.push_back({-double(unembed.row(t).dot(rows.row(1))), t});
  std::sort(brute.begin(), brute.end());
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(ranked[i].token_id == brute[i].second);
    CHECK(ranked2[i].token_id == ranked[i].token_id);
  }
  CHECK_THROWS_AS(unembed_feature(1, tied(rows), unembed, v10, 11), ArgumentError);
}

TEST_CASE("unembed ties go to the lower token id") {
  Matrix unembed(3, 1);
  unembed << 1, 2, 2;
  auto ranked = unembed_feature(0, tied(Matrix::Ones(1, 1)), unembed, {"x", "y", "z"}, 3);
  CHECK(ranked[0].token_id == 1);
  CHECK(ranked[1].token_id == 2);
  CHECK(ranked[2].token_id == 0);
}
