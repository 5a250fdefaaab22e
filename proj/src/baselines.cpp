#include "sparsedict/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>

#include "sparsedict/random.hpp"

namespace sparsedict::baselines {

std::string to_string(DirectionKind kind) {
  switch (kind) {
    case DirectionKind::pca: return "pca";
    case DirectionKind::ica: return "ica";
    case DirectionKind::random: return "random";
    case DirectionKind::neuron_basis: return "neuron_basis";
    case DirectionKind::learned: return "learned";
  }
  return "learned";
}

DirectionKind direction_kind_from_string(const std::string& name) {
  if (name == "pca") return DirectionKind::pca;
  if (name == "ica") return DirectionKind::ica;
  if (name == "random") return DirectionKind::random;
  if (name == "neuron" || name == "neuron_basis") return DirectionKind::neuron_basis;
  if (name == "learned") return DirectionKind::learned;
  throw ArgumentError("unknown direction kind '" + name + "'");
}

CovarianceAccumulator::CovarianceAccumulator(Index dim)
    : mean_(VectorD::Zero(dim)), scatter_(MatrixD::Zero(dim, dim)) {
  if (dim < 1) throw DimensionError("dimension must be at least 1");
}

void CovarianceAccumulator::add(const Matrix& batch) {
  if (batch.cols() != dim()) throw DimensionError("batch dimension mismatch");
  if (batch.rows() == 0) return;
  MatrixD x = batch.cast<double>();
  VectorD batch_mean = x.colwise().mean().transpose();
  x.rowwise() -= batch_mean.transpose();
  MatrixD batch_scatter = x.transpose() * x;

  const auto na = static_cast<double>(count_);
  const auto nb = static_cast<double>(batch.rows());
  const double n = na + nb;
  VectorD delta = batch_mean - mean_;
  scatter_ += batch_scatter + (delta * delta.transpose()) * (na * nb / n);
  mean_ += delta * (nb / n);
  count_ += static_cast<std::uint64_t>(batch.rows());
}

MatrixD CovarianceAccumulator::covariance() const {
  if (count_ == 0) return MatrixD::Zero(dim(), dim());
  return scatter_ / static_cast<double>(count_);
}

void canonicalize_signs(Matrix& rows, Matrix* companion) {
  for (Index i = 0; i < rows.rows(); ++i) {
    Index arg = 0;
    rows.row(i).cwiseAbs().maxCoeff(&arg);
    if (rows(i, arg) < 0) {
      rows.row(i) *= -1.0f;
      if (companion) companion->row(i) *= -1.0f;
    }
  }
}

namespace {

// Eigenpairs of a symmetric matrix, largest eigenvalue first.
std::pair<VectorD, MatrixD> sorted_eigen(const MatrixD& sym) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  if (solver.info() != Eigen::Success) throw Error("eigendecomposition failed");
  const Index n = sym.rows();
  VectorD values(n);
  MatrixD vectors(n, n);
  for (Index i = 0; i < n; ++i) {
    values(i) = solver.eigenvalues()(n - 1 - i);
    vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
  }
  return {values, vectors};
}

// (W W^T)^{-1/2} W
MatrixD symmetric_decorrelation(const MatrixD& w) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(w * w.transpose());
  VectorD inv_sqrt = solver.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return solver.eigenvectors() * inv_sqrt.asDiagonal() * solver.eigenvectors().transpose() * w;
}

}  // namespace

DirectionSet pca_from_accumulator(const CovarianceAccumulator& acc, Index n_components) {
  if (n_components < 1 || n_components > acc.dim()) {
    throw ArgumentError("n_components must lie in [1, d_in]");
  }
  if (acc.count() < static_cast<std::uint64_t>(n_components)) {
    throw ArgumentError("fewer samples than requested components");
  }
  auto [values, vectors] = sorted_eigen(acc.covariance());
  DirectionSet out;
  out.kind = DirectionKind::pca;
  out.mean = acc.mean().cast<float>();
  out.directions = vectors.leftCols(n_components).transpose().cast<float>();
  normalize_rows(out.directions);
  canonicalize_signs(out.directions);
  out.explained_variance = values.head(n_components).cwiseMax(0.0).cast<float>();
  return out;
}

DirectionSet fit_pca_online(DatasetReader& reader, Index n_components) {
  CovarianceAccumulator acc(reader.d_in());
  reader.rewind();
  Matrix batch;
  while (reader.next(batch)) acc.add(batch);
  return pca_from_accumulator(acc, n_components);
}

DirectionSet fit_pca(const Matrix& data, Index n_components, Index batch_size) {
  CovarianceAccumulator acc(data.cols());
  for (Index start = 0; start < data.rows(); start += batch_size) {
    acc.add(data.middleRows(start, std::min(batch_size, data.rows() - start)));
  }
  return pca_from_accumulator(acc, n_components);
}

DirectionSet fit_ica(const Matrix& data, const IcaConfig& config) {
  const Index k = config.n_components;
  const Index d = data.cols();
  if (k < 1 || k > d) throw ArgumentError("n_components must lie in [1, d_in]");
  if (data.rows() < 10 * k) throw ArgumentError("ICA needs at least 10 samples per component");
  if (config.max_iter < 1 || !(config.tol > 0)) throw ArgumentError("invalid ICA iteration settings");

  MatrixD x = data.cast<double>();
  VectorD mean = x.colwise().mean().transpose();
  x.rowwise() -= mean.transpose();
  const auto n = static_cast<double>(x.rows());
  auto [values, vectors] = sorted_eigen((x.transpose() * x) / n);
  if (values(k - 1) <= 1e-12 * std::max(values(0), 1e-300)) {
    throw ArgumentError("data covariance is rank deficient for the requested components");
  }
  MatrixD basis = vectors.leftCols(k);                       // d x k
  VectorD scale = values.head(k).cwiseSqrt();                 // sqrt eigenvalues
  MatrixD whitening = scale.cwiseInverse().asDiagonal() * basis.transpose();  // k x d
  MatrixD z = x * whitening.transpose();                      // n x k

  Rng rng(config.seed);
  std::normal_distribution<double> normal;
  MatrixD w(k, k);
  for (Index i = 0; i < k; ++i) {
    for (Index j = 0; j < k; ++j) w(i, j) = normal(rng);
  }
  w = symmetric_decorrelation(w);

  DirectionSet out;
  out.kind = DirectionKind::ica;
  out.converged = false;
  for (std::int64_t it = 1; it <= config.max_iter; ++it) {
    MatrixD u = z * w.transpose();                 // n x k
    MatrixD g = u.array().tanh().matrix();
    VectorD g_prime_mean = (1.0 - g.array().square()).colwise().mean().transpose();
    MatrixD w_new = (g.transpose() * z) / n - g_prime_mean.asDiagonal() * w;
    w_new = symmetric_decorrelation(w_new);
    double lim = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = w_new;
    out.iterations = it;
    if (lim < config.tol) {
      out.converged = true;
      break;
    }
  }

  MatrixD unmixing = w * whitening;                                 // k x d
  MatrixD mixing = basis * scale.asDiagonal() * w.transpose();      // d x k
  Matrix directions(k, d);
  Matrix decoder(k, d);
  for (Index i = 0; i < k; ++i) {
    double norm = unmixing.row(i).norm();
    directions.row(i) = (unmixing.row(i) / norm).cast<float>();
    decoder.row(i) = (mixing.col(i).transpose() * norm).cast<float>();
  }
  canonicalize_signs(directions, &decoder);
  out.directions = std::move(directions);
  out.decoder = std::move(decoder);
  out.mean = mean.cast<float>();
  return out;
}

DirectionSet make_fixed_directions(DirectionKind kind, Index d_in, Index k, std::uint64_t seed) {
  if (d_in < 1 || k < 1) throw ArgumentError("d_in and k must be positive");
  DirectionSet out;
  out.kind = kind;
  out.mean = Vector::Zero(d_in);
  if (kind == DirectionKind::neuron_basis) {
    if (k != d_in) throw ArgumentError("neuron basis requires k == d_in");
    out.directions = Matrix::Identity(d_in, d_in);
  } else if (kind == DirectionKind::random) {
    Rng rng(seed);
    out.directions = random_unit_rows(k, d_in, rng);
  } else {
    throw ArgumentError("fixed directions are only random or neuron_basis");
  }
  return out;
}

void apply_topk(Matrix& codes, Index k_active) {
  if (k_active < 1) throw ArgumentError("K must be positive");
  if (k_active > codes.cols()) throw ArgumentError("K exceeds the number of directions");
  if (k_active == codes.cols()) return;
  std::vector<Index> order(static_cast<std::size_t>(codes.cols()));
  for (Index r = 0; r < codes.rows(); ++r) {
    std::iota(order.begin(), order.end(), Index{0});
    auto row = codes.row(r);
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return row(a) > row(b); });
    for (std::size_t i = static_cast<std::size_t>(k_active); i < order.size(); ++i) {
      row(order[i]) = 0.0f;
    }
  }
}

Matrix project_linear_batch(const DirectionSet& dirs, const Matrix& x) {
  if (x.cols() != dirs.d_in()) throw DimensionError("input dimension does not match directions");
  Matrix centered = x.rowwise() - dirs.mean.transpose();
  return centered * dirs.directions.transpose();
}

Matrix project_codes_batch(const DirectionSet& dirs, const Matrix& x,
                           const std::optional<TopKConfig>& topk) {
  if (topk && (topk->k_active < 1 || topk->k_active > dirs.size())) {
    throw ArgumentError("K must lie in [1, number of directions]");
  }
  Matrix codes = project_linear_batch(dirs, x).cwiseMax(0.0f);
  if (topk) apply_topk(codes, topk->k_active);
  return codes;
}

Vector project_codes(const DirectionSet& dirs, const Eigen::Ref<const Vector>& x,
                     const std::optional<TopKConfig>& topk) {
  Matrix row = x.transpose();
  return project_codes_batch(dirs, row, topk).row(0).transpose();
}

Matrix reconstruct_batch(const DirectionSet& dirs, const Matrix& codes) {
  if (codes.cols() != dirs.size()) throw DimensionError("code width must equal direction count");
  Matrix out = codes * dirs.decoder_rows();
  out.rowwise() += dirs.mean.transpose();
  return out;
}

namespace {

DictionaryKind to_file_kind(DirectionKind kind) {
  switch (kind) {
    case DirectionKind::pca: return DictionaryKind::pca;
    case DirectionKind::ica: return DictionaryKind::ica;
    case DirectionKind::random: return DictionaryKind::random;
    case DirectionKind::neuron_basis: return DictionaryKind::neuron_basis;
    case DirectionKind::learned: return DictionaryKind::learned;
  }
  return DictionaryKind::learned;
}

}  // namespace

void write_direction_set(const DirectionSet& dirs, const fs::path& path) {
  Dictionary dict;
  dict.encoder = dirs.directions;
  dict.bias = Vector::Zero(dirs.size());
  dict.decoder = dirs.decoder;
  write_dictionary(dict, path, to_file_kind(dirs.kind), dirs.mean);
}

DirectionSet from_dictionary_file(const DictionaryFile& file) {
  DirectionSet out;
  switch (file.kind) {
    case DictionaryKind::pca: out.kind = DirectionKind::pca; break;
    case DictionaryKind::ica: out.kind = DirectionKind::ica; break;
    case DictionaryKind::random: out.kind = DirectionKind::random; break;
    case DictionaryKind::neuron_basis: out.kind = DirectionKind::neuron_basis; break;
    default: out.kind = DirectionKind::learned; break;
  }
  out.directions = file.dict.encoder;
  out.decoder = file.dict.decoder;
  out.mean = file.mean ? *file.mean : Vector::Zero(file.dict.d_in());
  return out;
}

DirectionSet read_direction_set(const fs::path& path) {
  return from_dictionary_file(read_dictionary_file(path));
}

}  // namespace sparsedict::baselines
