#include "sparsedict/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

#include "sparsedict/sae.hpp"

namespace sparsedict::patching {

ToyOracle::ToyOracle(Matrix unembed) : unembed_(std::move(unembed)) {
  if (unembed_.rows() < 2 || unembed_.cols() < 1) {
    throw DimensionError("toy oracle needs at least 2 logits and d_in >= 1");
  }
}

Vector ToyOracle::forward(const Matrix& activations) const {
  if (activations.cols() != unembed_.cols()) throw DimensionError("activation width mismatch");
  if (activations.rows() == 0) throw DimensionError("toy oracle needs at least one position");
  VectorD pooled = activations.cast<double>().colwise().mean().transpose();
  return (unembed_.cast<double>() * pooled).cast<float>();
}

PatchCase make_patch_case(Matrix base, Matrix target, const Dictionary& dict,
                          const ModelOracle& oracle) {
  if (base.rows() != target.rows() || base.cols() != target.cols()) {
    throw DimensionError("base and target activations differ in shape");
  }
  if (base.cols() != oracle.d_in()) throw DimensionError("oracle width does not match activations");
  PatchCase out;
  out.base_codes = sae::encode_batch(dict, base);
  out.target_codes = sae::encode_batch(dict, target);
  out.target_logits = oracle.forward(target);
  out.base = std::move(base);
  out.target = std::move(target);
  return out;
}

namespace {

std::vector<Index> unique_features(std::span<const Index> features, Index d_hid) {
  std::set<Index> seen;
  for (Index f : features) {
    if (f < 0 || f >= d_hid) {
      throw DimensionError("feature index " + std::to_string(f) + " out of range [0, " +
                           std::to_string(d_hid) + ")");
    }
    seen.insert(f);
  }
  return {seen.begin(), seen.end()};
}

}  // namespace

Matrix patch_activations(const PatchCase& patch, const Dictionary& dict,
                         std::span<const Index> features) {
  auto set = unique_features(features, dict.d_hid());
  if (patch.base_codes.cols() != dict.d_hid() || patch.target_codes.cols() != dict.d_hid() ||
      patch.base.cols() != dict.d_in()) {
    throw DimensionError("patch case does not match the dictionary");
  }
  Matrix out = patch.base;
  const Matrix& rows = dict.decoder_rows();
  for (Index j : set) {
    Vector delta = patch.target_codes.col(j) - patch.base_codes.col(j);
    out.noalias() += delta * rows.row(j);
  }
  return out;
}

double kl_divergence(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& y) {
  if (z.size() != y.size()) throw DimensionError("logit vectors differ in length");
  if (z.size() < 2) throw DimensionError("need at least 2 logits");
  if (!z.allFinite() || !y.allFinite()) throw ValidationError("logits must be finite");
  VectorD zd = z.cast<double>();
  VectorD yd = y.cast<double>();
  auto log_softmax = [](const VectorD& v) {
    double m = v.maxCoeff();
    double lse = m + std::log((v.array() - m).exp().sum());
    return VectorD(v.array() - lse);
  };
  VectorD lz = log_softmax(zd);
  VectorD ly = log_softmax(yd);
  double kl = (lz.array().exp() * (lz - ly).array()).sum();
  return std::max(0.0, kl);
}

PatchResult evaluate_patch(const PatchCase& patch, const Dictionary& dict,
                           std::span<const Index> features, const ModelOracle& oracle) {
  PatchResult result;
  result.features = unique_features(features, dict.d_hid());
  Matrix patched = patch_activations(patch, dict, result.features);
  result.logits = oracle.forward(patched);
  result.kl = kl_divergence(result.logits, patch.target_logits);
  result.edit_magnitude =
      (patched - patch.base).cast<double>().rowwise().norm().mean();
  return result;
}

namespace {

struct Means {
  double kl = 0.0;
  double edit = 0.0;
};

Means mean_over_cases(const std::vector<PatchCase>& cases, const Dictionary& dict,
                      std::span<const Index> features, const ModelOracle& oracle) {
  Means m;
  for (const auto& c : cases) {
    auto r = evaluate_patch(c, dict, features, oracle);
    m.kl += r.kl;
    m.edit += r.edit_magnitude;
  }
  m.kl /= static_cast<double>(cases.size());
  m.edit /= static_cast<double>(cases.size());
  return m;
}

}  // namespace

double mean_kl(const std::vector<PatchCase>& cases, const Dictionary& dict,
               std::span<const Index> features, const ModelOracle& oracle) {
  if (cases.empty()) throw ArgumentError("no patch cases");
  return mean_over_cases(cases, dict, features, oracle).kl;
}

Ordering greedy_feature_ordering(const std::vector<PatchCase>& cases, const Dictionary& dict,
                                 const ModelOracle& oracle, std::vector<Index> candidates,
                                 OrderingMode mode, std::size_t budget) {
  if (cases.empty()) throw ArgumentError("no patch cases");
  candidates = unique_features(candidates, dict.d_hid());
  if (candidates.empty()) throw ArgumentError("candidate set is empty");
  if (budget < 1 || budget > candidates.size()) {
    throw ArgumentError("budget must lie in [1, number of candidates]");
  }

  Ordering out;
  std::vector<Index> chosen;
  auto empty = mean_over_cases(cases, dict, chosen, oracle);
  out.mean_kl.push_back(empty.kl);
  out.mean_edit.push_back(empty.edit);

  if (mode == OrderingMode::independent) {
    out.singleton_reduction.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      Index single[] = {candidates[i]};
      out.singleton_reduction[i] = empty.kl - mean_over_cases(cases, dict, single, oracle).kl;
    }
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return out.singleton_reduction[a] > out.singleton_reduction[b];
    });
    for (std::size_t n = 0; n < budget; ++n) {
      chosen.push_back(candidates[order[n]]);
      auto m = mean_over_cases(cases, dict, chosen, oracle);
      out.mean_kl.push_back(m.kl);
      out.mean_edit.push_back(m.edit);
    }
  } else {
    std::vector<bool> used(candidates.size(), false);
    for (std::size_t n = 0; n < budget; ++n) {
      std::size_t best = candidates.size();
      Means best_means;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (used[i]) continue;
        chosen.push_back(candidates[i]);
        auto m = mean_over_cases(cases, dict, chosen, oracle);
        chosen.pop_back();
        if (best == candidates.size() || m.kl < best_means.kl) {
          best = i;
          best_means = m;
        }
      }
      used[best] = true;
      chosen.push_back(candidates[best]);
      out.mean_kl.push_back(best_means.kl);
      out.mean_edit.push_back(best_means.edit);
    }
  }
  out.features = chosen;
  return out;
}

Vector ablate_feature(const Eigen::Ref<const Vector>& x, const Dictionary& dict, Index feature) {
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  Vector c = sae::encode(dict, x);
  return x - c(feature) * dict.decoder_rows().row(feature).transpose();
}

Matrix ablate_feature_batch(const Matrix& x, const Dictionary& dict, Index feature) {
  if (feature < 0 || feature >= dict.d_hid()) throw DimensionError("feature index out of range");
  Matrix codes = sae::encode_batch(dict, x);
  Matrix out = x;
  out.noalias() -= codes.col(feature) * dict.decoder_rows().row(feature);
  return out;
}

namespace {

struct Contexts {
  std::vector<Index> rows;
  double max_activation = 0.0;
};

Contexts find_contexts(const Dictionary& dict, const Matrix& data, Index feature,
                       std::size_t max_contexts) {
  Vector acts = sae::encode_batch(dict, data).col(feature);
  Contexts ctx;
  ctx.max_activation = acts.size() ? acts.maxCoeff() : 0.0f;
  if (!(ctx.max_activation > 0)) return ctx;
  const double lo = ctx.max_activation / 2;
  for (Index i = 0; i < acts.size(); ++i) {
    if (acts(i) >= lo && acts(i) <= ctx.max_activation) ctx.rows.push_back(i);
  }
  std::stable_sort(ctx.rows.begin(), ctx.rows.end(),
                   [&](Index a, Index b) { return acts(a) > acts(b); });
  if (ctx.rows.size() > max_contexts) ctx.rows.resize(max_contexts);
  return ctx;
}

CausalTreeNode expand(Index layer, Index feature, double effect, const std::vector<Dictionary>& dicts,
                      const std::vector<Matrix>& data, const LayerTransition& propagate,
                      const CausalTreeOptions& options, std::size_t depth, bool is_root) {
  CausalTreeNode node;
  node.layer = layer;
  node.feature = feature;
  node.effect = effect;
  const auto& dict = dicts[static_cast<std::size_t>(layer)];
  auto ctx = find_contexts(dict, data[static_cast<std::size_t>(layer)], feature, options.max_contexts);
  node.max_activation = ctx.max_activation;
  node.n_contexts = static_cast<std::int64_t>(ctx.rows.size());
  if (ctx.rows.empty()) {
    if (is_root) {
      throw ArgumentError("feature " + std::to_string(feature) + " at layer " +
                          std::to_string(layer) + " never activates; no qualifying contexts");
    }
    return node;
  }
  if (layer == 0 || depth == 0) return node;

  const auto& prev_dict = dicts[static_cast<std::size_t>(layer - 1)];
  const auto& prev_data = data[static_cast<std::size_t>(layer - 1)];
  Matrix prev(static_cast<Index>(ctx.rows.size()), prev_data.cols());
  for (std::size_t r = 0; r < ctx.rows.size(); ++r) prev.row(static_cast<Index>(r)) = prev_data.row(ctx.rows[r]);

  auto target_activation = [&](const Matrix& upstream) {
    Matrix next = propagate(layer - 1, upstream);
    if (next.rows() != upstream.rows() || next.cols() != dict.d_in()) {
      throw DimensionError("layer transition returned the wrong shape");
    }
    return Vector(sae::encode_batch(dict, next).col(feature));
  };
  Vector baseline = target_activation(prev);
  Matrix prev_codes = sae::encode_batch(prev_dict, prev);
  const Matrix& prev_rows = prev_dict.decoder_rows();

  std::vector<double> effects(static_cast<std::size_t>(prev_dict.d_hid()), 0.0);
  for (Index j = 0; j < prev_dict.d_hid(); ++j) {
    if (!(prev_codes.col(j).array() > 0.0f).any()) continue;  // ablation is a no-op
    Matrix ablated = prev;
    ablated.noalias() -= prev_codes.col(j) * prev_rows.row(j);
    effects[static_cast<std::size_t>(j)] =
        (baseline - target_activation(ablated)).cast<double>().mean();
  }

  std::vector<Index> order(effects.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return effects[static_cast<std::size_t>(a)] > effects[static_cast<std::size_t>(b)];
  });
  const std::size_t n_children = std::min(options.fanout, order.size());
  for (std::size_t i = 0; i < n_children; ++i) {
    Index j = order[i];
    node.children.push_back(expand(layer - 1, j, effects[static_cast<std::size_t>(j)], dicts, data,
                                   propagate, options, depth - 1, false));
  }
  return node;
}

}  // namespace

CausalTreeNode build_causal_tree(Index layer, Index feature, const std::vector<Dictionary>& dicts,
                                 const std::vector<Matrix>& data, const LayerTransition& propagate,
                                 const CausalTreeOptions& options) {
  if (dicts.size() != data.size()) throw DimensionError("need one dataset per layer dictionary");
  if (layer < 0 || static_cast<std::size_t>(layer) >= dicts.size()) {
    throw DimensionError("layer index out of range");
  }
  for (std::size_t l = 0; l < dicts.size(); ++l) {
    dicts[l].validate();
    if (data[l].cols() != dicts[l].d_in()) {
      throw DimensionError("layer " + std::to_string(l) + " data width does not match dictionary");
    }
    if (data[l].rows() != data[0].rows()) throw DimensionError("layer datasets are not aligned");
  }
  if (feature < 0 || feature >= dicts[static_cast<std::size_t>(layer)].d_hid()) {
    throw DimensionError("feature index out of range");
  }
  if (options.max_contexts < 1 || options.fanout < 1) {
    throw ArgumentError("max_contexts and fanout must be positive");
  }
  return expand(layer, feature, 0.0, dicts, data, propagate, options, options.depth, true);
}

}  // namespace sparsedict::patching
