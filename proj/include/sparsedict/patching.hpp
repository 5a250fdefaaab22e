#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sparsedict/dictionary.hpp"
#include "sparsedict/types.hpp"

namespace sparsedict::patching {

// The part of a model downstream of the intervention layer: activations at
// k positions (k x d_in) -> output logits. Implementations must be pure.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;
  virtual Vector forward(const Matrix& activations) const = 0;
  virtual Index d_in() const = 0;
};

// logits = unembed * (mean of the position rows).
class ToyOracle : public ModelOracle {
 public:
  explicit ToyOracle(Matrix unembed);
  Vector forward(const Matrix& activations) const override;
  Index d_in() const override { return unembed_.cols(); }
  const Matrix& unembed() const { return unembed_; }

 private:
  Matrix unembed_;
};

struct PatchCase {
  Matrix base;             // k x d_in
  Matrix target;           // k x d_in
  Vector target_logits;    // y
  Matrix base_codes;       // c, k x d_hid
  Matrix target_codes;     // c-bar, k x d_hid
};

PatchCase make_patch_case(Matrix base, Matrix target, const Dictionary& dict,
                          const ModelOracle& oracle);

// x'_i = x_i + sum_{j in F} (cbar_ij - c_ij) f_j at every position i.
// Duplicate indices count once; an empty set returns the base unchanged.
Matrix patch_activations(const PatchCase& patch, const Dictionary& dict,
                         std::span<const Index> features);

// KL(softmax(z) || softmax(y)) in double with log-sum-exp stabilization.
double kl_divergence(const Eigen::Ref<const Vector>& z, const Eigen::Ref<const Vector>& y);

struct PatchResult {
  std::vector<Index> features;
  double kl = 0.0;
  double edit_magnitude = 0.0;  // mean over positions of ||x'_i - x_i||
  Vector logits;                // z
};

PatchResult evaluate_patch(const PatchCase& patch, const Dictionary& dict,
                           std::span<const Index> features, const ModelOracle& oracle);

enum class OrderingMode { independent, greedy };

struct Ordering {
  std::vector<Index> features;       // first `budget` features in order
  std::vector<double> mean_kl;       // entry n: mean KL after patching the first n features
  std::vector<double> mean_edit;     // same indexing, mean edit magnitude
  std::vector<double> singleton_reduction;  // independent mode: per candidate, in candidate order
};

// independent: rank candidates once by the mean-KL reduction of patching each
// alone. greedy: repeatedly add the candidate that most lowers the mean KL of
// the accumulated set. Ties go to the lower feature index.
Ordering greedy_feature_ordering(const std::vector<PatchCase>& cases, const Dictionary& dict,
                                 const ModelOracle& oracle, std::vector<Index> candidates,
                                 OrderingMode mode, std::size_t budget);

double mean_kl(const std::vector<PatchCase>& cases, const Dictionary& dict,
               std::span<const Index> features, const ModelOracle& oracle);

// x - c_f f, with c_f the encoder's own activation for `feature`.
Vector ablate_feature(const Eigen::Ref<const Vector>& x, const Dictionary& dict, Index feature);
Matrix ablate_feature_batch(const Matrix& x, const Dictionary& dict, Index feature);

// Maps activations at layer `from_layer` (rows) to activations at from_layer + 1.
using LayerTransition = std::function<Matrix(Index from_layer, const Matrix& activations)>;

struct CausalTreeNode {
  Index layer = 0;
  Index feature = 0;
  double effect = 0.0;          // mean decrease of the parent's activation when ablated
  double max_activation = 0.0;  // over the dataset at this layer
  std::int64_t n_contexts = 0;
  std::vector<CausalTreeNode> children;  // effects nonincreasing
};

struct CausalTreeOptions {
  std::size_t depth = 1;
  std::size_t fanout = 3;
  std::size_t max_contexts = 20;
};

// Contexts are the highest-activating rows with activation in [M/2, M],
// M the target's maximum over `data[layer]`. Rows of data[l] are aligned
// across layers. Throws ArgumentError if the target never activates.
CausalTreeNode build_causal_tree(Index layer, Index feature, const std::vector<Dictionary>& dicts,
                                 const std::vector<Matrix>& data, const LayerTransition& propagate,
                                 const CausalTreeOptions& options);

}  // namespace sparsedict::patching
