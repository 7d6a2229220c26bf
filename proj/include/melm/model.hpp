#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "melm/types.hpp"

namespace melm {

/// Affine map `input * weight + bias`, weight stored (in x out).
struct Layer {
  RowMatrix<double> weight;
  RowVector<double> bias;

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }
  bool operator==(const Layer&) const = default;
};

struct ModelDims {
  int feature_dim = 0;  // D
  int hidden_dim = 0;   // 0 disables the shared hidden layer
  int num_classes = 0;  // N
  int num_loc_branches = 1;  // B

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

/// Which scoring head to evaluate: the discovery branch or localization branch k (0-based).
struct Head {
  enum class Kind { discovery, localization };
  Kind kind = Kind::discovery;
  int branch = 0;

  static Head discovery() { return {Kind::discovery, 0}; }
  static Head localization(int k) { return {Kind::localization, k}; }
};

struct ModelParams {
  ModelDims dims;
  std::optional<Layer> hidden;
  Layer discovery;
  std::vector<Layer> loc_heads;

  const Layer& head(Head h) const;
  Layer& head(Head h);
  bool all_finite() const;
  bool operator==(const ModelParams&) const = default;

  /// Same shapes, every entry zero. Used for gradients and momentum buffers.
  ModelParams zeros_like() const;
};

/// Weights i.i.d. uniform in [-scale, scale], biases zero. Deterministic per seed.
ModelParams init_params(const ModelDims& dims, std::uint64_t seed, double scale);

/// Per-proposal head outputs (proposals x classes).
Scores forward(const ModelParams& params, const FeatureMatrix& features, Head head);

/// Gradients of one head's scores contracted with `upstream` (dL/dScores).
/// `hidden` is set only when the model has a hidden layer.
struct HeadGradient {
  Layer head;
  std::optional<Layer> hidden;
};

HeadGradient backward_head(const ModelParams& params, const FeatureMatrix& features, Head head,
                           const Scores& upstream);

/// Adds `scale * g` into the matching slots of `grads`.
void accumulate(ModelParams& grads, Head head, const HeadGradient& g, double scale = 1.0,
                bool include_hidden = true);

/// Layers in a fixed order: hidden (if any), discovery, then localization heads.
std::vector<Layer*> layers(ModelParams& p);
std::vector<const Layer*> layers(const ModelParams& p);

// Flat parameter views, used by the optimizer and checkpoint code.
std::vector<double> flatten(const ModelParams& p);
void unflatten(ModelParams& p, const std::vector<double>& flat);
std::size_t parameter_count(const ModelDims& dims);

}  // namespace melm
