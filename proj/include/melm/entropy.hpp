#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "melm/geometry.hpp"
#include "melm/types.hpp"

namespace melm {

// ---------------------------------------------------------------------------
// Clique partition

struct Clique {
  std::vector<std::size_t> members;  // seed first, then absorption order
  Vector mean_scores;                // per-class mean raw score, filled by cache_mean_scores
};

/// Disjoint cliques exactly covering `pool`, the top-k proposals by objectness.
struct CliquePartition {
  std::vector<Clique> cliques;
  std::vector<std::size_t> pool;
  double tau = 0.7;

  /// Clique index holding `proposal`, or -1 when it is outside the pool.
  int clique_of(std::size_t proposal) const;
  std::size_t size() const { return cliques.size(); }
};

/// Seeds a clique with the best unassigned proposal, then absorbs every unassigned pool
/// proposal whose IoU with any member exceeds tau, until closure. Repeats until the pool is empty.
CliquePartition partition_cliques(std::span<const BoxD> boxes, std::span<const double> objectness, double tau,
                                  int top_k);

/// One clique per pool proposal. This is the no-clique ablation.
CliquePartition singleton_partition(std::span<const double> objectness, int top_k);

/// Per-clique per-class mean of raw scores (cliques x classes).
RowMatrix<double> clique_mean_scores(const CliquePartition& partition, const Scores& scores);
void cache_mean_scores(CliquePartition& partition, const Scores& scores);

// ---------------------------------------------------------------------------
// Global min-entropy (clique discovery)

/// Softmax over the whole (clique x class) table of mean scores.
ProbMatrix clique_class_probs(const CliquePartition& partition, const Scores& scores);

/// Each clique's probabilities renormalized over classes.
ProbMatrix clique_weights(const ProbMatrix& clique_probs);

/// -log sum_c w(c, cls) p(c, cls), floored inside the log.
double global_entropy(const ProbMatrix& clique_probs, const ProbMatrix& clique_weights, int cls);

/// Clique with the largest summand w(c, cls) p(c, cls); ties go to the lower index.
std::size_t select_clique(const ProbMatrix& clique_probs, const ProbMatrix& clique_weights, int cls);

struct DiscoveryOutput {
  ProbMatrix clique_probs;
  ProbMatrix clique_weights;
  ProbMatrix proposal_probs;          // per-proposal softmax over classes
  std::vector<int> selected_clique;   // per class, -1 unless the class is positive
  std::vector<double> global_entropy; // per class, 0 unless the class is positive
  double loss = 0.0;
  Scores grad;                        // dL/dScores
};

/// Positive classes contribute their global entropy; negative classes contribute
/// -sum_h log(1 - p(cls, h)) over every proposal. The partition may be empty when
/// no class is positive.
DiscoveryOutput discovery_loss(std::span<const int> labels, const CliquePartition& partition, const Scores& scores);

// ---------------------------------------------------------------------------
// Local min-entropy (object localization)

template <typename Scalar>
Scalar gaussian_kernel(Scalar overlap, Scalar a) {
  const Scalar d = Scalar(1) - overlap;
  return std::exp(-a * d * d);
}

/// w_h = (sum_j g_j p_j) / (p_h sum_j g_j), with p floored at kEpsilon.
std::vector<double> soft_weights(std::span<const double> probs, std::span<const double> ious, double a);

/// Member with the highest probability for `cls`; ties go to the lower position.
std::size_t select_object(std::span<const std::size_t> members, const ProbMatrix& proposal_probs, int cls);

/// Members whose IoU with h* is below 0.5.
std::vector<std::size_t> hard_negatives(std::span<const std::size_t> members, std::size_t h_star,
                                        std::span<const BoxD> boxes);

inline constexpr double kHardNegativeIoU = 0.5;

/// One supervised neighborhood: the clique members around a pseudo object.
struct LocalSupervision {
  int cls = 0;
  std::vector<std::size_t> members;
  std::size_t h_star = 0;
};

struct LocalTerm {
  LocalSupervision supervision;
  std::vector<double> soft_weights;   // w_h per member
  std::vector<double> pseudo_labels;  // w_h p_h per member, treated as constants
  double entropy = 0.0;
};

struct LocalizationOutput {
  ProbMatrix proposal_probs;
  std::vector<LocalTerm> terms;
  double loss = 0.0;
  Scores grad;  // dL/dScores with pseudo labels held fixed
};

/// Sum over supervisions of -sum_h (w_h p_h) log p_h. Only the log factor carries gradient.
LocalizationOutput localization_loss(std::span<const LocalSupervision> supervision, const Scores& scores,
                                     std::span<const BoxD> boxes, double kernel_a);

}  // namespace melm
