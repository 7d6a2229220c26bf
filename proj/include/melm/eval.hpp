#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "melm/data.hpp"
#include "melm/model.hpp"

namespace melm {

struct Detection {
  std::string bag_id;
  int class_index = 0;
  BoxD box;
  double score = 0.0;
};

/// A ground truth box tagged with the bag it belongs to, for cross-bag matching.
struct LabeledBox {
  std::string bag_id;
  BoxD box;
};

struct EvalSettings {
  double nms_iou = 0.4;
  double score_floor = 1e-3;
  double ap_iou = 0.5;
};

/// Per-proposal class probabilities from `head` with unscaled features.
ProbMatrix proposal_probabilities(const ModelParams& params, const FeatureMatrix& features, Head head);

/// Per class: drop proposals below the floor, then per-class NMS.
std::vector<Detection> detect(const ModelParams& params, Head head, const Bag& bag, double nms_iou, double score_floor);

/// All-points interpolated AP with greedy matching inside each bag. Sorts internally.
/// `undefined` (optional) is set when there are neither detections nor ground truths.
double average_precision(std::span<const Detection> detections, std::span<const LabeledBox> ground_truths,
                         double iou_threshold = 0.5, bool* undefined = nullptr);

struct LocalizationStats {
  double accuracy = 0.0;
  double variance = 0.0;
  bool uniform_fallback = false;  // all probabilities were zero
};

/// Probability-weighted mean and variance of each proposal's best overlap with the class's boxes.
LocalizationStats localization_stats(std::span<const double> probs, std::span<const BoxD> boxes,
                                     std::span<const BoxD> gts);

/// Index of the highest-probability proposal for `cls`; ties go to the lower index.
std::size_t top_proposal(const ProbMatrix& probs, int cls);

struct CorLocResult {
  std::vector<double> per_class;  // NaN when a class has no positive bag
  std::vector<int> positives;     // positive bags per class
  double mean = 0.0;
};

CorLocResult corloc(const ModelParams& params, Head head, const Dataset& ds);
double pointing(const ModelParams& params, Head head, const Dataset& ds);

struct MetricsReport {
  std::vector<std::string> classes;
  std::vector<double> ap;
  double map = 0.0;
  double map_50_95 = 0.0;
  std::vector<double> corloc;
  double mean_corloc = 0.0;
  double pointing = 0.0;
  double loc_accuracy = 0.0;
  double loc_variance = 0.0;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

/// Requires ground truth on every positive bag; throws std::runtime_error otherwise.
MetricsReport evaluate(const ModelParams& params, Head head, const Dataset& ds, const EvalSettings& settings = {});

}  // namespace melm
