#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "melm/geometry.hpp"
#include "melm/types.hpp"

namespace melm {

struct Proposal {
  BoxD box;
  Vector feature;
};

/// Evaluation-only annotation. Never reaches the trainer through TrainingBag.
struct GroundTruth {
  int class_index = 0;
  BoxD box;
};

struct Bag {
  std::string id;
  std::vector<Proposal> proposals;
  std::vector<int> labels;  // 0/1 per class
  std::optional<std::vector<GroundTruth>> ground_truth;

  FeatureMatrix feature_matrix() const;
  std::vector<BoxD> boxes() const;
  std::vector<int> positive_classes() const;
};

struct Dataset {
  std::vector<std::string> classes;
  int feature_dim = 0;
  std::vector<Bag> bags;

  int num_classes() const { return static_cast<int>(classes.size()); }
  const Bag* find(const std::string& id) const;
};

/// Raised for schema or invariant violations; the message names the bag and field.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws DataError on the first violated invariant.
void validate(const Dataset& ds);

Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

std::string dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const std::string& text);

// Training view: what the optimizer is allowed to see.

struct TrainingBag {
  std::string id;
  std::vector<BoxD> boxes;
  FeatureMatrix features;
  std::vector<int> labels;
  std::vector<int> positives;
};

struct TrainingSet {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<TrainingBag> bags;
};

TrainingSet training_view(const Dataset& ds);

/// Ground truth aligned with Dataset::bags by index; empty entry when a bag has none.
using GroundTruthTable = std::vector<std::vector<GroundTruth>>;
GroundTruthTable ground_truth_table(const Dataset& ds);
bool has_ground_truth(const Dataset& ds);

// Synthetic generator.

struct SynthConfig {
  int num_classes = 2;
  int bags_per_class = 50;
  int negatives = 25;
  int proposals_per_bag = 30;
  int feature_dim = 24;
  double part_fraction = 0.4;
  double noise_sigma = 0.1;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Positive bags carry exactly one object of one class; negatives carry only background.
/// Throws DataError when the geometry cannot be satisfied within the retry budget.
Dataset generate_synthetic(const SynthConfig& cfg);

}  // namespace melm
