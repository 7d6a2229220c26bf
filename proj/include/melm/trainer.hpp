#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "melm/data.hpp"
#include "melm/model.hpp"

namespace melm {

/// Learning rate `lr` for epochs [first, last], 1-based and inclusive.
struct LrPhase {
  int first = 1;
  int last = 1;
  double lr = 0.0;
  bool operator==(const LrPhase&) const = default;
};

/// Ablation tiers, from entropy-only discovery up to accumulated recurrent learning.
enum class Ablation { base, clique, d, l, l_rl, l_arl };

Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);

struct TrainConfig {
  int epochs = 20;
  std::vector<LrPhase> lr_schedule = default_schedule(20, 5e-3, 5e-4);
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 1;
  double lambda = 1.0;
  double tau = 0.7;
  int top_k = 200;
  double kernel_a = 4.0;
  int num_loc_branches = 3;
  std::uint64_t seed = 7;
  int hidden_dim = 0;
  bool shared_hidden = true;  // false: localization gradients stop at the heads
  double init_scale = 0.01;

  // Ablation switches.
  bool use_cliques = true;
  bool use_localization = true;
  bool recurrent = true;
  Head::Kind score_head = Head::Kind::localization;

  void validate() const;
  double learning_rate(int epoch) const;
  Head scoring_head() const;
  void apply_ablation(Ablation a);

  /// 75% of epochs at `lr`, the rest at `lr_late`.
  static std::vector<LrPhase> default_schedule(int epochs, double lr, double lr_late);
};

struct EpochReport {
  int epoch = 0;
  double disc_loss = 0.0;
  std::vector<double> loc_loss;  // per branch
  double global_entropy = 0.0;
  double local_entropy = 0.0;
  double loc_accuracy = 0.0;
  double loc_variance = 0.0;
  double seconds = 0.0;

  /// Equality on every field except wall time.
  bool same_values(const EpochReport& other) const;
};

std::string epoch_csv_header(int branches);
std::string epoch_csv_row(const EpochReport& r);

struct TrainState {
  ModelParams params;
  ModelParams momentum;
  std::map<std::string, Vector> object_scores;  // s(h) per bag id
  int epoch = 0;                                // completed epochs
  std::mt19937_64 rng;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// buffer = momentum * buffer + grad + weight_decay * param; param -= lr * buffer.
void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& buffers, double lr, double momentum,
              double weight_decay);

TrainState init_state(const TrainingSet& ts, const TrainConfig& cfg);

/// Visiting order for one epoch: bags are grouped by label vector, each group is shuffled and
/// interleaved evenly with the others so no label runs long.
std::vector<std::size_t> epoch_order(const TrainingSet& ts, std::mt19937_64& rng);

using EpochCallback = std::function<void(const EpochReport&, const TrainState&)>;

/// Runs epochs state.epoch+1 .. until_epoch. `ground_truth` (aligned with ts.bags) is read only
/// for the localization diagnostics in the reports.
std::vector<EpochReport> train_epochs(const TrainingSet& ts, const TrainConfig& cfg, TrainState& state, int until_epoch,
                                      const GroundTruthTable* ground_truth = nullptr,
                                      const EpochCallback& on_epoch = {});

struct TrainResult {
  ModelParams params;
  std::vector<EpochReport> reports;
  TrainState state;
};

TrainResult train(const TrainingSet& ts, const TrainConfig& cfg, const GroundTruthTable* ground_truth = nullptr);

// Per-bag building blocks, exposed for inspection tooling.

/// Objectness per proposal: max over the positive classes of the discovery softmax.
std::vector<double> objectness(const ProbMatrix& discovery_probs, std::span<const int> positives);

// Checkpoints.

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

inline constexpr int kCheckpointVersion = 1;

std::string checkpoint_to_json(const TrainConfig& cfg, const TrainState& state);
Checkpoint checkpoint_from_json(const std::string& text, std::optional<int> expected_feature_dim = {});
void save_checkpoint(const TrainConfig& cfg, const TrainState& state, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_feature_dim = {});

}  // namespace melm
