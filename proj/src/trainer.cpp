#include "melm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "melm/entropy.hpp"
#include "melm/eval.hpp"
#include "melm/io.hpp"

namespace melm {

Ablation parse_ablation(const std::string& name) {
  if (name == "base") return Ablation::base;
  if (name == "clique") return Ablation::clique;
  if (name == "d") return Ablation::d;
  if (name == "l") return Ablation::l;
  if (name == "l-rl") return Ablation::l_rl;
  if (name == "l-arl") return Ablation::l_arl;
  throw std::invalid_argument("unknown ablation '" + name + "' (expected base|clique|d|l|l-rl|l-arl)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::base: return "base";
    case Ablation::clique: return "clique";
    case Ablation::d: return "d";
    case Ablation::l: return "l";
    case Ablation::l_rl: return "l-rl";
    case Ablation::l_arl: return "l-arl";
  }
  return "l-arl";
}

std::vector<LrPhase> TrainConfig::default_schedule(int epochs, double lr, double lr_late) {
  if (epochs < 1) return {};
  const int split = std::max(1, static_cast<int>(std::lround(0.75 * epochs)));
  std::vector<LrPhase> s{{1, split, lr}};
  if (split < epochs) s.push_back({split + 1, epochs, lr_late});
  return s;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (num_loc_branches < 1) throw std::invalid_argument("train: at least one localization branch is required");
  if (batch_size != 1) throw std::invalid_argument("train: only batch size 1 is supported");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("train: tau must lie in [0, 1]");
  if (top_k < 1) throw std::invalid_argument("train: top_k must be >= 1");
  if (!(kernel_a > 0.0)) throw std::invalid_argument("train: kernel_a must be positive");
  if (!(momentum >= 0.0) || !(weight_decay >= 0.0)) throw std::invalid_argument("train: momentum and weight decay must be non-negative");
  if (!(lambda >= 0.0)) throw std::invalid_argument("train: lambda must be non-negative");
  if (hidden_dim < 0) throw std::invalid_argument("train: hidden_dim must be non-negative");
  for (int e = 1; e <= epochs; ++e) {
    const auto it = std::find_if(lr_schedule.begin(), lr_schedule.end(),
                                 [e](const LrPhase& p) { return e >= p.first && e <= p.last; });
    if (it == lr_schedule.end()) throw std::invalid_argument("train: no learning rate for epoch " + std::to_string(e));
    if (!(it->lr >= 0.0) || !std::isfinite(it->lr)) throw std::invalid_argument("train: learning rates must be finite and non-negative");
  }
}

double TrainConfig::learning_rate(int epoch) const {
  for (const auto& p : lr_schedule) {
    if (epoch >= p.first && epoch <= p.last) return p.lr;
  }
  throw std::out_of_range("train: no learning rate for epoch " + std::to_string(epoch));
}

Head TrainConfig::scoring_head() const {
  return score_head == Head::Kind::discovery ? Head::discovery() : Head::localization(num_loc_branches - 1);
}

void TrainConfig::apply_ablation(Ablation a) {
  use_cliques = a != Ablation::base;
  use_localization = a != Ablation::base && a != Ablation::clique;
  recurrent = a == Ablation::l_rl || a == Ablation::l_arl;
  score_head = (a == Ablation::base || a == Ablation::clique || a == Ablation::d) ? Head::Kind::discovery
                                                                                   : Head::Kind::localization;
  if (a != Ablation::l_arl) num_loc_branches = 1;
}

bool EpochReport::same_values(const EpochReport& o) const {
  return epoch == o.epoch && disc_loss == o.disc_loss && loc_loss == o.loc_loss && global_entropy == o.global_entropy &&
         local_entropy == o.local_entropy && loc_accuracy == o.loc_accuracy && loc_variance == o.loc_variance;
}

std::string epoch_csv_header(int branches) {
  std::string h = "epoch,disc_loss";
  for (int k = 1; k <= branches; ++k) h += ",loc_loss_" + std::to_string(k);
  return h + ",global_entropy,local_entropy,loc_acc,loc_var,seconds";
}

std::string epoch_csv_row(const EpochReport& r) {
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string row = std::to_string(r.epoch) + "," + fmt(r.disc_loss);
  for (double v : r.loc_loss) row += "," + fmt(v);
  row += "," + fmt(r.global_entropy) + "," + fmt(r.local_entropy) + "," + fmt(r.loc_accuracy) + "," +
         fmt(r.loc_variance) + "," + fmt(r.seconds);
  return row;
}

void sgd_step(ModelParams& params, const ModelParams& grads, ModelParams& buffers, double lr, double momentum,
              double weight_decay) {
  auto p = layers(params);
  auto g = layers(grads);
  auto b = layers(buffers);
  if (p.size() != g.size() || p.size() != b.size()) throw std::invalid_argument("sgd_step: parameter structure mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]->weight.rows() != g[i]->weight.rows() || p[i]->weight.cols() != g[i]->weight.cols() ||
        p[i]->weight.rows() != b[i]->weight.rows() || p[i]->weight.cols() != b[i]->weight.cols() ||
        p[i]->bias.size() != g[i]->bias.size() || p[i]->bias.size() != b[i]->bias.size()) {
      throw std::invalid_argument("sgd_step: shape mismatch in layer " + std::to_string(i));
    }
    b[i]->weight = momentum * b[i]->weight + g[i]->weight + weight_decay * p[i]->weight;
    b[i]->bias = momentum * b[i]->bias + g[i]->bias + weight_decay * p[i]->bias;
    p[i]->weight -= lr * b[i]->weight;
    p[i]->bias -= lr * b[i]->bias;
  }
}

namespace {

ModelDims dims_for(const TrainingSet& ts, const TrainConfig& cfg) {
  return ModelDims{ts.feature_dim, cfg.hidden_dim, ts.num_classes, cfg.num_loc_branches};
}

}  // namespace

TrainState init_state(const TrainingSet& ts, const TrainConfig& cfg) {
  cfg.validate();
  if (ts.bags.empty()) throw std::invalid_argument("train: dataset has no bags");
  TrainState s;
  s.params = init_params(dims_for(ts, cfg), cfg.seed, cfg.init_scale);
  s.momentum = s.params.zeros_like();
  for (const auto& bag : ts.bags) {
    if (bag.features.cols() != ts.feature_dim) throw std::invalid_argument("train: bag '" + bag.id + "' feature width mismatch");
    s.object_scores[bag.id] = Vector::Ones(bag.features.rows());
  }
  s.rng.seed(cfg.seed);
  return s;
}

std::vector<double> objectness(const ProbMatrix& discovery_probs, std::span<const int> positives) {
  std::vector<double> out(static_cast<std::size_t>(discovery_probs.rows()), 0.0);
  for (Eigen::Index h = 0; h < discovery_probs.rows(); ++h) {
    double best = 0.0;
    if (positives.empty()) {
      best = discovery_probs.row(h).maxCoeff();
    } else {
      for (int c : positives) best = std::max(best, discovery_probs(h, c));
    }
    out[static_cast<std::size_t>(h)] = best;
  }
  return out;
}

namespace {

struct BagStep {
  double disc_loss = 0.0;
  std::vector<double> loc_loss;
  std::vector<double> global_entropy;  // per positive class
  std::vector<double> local_entropy;   // per positive class, final branch
  ProbMatrix score_probs;              // scoring head, before the update
};

/// Localization supervision for every branch. Branch 0 is anchored on the discovered clique;
/// branch k adds, per class, the clique around the top proposal of each earlier branch.
std::vector<std::vector<LocalSupervision>> build_supervision(const TrainingBag& bag, const CliquePartition& partition,
                                                             const DiscoveryOutput& disc,
                                                             const std::vector<ProbMatrix>& loc_probs) {
  const std::size_t branches = loc_probs.size();
  std::vector<std::vector<LocalSupervision>> sup(branches);
  for (int c : bag.positives) {
    const int found = disc.selected_clique[static_cast<std::size_t>(c)];
    std::vector<int> used{found};
    for (std::size_t k = 0; k < branches; ++k) {
      if (k > 0) {
        // Pseudo object of branch k-1: its highest-probability pool proposal.
        std::size_t top = partition.pool.front();
        for (std::size_t h : partition.pool) {
          if (loc_probs[k - 1](static_cast<Eigen::Index>(h), c) > loc_probs[k - 1](static_cast<Eigen::Index>(top), c)) top = h;
        }
        const int cq = partition.clique_of(top);
        if (std::find(used.begin(), used.end(), cq) == used.end()) used.push_back(cq);
      }
      for (int cq : used) {
        const auto& members = partition.cliques[static_cast<std::size_t>(cq)].members;
        sup[k].push_back(LocalSupervision{c, members, select_object(members, loc_probs[k], c)});
      }
    }
  }
  return sup;
}

void check_finite(double v, const std::string& what, const std::string& bag, int epoch) {
  if (!std::isfinite(v)) {
    throw TrainingError("non-finite " + what + " in bag '" + bag + "' at epoch " + std::to_string(epoch));
  }
}

BagStep step_bag(const TrainingBag& bag, const TrainConfig& cfg, TrainState& state, double lr, int epoch) {
  const int branches = cfg.num_loc_branches;
  Vector& s_h = state.object_scores.at(bag.id);
  const FeatureMatrix features = cfg.recurrent ? FeatureMatrix(s_h.asDiagonal() * bag.features) : bag.features;
  const ModelParams& params = state.params;

  BagStep out;
  out.loc_loss.assign(static_cast<std::size_t>(branches), 0.0);

  const Scores disc_scores = forward(params, features, Head::discovery());
  const ProbMatrix disc_probs = row_softmax(disc_scores);
  CliquePartition partition;
  if (!bag.positives.empty()) {
    const auto obj = objectness(disc_probs, bag.positives);
    partition = cfg.use_cliques ? partition_cliques(bag.boxes, obj, cfg.tau, cfg.top_k) : singleton_partition(obj, cfg.top_k);
  }
  const DiscoveryOutput disc = discovery_loss(bag.labels, partition, disc_scores);
  out.disc_loss = disc.loss;
  check_finite(disc.loss, "discovery loss", bag.id, epoch);
  for (int c : bag.positives) out.global_entropy.push_back(disc.global_entropy[static_cast<std::size_t>(c)]);

  ModelParams grads = params.zeros_like();
  accumulate(grads, Head::discovery(), backward_head(params, features, Head::discovery(), disc.grad));

  std::vector<Scores> loc_scores;
  std::vector<ProbMatrix> loc_probs;
  for (int k = 0; k < branches; ++k) {
    loc_scores.push_back(forward(params, features, Head::localization(k)));
    loc_probs.push_back(row_softmax(loc_scores.back()));
  }

  // Negative bags give the localization branches nothing to learn from.
  if (!bag.positives.empty()) {
    const auto supervision = build_supervision(bag, partition, disc, loc_probs);
    for (int k = 0; k < branches; ++k) {
      const auto loc = localization_loss(supervision[static_cast<std::size_t>(k)], loc_scores[static_cast<std::size_t>(k)],
                                         bag.boxes, cfg.kernel_a);
      check_finite(loc.loss, "localization loss", bag.id, epoch);
      out.loc_loss[static_cast<std::size_t>(k)] = loc.loss;
      if (k == branches - 1) {
        for (int c : bag.positives) {
          double e = 0.0;
          for (const auto& t : loc.terms) {
            if (t.supervision.cls == c) e += t.entropy;
          }
          out.local_entropy.push_back(e);
        }
      }
      if (cfg.use_localization) {
        accumulate(grads, Head::localization(k), backward_head(params, features, Head::localization(k), loc.grad),
                   cfg.lambda, cfg.shared_hidden);
      }
    }
  }

  out.score_probs = cfg.score_head == Head::Kind::discovery ? disc_probs : loc_probs.back();

  sgd_step(state.params, grads, state.momentum, lr, cfg.momentum, cfg.weight_decay);
  if (!state.params.all_finite()) throw TrainingError("non-finite parameters after bag '" + bag.id + "' at epoch " + std::to_string(epoch));

  if (cfg.recurrent && !bag.positives.empty()) {
    const ProbMatrix p = row_softmax(forward(state.params, features, Head::localization(branches - 1)));
    for (Eigen::Index h = 0; h < p.rows(); ++h) {
      double best = 0.0;
      for (int c : bag.positives) best = std::max(best, p(h, c));
      s_h[h] = best;
    }
  }
  return out;
}

}  // namespace

std::vector<std::size_t> epoch_order(const TrainingSet& ts, std::mt19937_64& rng) {
  std::vector<std::vector<int>> keys;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ts.bags.size(); ++i) {
    const auto it = std::find(keys.begin(), keys.end(), ts.bags[i].labels);
    if (it == keys.end()) {
      keys.push_back(ts.bags[i].labels);
      groups.push_back({i});
    } else {
      groups[static_cast<std::size_t>(it - keys.begin())].push_back(i);
    }
  }
  // Each group is shuffled, then spread evenly over the epoch with a random phase.
  std::vector<std::pair<double, std::size_t>> slots;
  for (auto& g : groups) {
    for (std::size_t i = g.size(); i > 1; --i) std::swap(g[i - 1], g[static_cast<std::size_t>(rng() % i)]);
    const double phase = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    for (std::size_t j = 0; j < g.size(); ++j) slots.emplace_back((static_cast<double>(j) + phase) / static_cast<double>(g.size()), g[j]);
  }
  std::stable_sort(slots.begin(), slots.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> order;
  for (const auto& s : slots) order.push_back(s.second);
  return order;
}

std::vector<EpochReport> train_epochs(const TrainingSet& ts, const TrainConfig& cfg, TrainState& state, int until_epoch,
                                      const GroundTruthTable* ground_truth, const EpochCallback& on_epoch) {
  cfg.validate();
  if (until_epoch > cfg.epochs) throw std::invalid_argument("train: cannot run past the configured epoch count");
  if (ground_truth && ground_truth->size() != ts.bags.size()) {
    throw std::invalid_argument("train: ground truth table does not align with the bags");
  }
  if (state.params.dims != dims_for(ts, cfg)) throw std::invalid_argument("train: state does not match dataset/config dimensions");

  std::vector<EpochReport> reports;
  while (state.epoch < until_epoch) {
    const int epoch = state.epoch + 1;
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.learning_rate(epoch);

    const std::vector<std::size_t> order = epoch_order(ts, state.rng);

    EpochReport rep;
    rep.epoch = epoch;
    rep.loc_loss.assign(static_cast<std::size_t>(cfg.num_loc_branches), 0.0);
    int positive_bags = 0;
    int positive_pairs = 0;
    int gt_pairs = 0;
    for (std::size_t bi : order) {
      const TrainingBag& bag = ts.bags[bi];
      const BagStep st = step_bag(bag, cfg, state, lr, epoch);
      rep.disc_loss += st.disc_loss;
      if (!bag.positives.empty()) {
        ++positive_bags;
        for (std::size_t k = 0; k < st.loc_loss.size(); ++k) rep.loc_loss[k] += st.loc_loss[k];
      }
      for (std::size_t i = 0; i < bag.positives.size(); ++i) {
        ++positive_pairs;
        rep.global_entropy += st.global_entropy[i];
        rep.local_entropy += st.local_entropy[i];
        if (!ground_truth) continue;
        std::vector<BoxD> gts;
        for (const auto& g : (*ground_truth)[bi]) {
          if (g.class_index == bag.positives[i]) gts.push_back(g.box);
        }
        if (gts.empty()) continue;
        std::vector<double> p(static_cast<std::size_t>(st.score_probs.rows()));
        for (Eigen::Index h = 0; h < st.score_probs.rows(); ++h) p[static_cast<std::size_t>(h)] = st.score_probs(h, bag.positives[i]);
        const auto ls = localization_stats(p, bag.boxes, gts);
        rep.loc_accuracy += ls.accuracy;
        rep.loc_variance += ls.variance;
        ++gt_pairs;
      }
    }
    rep.disc_loss /= static_cast<double>(ts.bags.size());
    if (positive_bags > 0) {
      for (double& v : rep.loc_loss) v /= positive_bags;
    }
    if (positive_pairs > 0) {
      rep.global_entropy /= positive_pairs;
      rep.local_entropy /= positive_pairs;
    }
    if (gt_pairs > 0) {
      rep.loc_accuracy /= gt_pairs;
      rep.loc_variance /= gt_pairs;
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.epoch = epoch;
    reports.push_back(rep);
    if (on_epoch) on_epoch(rep, state);
  }
  return reports;
}

TrainResult train(const TrainingSet& ts, const TrainConfig& cfg, const GroundTruthTable* ground_truth) {
  TrainResult r;
  r.state = init_state(ts, cfg);
  r.reports = train_epochs(ts, cfg, r.state, cfg.epochs, ground_truth);
  r.params = r.state.params;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using nlohmann::json;

json layer_json(const Layer& l) {
  return {{"rows", l.weight.rows()},
          {"cols", l.weight.cols()},
          {"weight", std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size())},
          {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}};
}

json params_json(const ModelParams& p) {
  json heads = json::array();
  for (const auto& l : p.loc_heads) heads.push_back(layer_json(l));
  json j = {{"discovery", layer_json(p.discovery)}, {"loc_heads", heads}};
  j["hidden"] = p.hidden ? layer_json(*p.hidden) : json(nullptr);
  return j;
}

Layer layer_from(const json& j, Eigen::Index rows, Eigen::Index cols) {
  const auto w = j.at("weight").get<std::vector<double>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  if (j.at("rows").get<Eigen::Index>() != rows || j.at("cols").get<Eigen::Index>() != cols ||
      w.size() != static_cast<std::size_t>(rows * cols) || b.size() != static_cast<std::size_t>(cols)) {
    throw std::runtime_error("checkpoint: layer shape does not match dims");
  }
  Layer l;
  l.weight = Eigen::Map<const RowMatrix<double>>(w.data(), rows, cols);
  l.bias = Eigen::Map<const RowVector<double>>(b.data(), cols);
  return l;
}

ModelParams params_from(const json& j, const ModelDims& dims) {
  ModelParams p;
  p.dims = dims;
  const Eigen::Index head_in = dims.hidden_dim > 0 ? dims.hidden_dim : dims.feature_dim;
  if (dims.hidden_dim > 0) {
    if (j.at("hidden").is_null()) throw std::runtime_error("checkpoint: hidden layer missing");
    p.hidden = layer_from(j.at("hidden"), dims.feature_dim, dims.hidden_dim);
  }
  p.discovery = layer_from(j.at("discovery"), head_in, dims.num_classes);
  const auto& heads = j.at("loc_heads");
  if (heads.size() != static_cast<std::size_t>(dims.num_loc_branches)) throw std::runtime_error("checkpoint: branch count mismatch");
  for (const auto& h : heads) p.loc_heads.push_back(layer_from(h, head_in, dims.num_classes));
  if (!p.all_finite()) throw std::runtime_error("checkpoint: non-finite parameter");
  return p;
}

json config_json(const TrainConfig& c) {
  json sched = json::array();
  for (const auto& p : c.lr_schedule) sched.push_back({{"first", p.first}, {"last", p.last}, {"lr", p.lr}});
  return {{"epochs", c.epochs},
          {"lr_schedule", sched},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"lambda", c.lambda},
          {"tau", c.tau},
          {"top_k", c.top_k},
          {"kernel_a", c.kernel_a},
          {"num_loc_branches", c.num_loc_branches},
          {"seed", c.seed},
          {"hidden_dim", c.hidden_dim},
          {"shared_hidden", c.shared_hidden},
          {"init_scale", c.init_scale},
          {"use_cliques", c.use_cliques},
          {"use_localization", c.use_localization},
          {"recurrent", c.recurrent},
          {"score_head", c.score_head == Head::Kind::discovery ? "discovery" : "localization"}};
}

TrainConfig config_from(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.lr_schedule.clear();
  for (const auto& p : j.at("lr_schedule")) c.lr_schedule.push_back({p.at("first").get<int>(), p.at("last").get<int>(), p.at("lr").get<double>()});
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.tau = j.at("tau").get<double>();
  c.top_k = j.at("top_k").get<int>();
  c.kernel_a = j.at("kernel_a").get<double>();
  c.num_loc_branches = j.at("num_loc_branches").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.shared_hidden = j.at("shared_hidden").get<bool>();
  c.init_scale = j.at("init_scale").get<double>();
  c.use_cliques = j.at("use_cliques").get<bool>();
  c.use_localization = j.at("use_localization").get<bool>();
  c.recurrent = j.at("recurrent").get<bool>();
  const auto head = j.at("score_head").get<std::string>();
  if (head != "discovery" && head != "localization") throw std::runtime_error("checkpoint: unknown score_head '" + head + "'");
  c.score_head = head == "discovery" ? Head::Kind::discovery : Head::Kind::localization;
  c.validate();
  return c;
}

}  // namespace

std::string checkpoint_to_json(const TrainConfig& cfg, const TrainState& state) {
  const auto& d = state.params.dims;
  json scores = json::object();
  for (const auto& [id, v] : state.object_scores) scores[id] = std::vector<double>(v.data(), v.data() + v.size());
  std::ostringstream rng;
  rng << state.rng;
  json j = {{"format", "melm-checkpoint"},
            {"version", kCheckpointVersion},
            {"dims",
             {{"feature_dim", d.feature_dim},
              {"hidden_dim", d.hidden_dim},
              {"num_classes", d.num_classes},
              {"num_loc_branches", d.num_loc_branches}}},
            {"seed", cfg.seed},
            {"config", config_json(cfg)},
            {"epoch", state.epoch},
            {"params", params_json(state.params)},
            {"momentum", params_json(state.momentum)},
            {"object_scores", scores},
            {"rng", rng.str()}};
  return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text, std::optional<int> expected_feature_dim) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt file: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", "") != "melm-checkpoint") throw std::runtime_error("checkpoint: not a checkpoint file");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw std::runtime_error("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                               std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    const auto& jd = j.at("dims");
    ModelDims dims{jd.at("feature_dim").get<int>(), jd.at("hidden_dim").get<int>(), jd.at("num_classes").get<int>(),
                   jd.at("num_loc_branches").get<int>()};
    dims.validate();
    if (expected_feature_dim && *expected_feature_dim != dims.feature_dim) {
      throw std::runtime_error("checkpoint: feature_dim " + std::to_string(dims.feature_dim) + " does not match dataset feature_dim " +
                               std::to_string(*expected_feature_dim));
    }
    ck.config = config_from(j.at("config"));
    if (ck.config.num_loc_branches != dims.num_loc_branches || ck.config.hidden_dim != dims.hidden_dim) {
      throw std::runtime_error("checkpoint: config disagrees with dims");
    }
    ck.state.params = params_from(j.at("params"), dims);
    ck.state.momentum = params_from(j.at("momentum"), dims);
    ck.state.epoch = j.at("epoch").get<int>();
    for (const auto& [id, v] : j.at("object_scores").items()) {
      const auto vals = v.get<std::vector<double>>();
      ck.state.object_scores[id] = Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    }
    std::istringstream rng(j.at("rng").get<std::string>());
    rng >> ck.state.rng;
    if (rng.fail()) throw std::runtime_error("checkpoint: corrupt rng state");
    return ck;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: invalid contents: ") + e.what());
  }
}

void save_checkpoint(const TrainConfig& cfg, const TrainState& state, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_json(cfg, state));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<int> expected_feature_dim) {
  return checkpoint_from_json(read_text_file(path), expected_feature_dim);
}

}  // namespace melm
