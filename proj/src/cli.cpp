#include "melm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "melm/data.hpp"
#include "melm/entropy.hpp"
#include "melm/eval.hpp"
#include "melm/io.hpp"
#include "melm/trainer.hpp"

namespace melm {

namespace {

using nlohmann::json;

/// Thrown for flag or config values that violate a precondition; maps to exit 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flag value if given, else the config-file value, else the default.
template <typename T>
T pick(const std::optional<T>& flag, const json& file, const char* key, T fallback) {
  if (flag) return *flag;
  if (file.contains(key)) {
    try {
      return file.at(key).get<T>();
    } catch (const json::exception&) {
      throw UsageError(std::string("config: key '") + key + "' has the wrong type");
    }
  }
  return fallback;
}

json read_config(const std::optional<std::string>& path) {
  if (!path) return json::object();
  json j;
  try {
    j = json::parse(read_text_file(*path));
  } catch (const json::parse_error& e) {
    throw UsageError("config: malformed JSON in '" + *path + "': " + e.what());
  }
  if (!j.is_object()) throw UsageError("config: top level must be an object");
  return j;
}

std::string required_path(const std::optional<std::string>& flag, const json& file, const char* key) {
  const std::string v = pick<std::string>(flag, file, key, "");
  if (v.empty()) throw UsageError(std::string("--") + key + " is required");
  return v;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::optional<std::string> config, out;
  std::optional<int> classes, bags, negatives, proposals, feature_dim;
  std::optional<double> part_fraction, noise;
  std::optional<std::uint64_t> seed;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  const json file = read_config(a.config);
  const std::string path = required_path(a.out, file, "out");
  SynthConfig cfg;
  cfg.num_classes = pick(a.classes, file, "classes", cfg.num_classes);
  const int positives = pick(a.bags, file, "bags", cfg.bags_per_class * cfg.num_classes);
  if (cfg.num_classes < 1 || positives < 0 || positives % cfg.num_classes != 0) {
    throw UsageError("--bags must be a non-negative multiple of --classes");
  }
  cfg.bags_per_class = positives / cfg.num_classes;
  cfg.negatives = pick(a.negatives, file, "negatives", cfg.negatives);
  cfg.proposals_per_bag = pick(a.proposals, file, "proposals", cfg.proposals_per_bag);
  cfg.feature_dim = pick(a.feature_dim, file, "feature-dim", cfg.feature_dim);
  cfg.part_fraction = pick(a.part_fraction, file, "part-fraction", cfg.part_fraction);
  cfg.noise_sigma = pick(a.noise, file, "noise", cfg.noise_sigma);
  cfg.seed = pick(a.seed, file, "seed", cfg.seed);
  try {
    cfg.validate();
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  const Dataset ds = generate_synthetic(cfg);
  save_dataset(ds, path);
  std::size_t proposals = 0;
  for (const auto& b : ds.bags) proposals += b.proposals.size();
  out << "wrote " << path << ": " << ds.bags.size() << " bags (" << positives << " positive, " << cfg.negatives
      << " negative), " << ds.num_classes() << " classes, " << proposals << " proposals, feature_dim "
      << ds.feature_dim << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config, data, out, csv, resume, ablation;
  std::optional<int> epochs, topk, branches, hidden_dim, stop_after;
  std::optional<double> lr, lr_late, momentum, wd, tau, lambda, kernel_a;
  std::optional<std::uint64_t> seed;
  bool no_shared_hidden = false;
};

TrainConfig train_config_from(const TrainArgs& a, const json& file) {
  TrainConfig cfg;
  cfg.epochs = pick(a.epochs, file, "epochs", cfg.epochs);
  if (cfg.epochs < 1) throw UsageError("--epochs must be >= 1");
  const double lr = pick(a.lr, file, "lr", 5e-3);
  const double lr_late = pick(a.lr_late, file, "lr-late", 5e-4);
  cfg.lr_schedule = TrainConfig::default_schedule(cfg.epochs, lr, lr_late);
  cfg.momentum = pick(a.momentum, file, "momentum", cfg.momentum);
  cfg.weight_decay = pick(a.wd, file, "wd", cfg.weight_decay);
  cfg.tau = pick(a.tau, file, "tau", cfg.tau);
  cfg.top_k = pick(a.topk, file, "topk", cfg.top_k);
  cfg.lambda = pick(a.lambda, file, "lambda", cfg.lambda);
  cfg.kernel_a = pick(a.kernel_a, file, "kernel-a", cfg.kernel_a);
  cfg.num_loc_branches = pick(a.branches, file, "branches", cfg.num_loc_branches);
  cfg.seed = pick(a.seed, file, "seed", cfg.seed);
  cfg.hidden_dim = pick(a.hidden_dim, file, "hidden-dim", cfg.hidden_dim);
  cfg.shared_hidden = a.no_shared_hidden ? false : pick<bool>(std::nullopt, file, "shared-hidden", cfg.shared_hidden);
  const std::string ablation = pick<std::string>(a.ablation, file, "ablation", "l-arl");
  try {
    cfg.apply_ablation(parse_ablation(ablation));
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const json file = read_config(a.config);
  const std::string data = required_path(a.data, file, "data");
  const std::string ckpt_path = required_path(a.out, file, "out");
  const std::optional<std::string> resume =
      a.resume ? a.resume : (file.contains("resume") ? std::optional(file["resume"].get<std::string>()) : std::nullopt);

  TrainConfig cfg;
  std::optional<Checkpoint> resumed;
  if (resume) {
    // The checkpoint's own config governs a resumed run.
    resumed = load_checkpoint(*resume);
    cfg = resumed->config;
  } else {
    cfg = train_config_from(a, file);
  }
  const int stop_after = pick(a.stop_after, file, "stop-after", cfg.epochs);
  if (stop_after < 1 || stop_after > cfg.epochs) throw UsageError("--stop-after must lie in [1, epochs]");

  const Dataset ds = load_dataset(data);
  const TrainingSet ts = training_view(ds);
  const GroundTruthTable gt = ground_truth_table(ds);

  TrainState state;
  if (resumed) {
    if (resumed->state.params.dims.feature_dim != ds.feature_dim) {
      throw std::runtime_error("checkpoint feature_dim " + std::to_string(resumed->state.params.dims.feature_dim) +
                               " does not match dataset feature_dim " + std::to_string(ds.feature_dim));
    }
    state = std::move(resumed->state);
  } else {
    state = init_state(ts, cfg);
  }

  const std::string csv_path = pick<std::string>(a.csv, file, "csv", ckpt_path + ".csv");
  {
    const bool append = resumed.has_value() && std::filesystem::exists(csv_path);
    std::ofstream csv(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open '" + csv_path + "' for writing");
    if (!append) csv << epoch_csv_header(cfg.num_loc_branches) << "\n";
  }
  train_epochs(ts, cfg, state, stop_after, &gt, [&](const EpochReport& r, const TrainState& s) {
    std::ofstream csv(csv_path, std::ios::app);
    csv << epoch_csv_row(r) << "\n";
    save_checkpoint(cfg, s, ckpt_path);
    out << "epoch " << r.epoch << "/" << cfg.epochs << " disc_loss " << r.disc_loss << " global_entropy "
        << r.global_entropy << " local_entropy " << r.local_entropy << " loc_acc " << r.loc_accuracy << "\n";
  });
  if (state.epoch == (resumed ? resumed->state.epoch : 0)) save_checkpoint(cfg, state, ckpt_path);
  out << "checkpoint " << ckpt_path << " (epoch " << state.epoch << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> config, data, checkpoint, csv, out;
  std::optional<double> nms_iou, score_floor;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const json file = read_config(a.config);
  const Dataset ds = load_dataset(required_path(a.data, file, "data"));
  const Checkpoint ck = load_checkpoint(required_path(a.checkpoint, file, "checkpoint"), ds.feature_dim);
  if (ck.state.params.dims.num_classes != ds.num_classes()) throw std::runtime_error("checkpoint class count does not match dataset");
  if (!has_ground_truth(ds)) throw std::runtime_error("evaluation requires ground_truth in the dataset file");
  EvalSettings settings;
  settings.nms_iou = pick(a.nms_iou, file, "nms-iou", settings.nms_iou);
  settings.score_floor = pick(a.score_floor, file, "score-floor", settings.score_floor);
  const MetricsReport report = evaluate(ck.state.params, ck.config.scoring_head(), ds, settings);
  const std::string text = report.to_json();
  out << text;
  if (const auto path = pick<std::string>(a.out, file, "out", ""); !path.empty()) write_file_atomic(path, text);
  if (const auto path = pick<std::string>(a.csv, file, "csv", ""); !path.empty()) {
    std::ostringstream os;
    os.precision(17);
    os << "mAP,mAP_50_95,CorLoc,pointing,loc_acc,loc_var\n"
       << report.map << "," << report.map_50_95 << "," << report.mean_corloc << "," << report.pointing << ","
       << report.loc_accuracy << "," << report.loc_variance << "\n";
    write_file_atomic(path, os.str());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::optional<std::string> config, data, checkpoint, bag, out;
};

json box_json(const BoxD& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const json file = read_config(a.config);
  const Dataset ds = load_dataset(required_path(a.data, file, "data"));
  const Checkpoint ck = load_checkpoint(required_path(a.checkpoint, file, "checkpoint"), ds.feature_dim);
  const std::string id = required_path(a.bag, file, "bag");
  const Bag* bag = ds.find(id);
  if (!bag) throw std::runtime_error("unknown bag id '" + id + "'");
  const TrainConfig& cfg = ck.config;
  const ModelParams& params = ck.state.params;

  const FeatureMatrix features = bag->feature_matrix();
  const auto boxes = bag->boxes();
  const auto positives = bag->positive_classes();
  const Scores disc_scores = forward(params, features, Head::discovery());
  const auto obj = objectness(row_softmax(disc_scores), positives);
  CliquePartition partition = cfg.use_cliques ? partition_cliques(boxes, obj, cfg.tau, cfg.top_k) : singleton_partition(obj, cfg.top_k);
  cache_mean_scores(partition, disc_scores);
  const ProbMatrix cprobs = clique_class_probs(partition, disc_scores);
  const ProbMatrix cweights = clique_weights(cprobs);
  const ProbMatrix loc_probs = row_softmax(forward(params, features, Head::localization(cfg.num_loc_branches - 1)));

  json cliques = json::array();
  for (std::size_t c = 0; c < partition.size(); ++c) {
    const auto& cl = partition.cliques[c];
    json members_boxes = json::array();
    for (std::size_t h : cl.members) members_boxes.push_back(box_json(boxes[h]));
    const auto r = static_cast<Eigen::Index>(c);
    cliques.push_back({{"members", cl.members},
                       {"boxes", members_boxes},
                       {"mean_scores", std::vector<double>(cl.mean_scores.data(), cl.mean_scores.data() + cl.mean_scores.size())},
                       {"probs", std::vector<double>(cprobs.row(r).data(), cprobs.row(r).data() + cprobs.cols())},
                       {"weights", std::vector<double>(cweights.row(r).data(), cweights.row(r).data() + cweights.cols())}});
  }
  json selected = json::object(), h_star = json::object(), weights = json::object(), negatives = json::object();
  for (int cls : positives) {
    const std::string name = ds.classes[static_cast<std::size_t>(cls)];
    const std::size_t sc = select_clique(cprobs, cweights, cls);
    const auto& members = partition.cliques[sc].members;
    const std::size_t hs = select_object(members, loc_probs, cls);
    std::vector<double> p;
    std::vector<double> o;
    for (std::size_t h : members) {
      p.push_back(loc_probs(static_cast<Eigen::Index>(h), cls));
      o.push_back(iou(boxes[h], boxes[hs]));
    }
    selected[name] = sc;
    h_star[name] = hs;
    weights[name] = soft_weights(p, o, cfg.kernel_a);
    negatives[name] = hard_negatives(members, hs, boxes);
  }
  json record = {{"bag", bag->id},
                 {"labels", bag->labels},
                 {"tau", partition.tau},
                 {"cliques", cliques},
                 {"selected_clique", selected},
                 {"h_star", h_star},
                 {"weights", weights},
                 {"hard_negatives", negatives}};
  const std::string text = record.dump(2) + "\n";
  out << text;
  if (const auto path = pick<std::string>(a.out, file, "out", ""); !path.empty()) write_file_atomic(path, text);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Min-entropy latent model: synthetic data, training, evaluation, inspection"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--config", ga.config, "JSON config file (flags override it)");
  gen->add_option("--out", ga.out, "Output dataset path");
  gen->add_option("--classes", ga.classes, "Number of classes");
  gen->add_option("--bags", ga.bags, "Positive bags in total (split evenly over classes)");
  gen->add_option("--negatives", ga.negatives, "Negative bags");
  gen->add_option("--proposals", ga.proposals, "Proposals per bag");
  gen->add_option("--feature-dim", ga.feature_dim, "Feature dimension");
  gen->add_option("--part-fraction", ga.part_fraction, "Fraction of part proposals per positive bag");
  gen->add_option("--noise", ga.noise, "Feature noise sigma");
  gen->add_option("--seed", ga.seed, "Random seed");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train with recurrent / accumulated recurrent learning");
  tr->add_option("--config", ta.config, "JSON config file (flags override it)");
  tr->add_option("--data", ta.data, "Dataset path");
  tr->add_option("--out", ta.out, "Checkpoint path (written after every epoch)");
  tr->add_option("--csv", ta.csv, "Epoch report CSV (default: <out>.csv)");
  tr->add_option("--resume", ta.resume, "Resume from a checkpoint");
  tr->add_option("--stop-after", ta.stop_after, "Stop after this epoch (the schedule still spans --epochs)");
  tr->add_option("--epochs", ta.epochs, "Epochs (default 20; lr split at 75%)");
  tr->add_option("--lr", ta.lr, "Learning rate for the first 75% of epochs (default 5e-3)");
  tr->add_option("--lr-late", ta.lr_late, "Learning rate for the remaining epochs (default 5e-4)");
  tr->add_option("--momentum", ta.momentum, "SGD momentum (default 0.9)");
  tr->add_option("--wd", ta.wd, "Weight decay (default 5e-4)");
  tr->add_option("--tau", ta.tau, "Clique IoU threshold (default 0.7)");
  tr->add_option("--topk", ta.topk, "Proposals considered for cliques (default 200)");
  tr->add_option("--lambda", ta.lambda, "Localization loss weight (default 1.0)");
  tr->add_option("--kernel-a", ta.kernel_a, "Gaussian kernel parameter (default 4.0)");
  tr->add_option("--branches", ta.branches, "Localization branches (default 3)");
  tr->add_option("--seed", ta.seed, "Random seed");
  tr->add_option("--hidden-dim", ta.hidden_dim, "Shared hidden layer width (0 disables)");
  tr->add_flag("--no-shared-hidden", ta.no_shared_hidden, "Stop localization gradients at the heads");
  tr->add_option("--ablation", ta.ablation, "base|clique|d|l|l-rl|l-arl (default l-arl)");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint: mAP, CorLoc, pointing, localization stats");
  ev->add_option("--config", ea.config, "JSON config file (flags override it)");
  ev->add_option("--data", ea.data, "Dataset path (with ground_truth)");
  ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint path");
  ev->add_option("--nms-iou", ea.nms_iou, "NMS IoU threshold (default 0.4)");
  ev->add_option("--score-floor", ea.score_floor, "Minimum detection score (default 1e-3)");
  ev->add_option("--csv", ea.csv, "Also write a one-row metrics CSV");
  ev->add_option("--out", ea.out, "Also write the metrics JSON to a file");

  InspectArgs ia;
  auto* in = app.add_subcommand("inspect", "Dump the clique partition and pseudo objects of one bag");
  in->add_option("--config", ia.config, "JSON config file (flags override it)");
  in->add_option("--data", ia.data, "Dataset path");
  in->add_option("--checkpoint", ia.checkpoint, "Checkpoint path");
  in->add_option("--bag", ia.bag, "Bag id");
  in->add_option("--out", ia.out, "Also write the record to a file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == gen) return cmd_gen(ga, out);
    if (active == tr) return cmd_train(ta, out);
    if (active == ev) return cmd_eval(ea, out);
    return cmd_inspect(ia, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << active->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace melm
