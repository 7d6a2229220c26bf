#include "melm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "melm/io.hpp"

namespace melm {

using nlohmann::json;

FeatureMatrix Bag::feature_matrix() const {
  const Eigen::Index dim = proposals.empty() ? 0 : proposals.front().feature.size();
  FeatureMatrix m(static_cast<Eigen::Index>(proposals.size()), dim);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    m.row(static_cast<Eigen::Index>(i)) = proposals[i].feature.transpose();
  }
  return m;
}

std::vector<BoxD> Bag::boxes() const {
  std::vector<BoxD> out;
  out.reserve(proposals.size());
  for (const auto& p : proposals) out.push_back(p.box);
  return out;
}

std::vector<int> Bag::positive_classes() const {
  std::vector<int> out;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (labels[c] != 0) out.push_back(static_cast<int>(c));
  }
  return out;
}

const Bag* Dataset::find(const std::string& id) const {
  for (const auto& b : bags) {
    if (b.id == id) return &b;
  }
  return nullptr;
}

namespace {

[[noreturn]] void fail(const std::string& bag, const std::string& field, const std::string& what) {
  throw DataError("bag '" + bag + "', field '" + field + "': " + what);
}

std::string box_text(const BoxD& b) {
  std::ostringstream os;
  os << "[" << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << "]";
  return os.str();
}

}  // namespace

void validate(const Dataset& ds) {
  if (ds.classes.empty()) throw DataError("dataset: field 'classes' is empty");
  if (ds.feature_dim <= 0) throw DataError("dataset: field 'feature_dim' must be positive");
  if (ds.bags.empty()) throw DataError("dataset: field 'bags' is empty");
  const auto n = ds.classes.size();
  std::set<std::string> ids;
  for (const auto& bag : ds.bags) {
    if (bag.id.empty()) throw DataError("dataset: a bag has an empty 'id'");
    if (!ids.insert(bag.id).second) fail(bag.id, "id", "duplicate bag id");
    if (bag.proposals.empty()) fail(bag.id, "proposals", "at least one proposal is required");
    if (bag.labels.size() != n) {
      fail(bag.id, "labels",
           "expected " + std::to_string(n) + " entries, found " + std::to_string(bag.labels.size()));
    }
    for (int v : bag.labels) {
      if (v != 0 && v != 1) fail(bag.id, "labels", "entries must be 0 or 1");
    }
    for (std::size_t i = 0; i < bag.proposals.size(); ++i) {
      const auto& p = bag.proposals[i];
      const std::string where = "proposals[" + std::to_string(i) + "]";
      if (!p.box.valid()) fail(bag.id, where + ".box", "degenerate box " + box_text(p.box));
      if (p.feature.size() != ds.feature_dim) {
        fail(bag.id, where + ".feature",
             "dimension mismatch: expected " + std::to_string(ds.feature_dim) + ", found " +
                 std::to_string(p.feature.size()));
      }
      if (!p.feature.allFinite()) fail(bag.id, where + ".feature", "non-finite value");
    }
    if (bag.ground_truth) {
      for (std::size_t i = 0; i < bag.ground_truth->size(); ++i) {
        const auto& g = (*bag.ground_truth)[i];
        const std::string where = "ground_truth[" + std::to_string(i) + "]";
        if (g.class_index < 0 || static_cast<std::size_t>(g.class_index) >= n) {
          fail(bag.id, where + ".class", "class index out of range");
        }
        if (!g.box.valid()) fail(bag.id, where + ".box", "degenerate box " + box_text(g.box));
      }
    }
  }
}

namespace {

json box_json(const BoxD& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

BoxD box_from(const json& j, const std::string& bag, const std::string& field) {
  if (!j.is_array() || j.size() != 4) fail(bag, field, "expected [x1, y1, x2, y2]");
  BoxD b;
  try {
    b = BoxD{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  } catch (const json::exception&) {
    fail(bag, field, "box coordinates must be numbers");
  }
  return b;
}

template <typename T>
T get_field(const json& obj, const char* key, const std::string& bag) {
  if (!obj.is_object() || !obj.contains(key)) fail(bag, key, "missing");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(bag, key, std::string("wrong type (") + e.what() + ")");
  }
}

}  // namespace

std::string dataset_to_json(const Dataset& ds) {
  json root;
  root["classes"] = ds.classes;
  root["feature_dim"] = ds.feature_dim;
  json bags = json::array();
  for (const auto& bag : ds.bags) {
    json jb;
    jb["id"] = bag.id;
    jb["labels"] = bag.labels;
    json props = json::array();
    for (const auto& p : bag.proposals) {
      props.push_back({{"box", box_json(p.box)},
                       {"feature", std::vector<double>(p.feature.data(), p.feature.data() + p.feature.size())}});
    }
    jb["proposals"] = std::move(props);
    if (bag.ground_truth) {
      json gts = json::array();
      for (const auto& g : *bag.ground_truth) gts.push_back({{"class", g.class_index}, {"box", box_json(g.box)}});
      jb["ground_truth"] = std::move(gts);
    }
    bags.push_back(std::move(jb));
  }
  root["bags"] = std::move(bags);
  return root.dump() + "\n";
}

Dataset dataset_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("dataset: malformed JSON: ") + e.what());
  }
  Dataset ds;
  ds.classes = get_field<std::vector<std::string>>(root, "classes", "<dataset>");
  ds.feature_dim = get_field<int>(root, "feature_dim", "<dataset>");
  const auto& jbags = root.contains("bags") ? root["bags"] : throw DataError("dataset: field 'bags' missing");
  if (!jbags.is_array()) throw DataError("dataset: field 'bags' must be an array");
  for (std::size_t bi = 0; bi < jbags.size(); ++bi) {
    const auto& jb = jbags[bi];
    Bag bag;
    bag.id = get_field<std::string>(jb, "id", "#" + std::to_string(bi));
    bag.labels = get_field<std::vector<int>>(jb, "labels", bag.id);
    if (!jb.contains("proposals") || !jb["proposals"].is_array()) fail(bag.id, "proposals", "missing or not an array");
    const auto& jprops = jb["proposals"];
    for (std::size_t i = 0; i < jprops.size(); ++i) {
      const std::string where = "proposals[" + std::to_string(i) + "]";
      if (!jprops[i].contains("box")) fail(bag.id, where + ".box", "missing");
      Proposal p;
      p.box = box_from(jprops[i]["box"], bag.id, where + ".box");
      const auto feat = get_field<std::vector<double>>(jprops[i], "feature", bag.id);
      p.feature = Eigen::Map<const Vector>(feat.data(), static_cast<Eigen::Index>(feat.size()));
      bag.proposals.push_back(std::move(p));
    }
    if (jb.contains("ground_truth")) {
      const auto& jg = jb["ground_truth"];
      if (!jg.is_array()) fail(bag.id, "ground_truth", "must be an array");
      std::vector<GroundTruth> gts;
      for (std::size_t i = 0; i < jg.size(); ++i) {
        const std::string where = "ground_truth[" + std::to_string(i) + "]";
        GroundTruth g;
        g.class_index = get_field<int>(jg[i], "class", bag.id);
        if (!jg[i].contains("box")) fail(bag.id, where + ".box", "missing");
        g.box = box_from(jg[i]["box"], bag.id, where + ".box");
        gts.push_back(g);
      }
      bag.ground_truth = std::move(gts);
    }
    ds.bags.push_back(std::move(bag));
  }
  validate(ds);
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_json(read_text_file(path));
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  validate(ds);
  write_file_atomic(path, dataset_to_json(ds));
}

TrainingSet training_view(const Dataset& ds) {
  TrainingSet ts;
  ts.num_classes = ds.num_classes();
  ts.feature_dim = ds.feature_dim;
  ts.bags.reserve(ds.bags.size());
  for (const auto& bag : ds.bags) {
    ts.bags.push_back(TrainingBag{bag.id, bag.boxes(), bag.feature_matrix(), bag.labels, bag.positive_classes()});
  }
  return ts;
}

GroundTruthTable ground_truth_table(const Dataset& ds) {
  GroundTruthTable t;
  t.reserve(ds.bags.size());
  for (const auto& bag : ds.bags) t.push_back(bag.ground_truth.value_or(std::vector<GroundTruth>{}));
  return t;
}

bool has_ground_truth(const Dataset& ds) {
  return std::any_of(ds.bags.begin(), ds.bags.end(), [](const Bag& b) { return b.ground_truth.has_value(); });
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthConfig::validate() const {
  if (num_classes < 1) throw DataError("synth: num_classes must be >= 1");
  if (bags_per_class < 0 || negatives < 0) throw DataError("synth: bag counts must be non-negative");
  if (bags_per_class * num_classes + negatives < 1) throw DataError("synth: no bags requested");
  if (proposals_per_bag < 3) throw DataError("synth: proposals_per_bag must be >= 3");
  if (feature_dim < 3 * num_classes) throw DataError("synth: feature_dim must be >= 3 * num_classes");
  if (!(part_fraction >= 0.0 && part_fraction <= 1.0)) throw DataError("synth: part_fraction must lie in [0, 1]");
  if (!(noise_sigma >= 0.0)) throw DataError("synth: noise_sigma must be non-negative");
}

namespace {

constexpr int kMaxTries = 10000;

// Feature amplitudes. Part boxes see the discriminative third of a class block more
// strongly than object boxes see the whole block.
constexpr double kPartAmplitude = 0.3;
constexpr double kObjectAmplitude = 0.22;
constexpr double kClutterAmplitude = 0.15;
constexpr double kNearShare = 0.6;  // of the non-part proposals in a positive bag

class SynthSampler {
 public:
  SynthSampler(const SynthConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    block_ = cfg.feature_dim / cfg.num_classes;
    part_dims_ = std::max(1, block_ / 3);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  BoxD object_box() {
    const double w = uniform(0.25, 0.6);
    const double h = uniform(0.25, 0.6);
    const double x = uniform(0.0, 1.0 - w);
    const double y = uniform(0.0, 1.0 - h);
    return BoxD{x, y, x + w, y + h};
  }

  BoxD near_box(const BoxD& obj) {
    for (int t = 0; t < kMaxTries; ++t) {
      const double jw = 0.15 * obj.width();
      const double jh = 0.15 * obj.height();
      BoxD b = clip({obj.x1 + uniform(-jw, jw), obj.y1 + uniform(-jh, jh), obj.x2 + uniform(-jw, jw),
                     obj.y2 + uniform(-jh, jh)});
      if (b.valid() && iou(b, obj) >= 0.6) return b;
    }
    throw DataError("synth: could not place a near-object proposal");
  }

  /// Part boxes cluster around one discriminative sub-region of the object.
  BoxD part_box(const BoxD& obj, const BoxD& part_region) {
    for (int t = 0; t < kMaxTries; ++t) {
      const double jw = 0.12 * part_region.width();
      const double jh = 0.12 * part_region.height();
      BoxD b = clip({part_region.x1 + uniform(-jw, jw), part_region.y1 + uniform(-jh, jh),
                     part_region.x2 + uniform(-jw, jw), part_region.y2 + uniform(-jh, jh)});
      const double o = iou(b, obj);
      if (b.valid() && o >= 0.2 && o < 0.5) return b;
    }
    throw DataError("synth: could not place a part proposal");
  }

  BoxD part_region(const BoxD& obj) {
    const double fw = uniform(0.5, 0.6);
    const double fh = uniform(0.5, 0.6);
    const double w = fw * obj.width();
    const double h = fh * obj.height();
    const double x = uniform(obj.x1, obj.x2 - w);
    const double y = uniform(obj.y1, obj.y2 - h);
    return BoxD{x, y, x + w, y + h};
  }

  BoxD background_box(const std::vector<BoxD>& objects) {
    for (int t = 0; t < kMaxTries; ++t) {
      const double w = uniform(0.1, 0.5);
      const double h = uniform(0.1, 0.5);
      const double x = uniform(0.0, 1.0 - w);
      const double y = uniform(0.0, 1.0 - h);
      BoxD b{x, y, x + w, y + h};
      bool ok = b.valid();
      for (const auto& o : objects) ok = ok && iou(b, o) < 0.2;
      if (ok) return b;
    }
    throw DataError("synth: could not place a background proposal");
  }

  Vector noise() {
    Vector v(cfg_.feature_dim);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = cfg_.noise_sigma * gaussian();
    return v;
  }

  Vector object_feature(int cls) {
    Vector v = noise();
    v.segment(cls * block_, block_).array() += kObjectAmplitude;
    return v;
  }

  Vector part_feature(int cls) {
    Vector v = noise();
    v.segment(cls * block_, part_dims_).array() += kPartAmplitude;
    return v;
  }

  /// Background carries non-discriminative clutter: a random slice of some class block
  /// outside its discriminative part.
  Vector background_feature() {
    Vector v = noise();
    const int cls = static_cast<int>(rng_() % static_cast<std::uint64_t>(cfg_.num_classes));
    const int rest = block_ - part_dims_;
    if (rest > 0) {
      const int off = static_cast<int>(rng_() % static_cast<std::uint64_t>(rest));
      v[cls * block_ + part_dims_ + off] += kClutterAmplitude;
    }
    return v;
  }

  void shuffle(std::vector<Proposal>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng_() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  // Box-Muller on the portable uniform so output does not depend on the standard library.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double u2 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  static BoxD clip(BoxD b) {
    b.x1 = std::clamp(b.x1, 0.0, 1.0);
    b.y1 = std::clamp(b.y1, 0.0, 1.0);
    b.x2 = std::clamp(b.x2, 0.0, 1.0);
    b.y2 = std::clamp(b.y2, 0.0, 1.0);
    return b;
  }

  const SynthConfig& cfg_;
  std::mt19937_64 rng_;
  int block_ = 0;
  int part_dims_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace

Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  SynthSampler s(cfg);
  Dataset ds;
  ds.feature_dim = cfg.feature_dim;
  for (int c = 0; c < cfg.num_classes; ++c) ds.classes.push_back("class" + std::to_string(c));

  const int n = cfg.proposals_per_bag;
  const int n_part = static_cast<int>(std::lround(cfg.part_fraction * n));
  const int n_rest = n - n_part;
  const int n_near = std::max(n_rest > 1 ? 1 : 0, static_cast<int>(n_rest * kNearShare));

  int serial = 0;
  auto next_id = [&](const std::string& prefix) {
    std::ostringstream os;
    os << prefix << "_" << serial++;
    return os.str();
  };

  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int b = 0; b < cfg.bags_per_class; ++b) {
      Bag bag;
      bag.id = next_id("pos");
      bag.labels.assign(static_cast<std::size_t>(cfg.num_classes), 0);
      bag.labels[static_cast<std::size_t>(c)] = 1;
      const BoxD obj = s.object_box();
      const BoxD region = s.part_region(obj);
      for (int i = 0; i < n_near; ++i) bag.proposals.push_back({s.near_box(obj), s.object_feature(c)});
      for (int i = 0; i < n_part; ++i) bag.proposals.push_back({s.part_box(obj, region), s.part_feature(c)});
      for (int i = n_near + n_part; i < n; ++i) {
        bag.proposals.push_back({s.background_box({obj}), s.background_feature()});
      }
      s.shuffle(bag.proposals);
      bag.ground_truth = std::vector<GroundTruth>{{c, obj}};
      ds.bags.push_back(std::move(bag));
    }
  }
  for (int b = 0; b < cfg.negatives; ++b) {
    Bag bag;
    bag.id = next_id("neg");
    bag.labels.assign(static_cast<std::size_t>(cfg.num_classes), 0);
    for (int i = 0; i < n; ++i) bag.proposals.push_back({s.background_box({}), s.background_feature()});
    bag.ground_truth = std::vector<GroundTruth>{};
    ds.bags.push_back(std::move(bag));
  }
  validate(ds);
  return ds;
}

}  // namespace melm
