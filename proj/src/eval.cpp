#include "melm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace melm {

ProbMatrix proposal_probabilities(const ModelParams& params, const FeatureMatrix& features, Head head) {
  return row_softmax(forward(params, features, head));
}

std::vector<Detection> detect(const ModelParams& params, Head head, const Bag& bag, double nms_iou,
                              double score_floor) {
  const ProbMatrix probs = proposal_probabilities(params, bag.feature_matrix(), head);
  const auto boxes = bag.boxes();
  std::vector<Detection> out;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    std::vector<BoxD> cand_boxes;
    std::vector<double> cand_scores;
    for (Eigen::Index h = 0; h < probs.rows(); ++h) {
      if (probs(h, c) >= score_floor) {
        cand_boxes.push_back(boxes[static_cast<std::size_t>(h)]);
        cand_scores.push_back(probs(h, c));
      }
    }
    for (std::size_t k : nms<double>(cand_boxes, cand_scores, nms_iou)) {
      out.push_back(Detection{bag.id, static_cast<int>(c), cand_boxes[k], cand_scores[k]});
    }
  }
  return out;
}

double average_precision(std::span<const Detection> detections, std::span<const LabeledBox> ground_truths,
                         double iou_threshold, bool* undefined) {
  if (undefined) *undefined = detections.empty() && ground_truths.empty();
  if (ground_truths.empty()) return 0.0;

  std::vector<std::size_t> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> matched(ground_truths.size(), false);
  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t tp = 0;
  std::size_t seen = 0;
  const double total = static_cast<double>(ground_truths.size());
  for (std::size_t idx : order) {
    const Detection& d = detections[idx];
    double best = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (matched[g] || ground_truths[g].bag_id != d.bag_id) continue;
      const double o = iou(d.box, ground_truths[g].box);
      if (o >= iou_threshold && o > best) {
        best = o;
        best_gt = g;
      }
    }
    ++seen;
    if (best >= 0.0) {
      matched[best_gt] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / total);
  }

  // All-points interpolation: precision envelope integrated over recall steps.
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

LocalizationStats localization_stats(std::span<const double> probs, std::span<const BoxD> boxes,
                                     std::span<const BoxD> gts) {
  if (gts.empty()) throw std::invalid_argument("localization_stats: no ground truth for the class");
  if (probs.size() != boxes.size() || probs.empty()) {
    throw std::invalid_argument("localization_stats: probs and boxes must be non-empty and equal in length");
  }
  LocalizationStats s;
  std::vector<double> overlap(boxes.size(), 0.0);
  for (std::size_t h = 0; h < boxes.size(); ++h) {
    for (const auto& g : gts) overlap[h] = std::max(overlap[h], iou(boxes[h], g));
  }
  double total = 0.0;
  for (double p : probs) total += std::max(0.0, p);
  std::vector<double> w(probs.size());
  if (total <= 0.0) {
    s.uniform_fallback = true;
    std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
  } else {
    for (std::size_t h = 0; h < w.size(); ++h) w[h] = std::max(0.0, probs[h]) / total;
  }
  for (std::size_t h = 0; h < w.size(); ++h) s.accuracy += w[h] * overlap[h];
  for (std::size_t h = 0; h < w.size(); ++h) s.variance += w[h] * (overlap[h] - s.accuracy) * (overlap[h] - s.accuracy);
  return s;
}

std::size_t top_proposal(const ProbMatrix& probs, int cls) {
  Eigen::Index best = 0;
  for (Eigen::Index h = 1; h < probs.rows(); ++h) {
    if (probs(h, cls) > probs(best, cls)) best = h;
  }
  return static_cast<std::size_t>(best);
}

namespace {

std::vector<BoxD> class_boxes(const Bag& bag, int cls) {
  std::vector<BoxD> out;
  if (!bag.ground_truth) return out;
  for (const auto& g : *bag.ground_truth) {
    if (g.class_index == cls) out.push_back(g.box);
  }
  return out;
}

void require_ground_truth(const Dataset& ds) {
  for (const auto& bag : ds.bags) {
    if (!bag.positive_classes().empty() && !bag.ground_truth) {
      throw std::runtime_error("evaluation requires ground_truth on every positive bag; bag '" + bag.id +
                               "' has none");
    }
  }
}

/// Calls f(bag, cls, probs, gts) for every positive (bag, class) pair.
template <typename F>
void for_each_positive(const ModelParams& params, Head head, const Dataset& ds, F&& f) {
  for (const auto& bag : ds.bags) {
    const auto positives = bag.positive_classes();
    if (positives.empty()) continue;
    const ProbMatrix probs = proposal_probabilities(params, bag.feature_matrix(), head);
    for (int c : positives) f(bag, c, probs, class_boxes(bag, c));
  }
}

}  // namespace

CorLocResult corloc(const ModelParams& params, Head head, const Dataset& ds) {
  require_ground_truth(ds);
  const auto n = static_cast<std::size_t>(ds.num_classes());
  std::vector<int> hits(n, 0);
  CorLocResult r;
  r.positives.assign(n, 0);
  for_each_positive(params, head, ds, [&](const Bag& bag, int c, const ProbMatrix& probs, const std::vector<BoxD>& gts) {
    const BoxD& top = bag.proposals[top_proposal(probs, c)].box;
    ++r.positives[static_cast<std::size_t>(c)];
    if (std::any_of(gts.begin(), gts.end(), [&](const BoxD& g) { return iou(top, g) >= 0.5; })) {
      ++hits[static_cast<std::size_t>(c)];
    }
  });
  double sum = 0.0;
  int counted = 0;
  for (std::size_t c = 0; c < n; ++c) {
    if (r.positives[c] == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.per_class.push_back(static_cast<double>(hits[c]) / r.positives[c]);
    sum += r.per_class.back();
    ++counted;
  }
  r.mean = counted > 0 ? sum / counted : 0.0;
  return r;
}

double pointing(const ModelParams& params, Head head, const Dataset& ds) {
  require_ground_truth(ds);
  int total = 0;
  int hits = 0;
  for_each_positive(params, head, ds, [&](const Bag& bag, int c, const ProbMatrix& probs, const std::vector<BoxD>& gts) {
    const BoxD& top = bag.proposals[top_proposal(probs, c)].box;
    ++total;
    if (std::any_of(gts.begin(), gts.end(), [&](const BoxD& g) { return g.contains(top.center_x(), top.center_y()); })) {
      ++hits;
    }
  });
  return total > 0 ? static_cast<double>(hits) / total : 0.0;
}

MetricsReport evaluate(const ModelParams& params, Head head, const Dataset& ds, const EvalSettings& settings) {
  require_ground_truth(ds);
  MetricsReport r;
  r.classes = ds.classes;
  const int n = ds.num_classes();

  std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n));
  std::vector<std::vector<LabeledBox>> gts(static_cast<std::size_t>(n));
  for (const auto& bag : ds.bags) {
    for (auto& d : detect(params, head, bag, settings.nms_iou, settings.score_floor)) {
      dets[static_cast<std::size_t>(d.class_index)].push_back(std::move(d));
    }
    if (bag.ground_truth) {
      for (const auto& g : *bag.ground_truth) gts[static_cast<std::size_t>(g.class_index)].push_back({bag.id, g.box});
    }
  }

  auto mean_ap = [&](double thr, std::vector<double>* per_class) {
    double sum = 0.0;
    int counted = 0;
    for (int c = 0; c < n; ++c) {
      bool undefined = false;
      const auto& cd = dets[static_cast<std::size_t>(c)];
      const auto& cg = gts[static_cast<std::size_t>(c)];
      const double ap = average_precision(cd, cg, thr, &undefined);
      if (per_class) {
        per_class->push_back(ap);
        if (undefined) r.warnings.push_back("class '" + ds.classes[static_cast<std::size_t>(c)] +
                                            "': no detections and no ground truth, AP set to 0");
      }
      if (!cg.empty()) {
        sum += ap;
        ++counted;
      }
    }
    return counted > 0 ? sum / counted : 0.0;
  };
  r.map = mean_ap(settings.ap_iou, &r.ap);
  double coco = 0.0;
  for (int i = 0; i < 10; ++i) coco += mean_ap(0.5 + 0.05 * i, nullptr);
  r.map_50_95 = coco / 10.0;

  const CorLocResult cl = corloc(params, head, ds);
  r.corloc = cl.per_class;
  r.mean_corloc = cl.mean;
  for (int c = 0; c < n; ++c) {
    if (cl.positives[static_cast<std::size_t>(c)] == 0) {
      r.warnings.push_back("class '" + ds.classes[static_cast<std::size_t>(c)] + "': no positive bags, excluded from CorLoc");
    }
  }
  r.pointing = pointing(params, head, ds);

  double acc = 0.0;
  double var = 0.0;
  int pairs = 0;
  bool fallback = false;
  for_each_positive(params, head, ds, [&](const Bag& bag, int c, const ProbMatrix& probs, const std::vector<BoxD>& cg) {
    if (cg.empty()) return;
    std::vector<double> p(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index h = 0; h < probs.rows(); ++h) p[static_cast<std::size_t>(h)] = probs(h, c);
    const auto s = localization_stats(p, bag.boxes(), cg);
    fallback = fallback || s.uniform_fallback;
    acc += s.accuracy;
    var += s.variance;
    ++pairs;
  });
  if (pairs > 0) {
    r.loc_accuracy = acc / pairs;
    r.loc_variance = var / pairs;
  }
  if (fallback) r.warnings.push_back("localization stats: all-zero probabilities, uniform weights used");
  return r;
}

std::string MetricsReport::to_json() const {
  using nlohmann::json;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json per_class = json::object();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    per_class[classes[c]] = {{"ap", num(ap[c])}, {"corloc", num(corloc[c])}};
  }
  json j = {{"mAP", map},
            {"mAP_50_95", map_50_95},
            {"CorLoc", mean_corloc},
            {"pointing", pointing},
            {"loc_accuracy", loc_accuracy},
            {"loc_variance", loc_variance},
            {"per_class", per_class},
            {"warnings", warnings}};
  return j.dump(2) + "\n";
}

}  // namespace melm
