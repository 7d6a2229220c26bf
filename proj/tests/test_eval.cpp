#include <doctest.h>

#include <cmath>
#include <limits>

#include <json.hpp>

#include "melm/eval.hpp"
#include "oracles.hpp"

using namespace melm;

namespace {

// Box of unit height starting at x, width w: IoU against [0,0,1,1] is w / 1 when nested.
Detection det(const std::string& bag, BoxD box, double score) { return Detection{bag, 0, box, score}; }

// Two classes, feature_dim 1: class 0 scores +x, class 1 scores -x, so larger x wins class 0.
ModelParams linear_params() {
  ModelParams p = init_params(ModelDims{1, 0, 2, 1}, 1, 0.0);
  p.discovery.weight(0, 0) = 1.0;
  p.discovery.weight(0, 1) = -1.0;
  return p;
}

Proposal prop(BoxD box, double x) {
  Vector f(1);
  f << x;
  return Proposal{box, f};
}

Bag bag_with(const std::string& id, std::vector<Proposal> props, BoxD gt) {
  Bag b;
  b.id = id;
  b.labels = {1, 0};
  b.proposals = std::move(props);
  b.ground_truth = std::vector<GroundTruth>{{0, gt}};
  return b;
}

Dataset dataset_of(std::vector<Bag> bags) {
  Dataset ds;
  ds.classes = {"a", "b"};
  ds.feature_dim = 1;
  ds.bags = std::move(bags);
  return ds;
}

const BoxD kGt{0.0, 0.0, 1.0, 1.0};

}  // namespace

TEST_CASE("AP: one GT, one detection at IoU 0.6 gives 1") {
  const BoxD d{0.0, 0.0, 0.6, 1.0};
  REQUIRE(iou(d, kGt) == doctest::Approx(0.6));
  const std::vector<Detection> dets{det("i", d, 0.9)};
  const std::vector<LabeledBox> gts{{"i", kGt}};
  CHECK(average_precision(dets, gts) == doctest::Approx(1.0));
}

TEST_CASE("AP: one GT, one detection at IoU 0.3 gives 0") {
  const BoxD d{0.0, 0.0, 0.3, 1.0};
  const std::vector<Detection> dets{det("i", d, 0.9)};
  const std::vector<LabeledBox> gts{{"i", kGt}};
  CHECK(average_precision(dets, gts) == 0.0);
}

TEST_CASE("AP: two GTs ranked TP, FP, TP gives 0.8333") {
  const BoxD g1{0.0, 0.0, 0.2, 0.2};
  const BoxD g2{0.5, 0.5, 0.8, 0.8};
  const std::vector<LabeledBox> gts{{"i", g1}, {"i", g2}};
  const std::vector<Detection> dets{det("i", g1, 0.9), det("i", BoxD{0.3, 0.0, 0.4, 0.1}, 0.8), det("i", g2, 0.7)};
  CHECK(average_precision(dets, gts) == doctest::Approx(0.5 + (2.0 / 3.0) * 0.5).epsilon(1e-9));
  CHECK(std::abs(average_precision(dets, gts) - 0.8333) < 1e-4);
}

TEST_CASE("AP: input order does not matter, only scores") {
  const BoxD g1{0.0, 0.0, 0.2, 0.2};
  const BoxD g2{0.5, 0.5, 0.8, 0.8};
  const std::vector<LabeledBox> gts{{"i", g1}, {"i", g2}};
  const std::vector<Detection> dets{det("i", g2, 0.7), det("i", g1, 0.9), det("i", BoxD{0.3, 0.0, 0.4, 0.1}, 0.8)};
  CHECK(average_precision(dets, gts) == doctest::Approx(0.8333333333));
}

TEST_CASE("AP: no GT and no detections is 0 and flagged") {
  bool undefined = false;
  CHECK(average_precision({}, {}, 0.5, &undefined) == 0.0);
  CHECK(undefined);
  const std::vector<LabeledBox> gts{{"i", kGt}};
  CHECK(average_precision({}, gts, 0.5, &undefined) == 0.0);
  CHECK_FALSE(undefined);
}

TEST_CASE("AP: a detection never matches a GT of another bag") {
  const std::vector<Detection> dets{det("a", kGt, 0.9)};
  const std::vector<LabeledBox> gts{{"b", kGt}};
  CHECK(average_precision(dets, gts) == 0.0);
}

TEST_CASE("AP equals brute-force PR integration on every small fixture") {
  // GT slots are disjoint boxes; each detection lands on one slot or on background.
  const std::vector<BoxD> slots{{0.0, 0.0, 0.2, 0.2}, {0.4, 0.4, 0.6, 0.6}, {0.8, 0.8, 1.0, 1.0}};
  const BoxD background{0.0, 0.7, 0.1, 0.8};
  int fixtures = 0;
  for (int num_gt = 0; num_gt <= 3; ++num_gt) {
    std::vector<LabeledBox> gts;
    for (int g = 0; g < num_gt; ++g) gts.push_back({"i", slots[static_cast<std::size_t>(g)]});
    const int choices = num_gt + 1;
    for (int n = 0; n <= 4; ++n) {
      int combos = 1;
      for (int k = 0; k < n; ++k) combos *= choices;
      for (int code = 0; code < combos; ++code) {
        std::vector<Detection> dets;
        std::vector<bool> used(static_cast<std::size_t>(num_gt), false);
        std::vector<bool> hits;
        int rest = code;
        for (int k = 0; k < n; ++k) {
          const int slot = rest % choices;
          rest /= choices;
          const double score = 1.0 - 0.1 * k;  // already in rank order
          if (slot == num_gt) {
            dets.push_back(det("i", background, score));
            hits.push_back(false);
          } else {
            dets.push_back(det("i", slots[static_cast<std::size_t>(slot)], score));
            hits.push_back(!used[static_cast<std::size_t>(slot)]);
            used[static_cast<std::size_t>(slot)] = true;
          }
        }
        // Feed detections reversed so the routine must sort them itself.
        std::vector<Detection> shuffled(dets.rbegin(), dets.rend());
        const double got = average_precision(shuffled, gts);
        const double want = oracle::ap_from_hits(hits, num_gt);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
        ++fixtures;
      }
    }
  }
  CHECK(fixtures > 300);
}

TEST_CASE("localization stats: worked examples") {
  const std::vector<BoxD> boxes{kGt, BoxD{2.0, 2.0, 3.0, 3.0}};
  const std::vector<BoxD> gts{kGt};
  {
    const std::vector<double> p{1.0, 0.0};
    const auto s = localization_stats(p, boxes, gts);
    CHECK(s.accuracy == doctest::Approx(1.0));
    CHECK(s.variance == doctest::Approx(0.0));
  }
  {
    const std::vector<double> p{0.5, 0.5};
    const auto s = localization_stats(p, boxes, gts);
    CHECK(s.accuracy == doctest::Approx(0.5));
    CHECK(s.variance == doctest::Approx(0.25));
    CHECK_FALSE(s.uniform_fallback);
  }
  {
    const std::vector<double> p{0.3};
    const std::vector<BoxD> one{BoxD{0.0, 0.0, 0.5, 1.0}};
    const auto s = localization_stats(p, one, gts);
    CHECK(s.accuracy == doctest::Approx(0.5));
    CHECK(s.variance == doctest::Approx(0.0));
  }
  {
    const std::vector<double> p{0.0, 0.0};
    const auto s = localization_stats(p, boxes, gts);
    CHECK(s.uniform_fallback);
    CHECK(s.accuracy == doctest::Approx(0.5));
    CHECK(s.variance == doctest::Approx(0.25));
  }
}

TEST_CASE("detect: single proposal, duplicate boxes, infinite floor") {
  const ModelParams p = linear_params();
  const Bag one = bag_with("one", {prop(kGt, 0.0)}, kGt);
  const auto d1 = detect(p, Head::discovery(), one, 0.4, 0.1);
  CHECK(d1.size() == 2);  // both classes at 0.5
  const auto d1c = detect(p, Head::discovery(), one, 0.4, 0.6);
  CHECK(d1c.empty());
  const Bag one_hi = bag_with("hi", {prop(kGt, 2.0)}, kGt);
  const auto d2 = detect(p, Head::discovery(), one_hi, 0.4, 0.5);
  REQUIRE(d2.size() == 1);
  CHECK(d2[0].class_index == 0);

  const Bag twin = bag_with("twin", {prop(kGt, 0.3), prop(kGt, 0.1)}, kGt);
  const auto d3 = detect(p, Head::discovery(), twin, 0.4, 0.0);
  REQUIRE(d3.size() == 2);
  CHECK(d3[0].class_index != d3[1].class_index);

  CHECK(detect(p, Head::discovery(), twin, 0.4, std::numeric_limits<double>::infinity()).empty());
}

TEST_CASE("top proposal breaks ties toward the lower index") {
  ProbMatrix probs(3, 1);
  probs << 0.2, 0.4, 0.4;
  CHECK(top_proposal(probs, 0) == 1);
}

TEST_CASE("CorLoc: 0.6 is correct, 0.49 is not, two bags average to 0.5") {
  const ModelParams p = linear_params();
  const BoxD good{0.0, 0.0, 0.6, 1.0};
  const BoxD bad{0.0, 0.0, 0.49, 1.0};
  const Bag hit = bag_with("hit", {prop(bad, 0.0), prop(good, 1.0)}, kGt);
  const Bag miss = bag_with("miss", {prop(bad, 1.0), prop(good, 0.0)}, kGt);
  CHECK(corloc(p, Head::discovery(), dataset_of({hit})).per_class[0] == 1.0);
  CHECK(corloc(p, Head::discovery(), dataset_of({miss})).per_class[0] == 0.0);
  const auto both = corloc(p, Head::discovery(), dataset_of({hit, miss}));
  CHECK(both.per_class[0] == doctest::Approx(0.5));
  CHECK(std::isnan(both.per_class[1]));  // class b has no positive bag
  CHECK(both.mean == doctest::Approx(0.5));
}

TEST_CASE("pointing: center inside, outside, exact cover") {
  const ModelParams p = linear_params();
  const BoxD far{0.4, 0.4, 2.0, 2.0};  // center (1.2, 1.2) lies outside kGt
  const BoxD small{0.1, 0.1, 0.3, 0.3};
  CHECK(pointing(p, Head::discovery(), dataset_of({bag_with("a", {prop(small, 1.0)}, kGt)})) == 1.0);
  CHECK(pointing(p, Head::discovery(), dataset_of({bag_with("b", {prop(far, 1.0)}, kGt)})) == 0.0);
  CHECK(pointing(p, Head::discovery(), dataset_of({bag_with("c", {prop(kGt, 1.0)}, kGt)})) == 1.0);
}

TEST_CASE("evaluate requires ground truth on positive bags") {
  const ModelParams p = linear_params();
  Bag b = bag_with("x", {prop(kGt, 1.0)}, kGt);
  b.ground_truth.reset();
  CHECK_THROWS(evaluate(p, Head::discovery(), dataset_of({b})));
}

TEST_CASE("metrics report carries the expected keys and warnings") {
  const ModelParams p = linear_params();
  const Dataset ds = dataset_of({bag_with("x", {prop(kGt, 1.0), prop(BoxD{2, 2, 3, 3}, 0.0)}, kGt)});
  const MetricsReport r = evaluate(p, Head::discovery(), ds);
  CHECK(r.map == doctest::Approx(1.0));
  CHECK(r.mean_corloc == doctest::Approx(1.0));
  CHECK(r.pointing == doctest::Approx(1.0));
  const auto j = nlohmann::json::parse(r.to_json());
  for (const char* key : {"mAP", "mAP_50_95", "CorLoc", "pointing", "loc_accuracy", "loc_variance", "per_class", "warnings"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["per_class"]["b"]["corloc"].is_null());
  CHECK(j["warnings"].size() >= 1);
}
