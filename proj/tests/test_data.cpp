#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "melm/data.hpp"
#include "melm/io.hpp"

using namespace melm;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "melm_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Dataset tiny() {
  Dataset ds;
  ds.classes = {"a", "b"};
  ds.feature_dim = 2;
  Bag bag;
  bag.id = "img0";
  bag.labels = {1, 0};
  Vector f(2);
  f << 0.1, 0.2;
  bag.proposals.push_back({BoxD{0, 0, 1, 1}, f});
  bag.ground_truth = std::vector<GroundTruth>{{0, BoxD{0, 0, 1, 1}}};
  ds.bags.push_back(bag);
  return ds;
}

std::string message_of(const std::string& text) {
  try {
    dataset_from_json(text);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("minimal valid file loads") {
  const std::string text =
      R"({"classes":["a"],"feature_dim":2,"bags":[{"id":"x","labels":[1],"proposals":[{"box":[0,0,1,1],"feature":[1,2]}]}]})";
  const Dataset ds = dataset_from_json(text);
  REQUIRE(ds.bags.size() == 1);
  CHECK(ds.bags[0].proposals[0].feature[1] == 2.0);
  CHECK_FALSE(ds.bags[0].ground_truth.has_value());
}

TEST_CASE("feature length mismatch names the bag and field") {
  const std::string text =
      R"({"classes":["a"],"feature_dim":3,"bags":[{"id":"bad_bag","labels":[1],"proposals":[{"box":[0,0,1,1],"feature":[1,2]}]}]})";
  const std::string msg = message_of(text);
  CHECK(msg.find("bad_bag") != std::string::npos);
  CHECK(msg.find("feature") != std::string::npos);
  CHECK(msg.find("dimension mismatch") != std::string::npos);
}

TEST_CASE("malformed records are rejected") {
  CHECK(message_of("{not json").find("malformed") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1})").find("bags") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1,"bags":[{"id":"q","labels":[1,0],"proposals":[{"box":[0,0,1,1],"feature":[1]}]}]})")
            .find("labels") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1,"bags":[{"id":"q","labels":[1],"proposals":[{"box":[0,0,0,1],"feature":[1]}]}]})")
            .find("degenerate") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1,"bags":[{"id":"q","labels":[1],"proposals":[]}]})")
            .find("proposal") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1,"bags":[{"id":"q","labels":[1],"proposals":[{"box":[0,0,1,1],"feature":[1]}],"ground_truth":[{"class":3,"box":[0,0,1,1]}]}]})")
            .find("ground_truth") != std::string::npos);
  CHECK(message_of(R"({"classes":["a"],"feature_dim":1,"bags":[{"id":"q","labels":[1],"proposals":[{"box":[0,0,1,1],"feature":[1]}]},{"id":"q","labels":[0],"proposals":[{"box":[0,0,1,1],"feature":[1]}]}]})")
            .find("duplicate") != std::string::npos);
}

TEST_CASE("missing file is reported") {
  CHECK_THROWS(load_dataset(temp_path("does_not_exist.json")));
}

TEST_CASE("save then load round trips exactly") {
  SynthConfig cfg;
  cfg.bags_per_class = 3;
  cfg.negatives = 2;
  const Dataset ds = generate_synthetic(cfg);
  const auto path = temp_path("roundtrip.json");
  save_dataset(ds, path);
  const Dataset back = load_dataset(path);
  REQUIRE(back.bags.size() == ds.bags.size());
  CHECK(back.classes == ds.classes);
  CHECK(back.feature_dim == ds.feature_dim);
  for (std::size_t b = 0; b < ds.bags.size(); ++b) {
    CHECK(back.bags[b].id == ds.bags[b].id);
    CHECK(back.bags[b].labels == ds.bags[b].labels);
    CHECK(back.bags[b].ground_truth.has_value() == ds.bags[b].ground_truth.has_value());
    for (std::size_t i = 0; i < ds.bags[b].proposals.size(); ++i) {
      CHECK(back.bags[b].proposals[i].box == ds.bags[b].proposals[i].box);
      CHECK(back.bags[b].proposals[i].feature == ds.bags[b].proposals[i].feature);  // bit-exact
    }
  }
  CHECK(dataset_to_json(back) == dataset_to_json(ds));
}

TEST_CASE("two saves of the same dataset are byte identical") {
  const Dataset ds = tiny();
  save_dataset(ds, temp_path("a.json"));
  save_dataset(ds, temp_path("b.json"));
  CHECK(read_text_file(temp_path("a.json")) == read_text_file(temp_path("b.json")));
}

TEST_CASE("a dataset with an empty bag is rejected before writing") {
  Dataset ds = tiny();
  ds.bags[0].proposals.clear();
  const auto path = temp_path("empty_bag.json");
  std::filesystem::remove(path);
  CHECK_THROWS_AS(save_dataset(ds, path), DataError);
  CHECK_FALSE(std::filesystem::exists(path));
}

TEST_CASE("training view carries no ground truth") {
  const Dataset ds = tiny();
  const TrainingSet ts = training_view(ds);
  REQUIRE(ts.bags.size() == 1);
  CHECK(ts.bags[0].positives == std::vector<int>{0});
  CHECK(ts.bags[0].features.rows() == 1);
  CHECK(ground_truth_table(ds)[0].size() == 1);
  CHECK(has_ground_truth(ds));
}

TEST_CASE("synthetic: one class, one bag, no negatives") {
  SynthConfig cfg;
  cfg.num_classes = 1;
  cfg.bags_per_class = 1;
  cfg.negatives = 0;
  const Dataset ds = generate_synthetic(cfg);
  REQUIRE(ds.bags.size() == 1);
  CHECK(ds.bags[0].labels == std::vector<int>{1});
  REQUIRE(ds.bags[0].ground_truth.has_value());
  CHECK(ds.bags[0].ground_truth->size() >= 1);
}

TEST_CASE("synthetic: same config twice gives byte-identical datasets") {
  SynthConfig cfg;
  cfg.bags_per_class = 4;
  CHECK(dataset_to_json(generate_synthetic(cfg)) == dataset_to_json(generate_synthetic(cfg)));
  SynthConfig other = cfg;
  other.seed = cfg.seed + 1;
  CHECK(dataset_to_json(generate_synthetic(cfg)) != dataset_to_json(generate_synthetic(other)));
}

TEST_CASE("synthetic: part_fraction 0 leaves no proposal at IoU in [0.2, 0.5)") {
  SynthConfig cfg;
  cfg.part_fraction = 0.0;
  cfg.bags_per_class = 10;
  const Dataset ds = generate_synthetic(cfg);
  for (const auto& bag : ds.bags) {
    for (const auto& g : *bag.ground_truth) {
      for (const auto& p : bag.proposals) {
        const double o = iou(p.box, g.box);
        CHECK_FALSE((o >= 0.2 && o < 0.5));
      }
    }
  }
}

TEST_CASE("synthetic: geometry and label invariants") {
  SynthConfig cfg;
  cfg.num_classes = 3;
  cfg.bags_per_class = 8;
  cfg.negatives = 5;
  cfg.feature_dim = 12;
  const Dataset ds = generate_synthetic(cfg);
  CHECK(ds.bags.size() == 29);
  int near = 0;
  int parts = 0;
  for (const auto& bag : ds.bags) {
    CHECK(bag.proposals.size() == 30);
    for (const auto& p : bag.proposals) {
      CHECK(p.box.x1 >= 0.0);
      CHECK(p.box.y1 >= 0.0);
      CHECK(p.box.x2 <= 1.0);
      CHECK(p.box.y2 <= 1.0);
    }
    // class c is labeled iff a ground truth of class c exists
    for (int c = 0; c < 3; ++c) {
      bool has = false;
      for (const auto& g : *bag.ground_truth) has = has || g.class_index == c;
      CHECK(has == (bag.labels[static_cast<std::size_t>(c)] == 1));
    }
    for (const auto& g : *bag.ground_truth) {
      CHECK(g.box.width() >= 0.25);
      CHECK(g.box.width() <= 0.6);
      for (const auto& p : bag.proposals) {
        const double o = iou(p.box, g.box);
        near += o >= 0.6;
        parts += o >= 0.2 && o < 0.5;
        CHECK_FALSE((o >= 0.5 && o < 0.6));
      }
    }
  }
  CHECK(near > 0);
  CHECK(parts == 24 * 12);  // round(0.4 * 30) parts per positive bag
}

TEST_CASE("synthetic: invalid configs are rejected") {
  SynthConfig cfg;
  cfg.proposals_per_bag = 2;
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
  cfg = SynthConfig{};
  cfg.feature_dim = 5;
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
  cfg = SynthConfig{};
  cfg.part_fraction = 1.5;
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
  cfg = SynthConfig{};
  cfg.noise_sigma = -1;
  CHECK_THROWS_AS(generate_synthetic(cfg), DataError);
}

TEST_CASE("atomic write leaves no temp file behind") {
  const auto path = temp_path("atomic.txt");
  write_file_atomic(path, "hello\n");
  CHECK(read_text_file(path) == "hello\n");
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}
