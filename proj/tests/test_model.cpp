#include <doctest.h>

#include <random>

#include "melm/model.hpp"

using namespace melm;

namespace {

FeatureMatrix random_features(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  FeatureMatrix f(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) f(i, j) = n(rng);
  }
  return f;
}

ModelParams randomized(ModelDims dims, std::uint64_t seed) {
  ModelParams p = init_params(dims, seed, 0.8);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.5);
  for (Layer* l : layers(p)) {
    for (Eigen::Index j = 0; j < l->bias.size(); ++j) l->bias[j] = n(rng);
  }
  return p;
}

}  // namespace

TEST_CASE("init_params: zero scale gives zero weights, biases are zero") {
  const ModelParams p = init_params({6, 0, 3, 2}, 1, 0.0);
  CHECK(p.discovery.weight.isZero());
  CHECK(p.discovery.bias.isZero());
  CHECK(p.loc_heads.size() == 2);
  CHECK_FALSE(p.hidden.has_value());
}

TEST_CASE("init_params is deterministic per seed and bounded by scale") {
  const ModelDims dims{5, 4, 3, 2};
  const ModelParams a = init_params(dims, 42, 0.1);
  const ModelParams b = init_params(dims, 42, 0.1);
  CHECK(a == b);
  CHECK_FALSE(a == init_params(dims, 43, 0.1));
  for (const Layer* l : layers(a)) {
    CHECK(l->weight.cwiseAbs().maxCoeff() <= 0.1);
    CHECK(l->bias.isZero());
  }
  REQUIRE(a.hidden.has_value());
  CHECK(a.hidden->weight.rows() == 5);
  CHECK(a.hidden->weight.cols() == 4);
  CHECK(a.discovery.weight.rows() == 4);
}

TEST_CASE("invalid dims are rejected") {
  CHECK_THROWS(init_params({4, 0, 0, 1}, 1, 0.1));
  CHECK_THROWS(init_params({0, 0, 2, 1}, 1, 0.1));
  CHECK_THROWS(init_params({4, 0, 2, 0}, 1, 0.1));
  CHECK_THROWS(init_params({4, -1, 2, 1}, 1, 0.1));
}

TEST_CASE("forward: zero params give zero scores") {
  const ModelParams p = init_params({3, 0, 2, 1}, 1, 0.0);
  FeatureMatrix f = FeatureMatrix::Ones(4, 3);
  CHECK(forward(p, f, Head::discovery()).isZero());
}

TEST_CASE("forward with identity columns selects feature coordinates") {
  ModelParams p = init_params({3, 0, 2, 1}, 1, 0.0);
  p.loc_heads[0].weight(0, 0) = 1.0;
  p.loc_heads[0].weight(2, 1) = 1.0;
  FeatureMatrix f(2, 3);
  f << 1, 2, 3, 4, 5, 6;
  const Scores s = forward(p, f, Head::localization(0));
  CHECK(s(0, 0) == 1);
  CHECK(s(0, 1) == 3);
  CHECK(s(1, 0) == 4);
  CHECK(s(1, 1) == 6);
}

TEST_CASE("forward equals explicit dot products, with and without a hidden layer") {
  std::mt19937_64 rng(4);
  for (int hidden : {0, 5}) {
    const ModelParams p = randomized({4, hidden, 3, 2}, 9);
    const FeatureMatrix f = random_features(rng, 6, 4);
    const Scores s = forward(p, f, Head::localization(1));
    for (Eigen::Index h = 0; h < 6; ++h) {
      std::vector<double> in(f.row(h).data(), f.row(h).data() + 4);
      if (p.hidden) {
        std::vector<double> act(static_cast<std::size_t>(hidden));
        for (int k = 0; k < hidden; ++k) {
          double z = p.hidden->bias[k];
          for (int d = 0; d < 4; ++d) z += in[static_cast<std::size_t>(d)] * p.hidden->weight(d, k);
          act[static_cast<std::size_t>(k)] = z > 0 ? z : 0;
        }
        in = act;
      }
      for (Eigen::Index y = 0; y < 3; ++y) {
        double z = p.loc_heads[1].bias[y];
        for (std::size_t d = 0; d < in.size(); ++d) z += in[d] * p.loc_heads[1].weight(static_cast<Eigen::Index>(d), y);
        CHECK(s(h, y) == doctest::Approx(z).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("forward rejects a feature width mismatch") {
  const ModelParams p = init_params({4, 0, 2, 1}, 1, 0.1);
  CHECK_THROWS(forward(p, FeatureMatrix::Ones(2, 3), Head::discovery()));
  CHECK_THROWS(p.head(Head::localization(3)));
}

TEST_CASE("backward_head: zero upstream gives zero gradients") {
  const ModelParams p = randomized({4, 3, 2, 1}, 2);
  std::mt19937_64 rng(1);
  const auto g = backward_head(p, random_features(rng, 3, 4), Head::discovery(), Scores::Zero(3, 2));
  CHECK(g.head.weight.isZero());
  CHECK(g.head.bias.isZero());
  REQUIRE(g.hidden.has_value());
  CHECK(g.hidden->weight.isZero());
}

TEST_CASE("backward_head: single proposal weight gradient is the outer product") {
  const ModelParams p = randomized({3, 0, 2, 1}, 2);
  FeatureMatrix f(1, 3);
  f << 0.5, -1.0, 2.0;
  Scores up(1, 2);
  up << 3.0, -0.25;
  const auto g = backward_head(p, f, Head::discovery(), up);
  const RowMatrix<double> outer = f.transpose() * up;
  CHECK((g.head.weight - outer).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((g.head.bias - up).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("backward_head matches finite differences on every parameter") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int hidden = trial % 2 == 0 ? 0 : 4;
    const ModelDims dims{1 + static_cast<int>(rng() % 8), hidden, 1 + static_cast<int>(rng() % 3), 2};
    const ModelParams p = randomized(dims, 100 + static_cast<std::uint64_t>(trial));
    const FeatureMatrix f = random_features(rng, 1 + static_cast<Eigen::Index>(rng() % 6), dims.feature_dim);
    const Scores up = random_features(rng, f.rows(), dims.num_classes);
    const Head head = trial % 3 == 0 ? Head::discovery() : Head::localization(1);
    // L = sum(upstream .* scores), so dL/dtheta is what backward_head returns.
    const auto loss = [&](const ModelParams& q) { return forward(q, f, head).cwiseProduct(up).sum(); };

    ModelParams grads = p.zeros_like();
    accumulate(grads, head, backward_head(p, f, head, up));
    const auto analytic = flatten(grads);
    auto flat = flatten(p);
    for (std::size_t i = 0; i < flat.size(); ++i) {
      ModelParams a = p;
      ModelParams b = p;
      auto fa = flat;
      auto fb = flat;
      fa[i] += 1e-6;
      fb[i] -= 1e-6;
      unflatten(a, fa);
      unflatten(b, fb);
      const double numeric = (loss(a) - loss(b)) / 2e-6;
      CHECK(std::abs(numeric - analytic[i]) <= 1e-5 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST_CASE("accumulate scales and can skip the hidden layer") {
  const ModelParams p = randomized({3, 2, 2, 1}, 5);
  std::mt19937_64 rng(3);
  const FeatureMatrix f = random_features(rng, 2, 3);
  const auto g = backward_head(p, f, Head::localization(0), Scores::Ones(2, 2));
  ModelParams sum = p.zeros_like();
  accumulate(sum, Head::localization(0), g, 2.0, false);
  CHECK(sum.hidden->weight.isZero());
  CHECK((sum.loc_heads[0].weight - 2.0 * g.head.weight).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(sum.discovery.weight.isZero());
}

TEST_CASE("flatten and unflatten round trip") {
  const ModelDims dims{4, 3, 2, 2};
  const ModelParams p = randomized(dims, 8);
  const auto flat = flatten(p);
  CHECK(flat.size() == parameter_count(dims));
  ModelParams q = p.zeros_like();
  unflatten(q, flat);
  CHECK(q == p);
  CHECK_THROWS(unflatten(q, std::vector<double>(flat.size() + 1)));
}

TEST_CASE("all_finite detects NaN") {
  ModelParams p = init_params({2, 0, 2, 1}, 1, 0.1);
  CHECK(p.all_finite());
  p.loc_heads[0].bias[1] = std::nan("");
  CHECK_FALSE(p.all_finite());
}
