#include "melm/model.hpp"

#include <random>
#include <stdexcept>
#include <string>

namespace melm {

void ModelDims::validate() const {
  if (feature_dim <= 0) throw std::invalid_argument("model: feature_dim must be positive");
  if (hidden_dim < 0) throw std::invalid_argument("model: hidden_dim must be non-negative");
  if (num_classes <= 0) throw std::invalid_argument("model: num_classes must be positive");
  if (num_loc_branches < 1) throw std::invalid_argument("model: at least one localization branch is required");
}

const Layer& ModelParams::head(Head h) const {
  if (h.kind == Head::Kind::discovery) return discovery;
  if (h.branch < 0 || h.branch >= static_cast<int>(loc_heads.size())) {
    throw std::out_of_range("model: localization branch " + std::to_string(h.branch) + " does not exist");
  }
  return loc_heads[static_cast<std::size_t>(h.branch)];
}

Layer& ModelParams::head(Head h) {
  return const_cast<Layer&>(static_cast<const ModelParams&>(*this).head(h));
}

namespace {

bool finite(const Layer& l) { return l.weight.allFinite() && l.bias.allFinite(); }

Layer zero_layer(Eigen::Index in, Eigen::Index out) {
  return Layer{RowMatrix<double>::Zero(in, out), RowVector<double>::Zero(out)};
}

Layer zeros_like(const Layer& l) { return zero_layer(l.weight.rows(), l.weight.cols()); }

template <typename F>
void for_each_layer(ModelParams& p, F&& f) {
  if (p.hidden) f(*p.hidden);
  f(p.discovery);
  for (auto& l : p.loc_heads) f(l);
}

template <typename F>
void for_each_layer(const ModelParams& p, F&& f) {
  if (p.hidden) f(*p.hidden);
  f(p.discovery);
  for (const auto& l : p.loc_heads) f(l);
}

}  // namespace

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_layer(*this, [&](const Layer& l) { ok = ok && finite(l); });
  return ok;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z;
  z.dims = dims;
  if (hidden) z.hidden = melm::zeros_like(*hidden);
  z.discovery = melm::zeros_like(discovery);
  for (const auto& l : loc_heads) z.loc_heads.push_back(melm::zeros_like(l));
  return z;
}

ModelParams init_params(const ModelDims& dims, std::uint64_t seed, double scale) {
  dims.validate();
  if (!(scale >= 0.0)) throw std::invalid_argument("model: init scale must be non-negative");
  std::mt19937_64 rng(seed);
  auto fill = [&](Eigen::Index in, Eigen::Index out) {
    Layer l = zero_layer(in, out);
    for (Eigen::Index i = 0; i < in; ++i) {
      for (Eigen::Index j = 0; j < out; ++j) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        l.weight(i, j) = scale * (2.0 * u - 1.0);
      }
    }
    return l;
  };
  ModelParams p;
  p.dims = dims;
  const Eigen::Index head_in = dims.hidden_dim > 0 ? dims.hidden_dim : dims.feature_dim;
  if (dims.hidden_dim > 0) p.hidden = fill(dims.feature_dim, dims.hidden_dim);
  p.discovery = fill(head_in, dims.num_classes);
  for (int k = 0; k < dims.num_loc_branches; ++k) p.loc_heads.push_back(fill(head_in, dims.num_classes));
  return p;
}

namespace {

void check_features(const ModelParams& params, const FeatureMatrix& features) {
  if (features.cols() != params.dims.feature_dim) {
    throw std::invalid_argument("model: feature width " + std::to_string(features.cols()) + " != D " +
                                std::to_string(params.dims.feature_dim));
  }
}

RowMatrix<double> hidden_preactivation(const Layer& hidden, const FeatureMatrix& features) {
  return (features * hidden.weight).rowwise() + hidden.bias;
}

}  // namespace

Scores forward(const ModelParams& params, const FeatureMatrix& features, Head head) {
  check_features(params, features);
  const Layer& h = params.head(head);
  if (params.hidden) {
    const RowMatrix<double> act = hidden_preactivation(*params.hidden, features).cwiseMax(0.0);
    return (act * h.weight).rowwise() + h.bias;
  }
  return (features * h.weight).rowwise() + h.bias;
}

HeadGradient backward_head(const ModelParams& params, const FeatureMatrix& features, Head head,
                           const Scores& upstream) {
  check_features(params, features);
  const Layer& h = params.head(head);
  if (upstream.rows() != features.rows() || upstream.cols() != h.out_dim()) {
    throw std::invalid_argument("model: upstream gradient shape does not match forward output");
  }
  HeadGradient g;
  if (!params.hidden) {
    g.head.weight = features.transpose() * upstream;
    g.head.bias = upstream.colwise().sum();
    return g;
  }
  const RowMatrix<double> pre = hidden_preactivation(*params.hidden, features);
  const RowMatrix<double> act = pre.cwiseMax(0.0);
  g.head.weight = act.transpose() * upstream;
  g.head.bias = upstream.colwise().sum();
  const RowMatrix<double> d_act = upstream * h.weight.transpose();
  const RowMatrix<double> d_pre = (pre.array() > 0.0).select(d_act, 0.0);
  g.hidden = Layer{features.transpose() * d_pre, d_pre.colwise().sum()};
  return g;
}

void accumulate(ModelParams& grads, Head head, const HeadGradient& g, double scale, bool include_hidden) {
  Layer& dst = grads.head(head);
  dst.weight += scale * g.head.weight;
  dst.bias += scale * g.head.bias;
  if (include_hidden && g.hidden && grads.hidden) {
    grads.hidden->weight += scale * g.hidden->weight;
    grads.hidden->bias += scale * g.hidden->bias;
  }
}

std::vector<Layer*> layers(ModelParams& p) {
  std::vector<Layer*> out;
  for_each_layer(p, [&](Layer& l) { out.push_back(&l); });
  return out;
}

std::vector<const Layer*> layers(const ModelParams& p) {
  std::vector<const Layer*> out;
  for_each_layer(p, [&](const Layer& l) { out.push_back(&l); });
  return out;
}

std::vector<double> flatten(const ModelParams& p) {
  std::vector<double> out;
  out.reserve(parameter_count(p.dims));
  for_each_layer(p, [&](const Layer& l) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  });
  return out;
}

void unflatten(ModelParams& p, const std::vector<double>& flat) {
  std::size_t expected = 0;
  for_each_layer(p, [&](const Layer& l) { expected += static_cast<std::size_t>(l.weight.size() + l.bias.size()); });
  if (flat.size() != expected) {
    throw std::invalid_argument("model: flat parameter vector has " + std::to_string(flat.size()) +
                                " entries, expected " + std::to_string(expected));
  }
  std::size_t at = 0;
  for_each_layer(p, [&](Layer& l) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), l.weight.size(), l.weight.data());
    at += static_cast<std::size_t>(l.weight.size());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), l.bias.size(), l.bias.data());
    at += static_cast<std::size_t>(l.bias.size());
  });
}

std::size_t parameter_count(const ModelDims& d) {
  const std::size_t head_in = static_cast<std::size_t>(d.hidden_dim > 0 ? d.hidden_dim : d.feature_dim);
  const std::size_t n = static_cast<std::size_t>(d.num_classes);
  std::size_t total = (head_in + 1) * n * static_cast<std::size_t>(1 + d.num_loc_branches);
  if (d.hidden_dim > 0) total += static_cast<std::size_t>(d.feature_dim + 1) * static_cast<std::size_t>(d.hidden_dim);
  return total;
}

}  // namespace melm
