#include "melm/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace melm {

int CliquePartition::clique_of(std::size_t proposal) const {
  for (std::size_t c = 0; c < cliques.size(); ++c) {
    const auto& m = cliques[c].members;
    if (std::find(m.begin(), m.end(), proposal) != m.end()) return static_cast<int>(c);
  }
  return -1;
}

namespace {

std::vector<std::size_t> top_k_pool(std::span<const double> objectness, int top_k) {
  if (top_k < 1) throw std::invalid_argument("partition: top_k must be >= 1");
  for (double v : objectness) {
    if (!std::isfinite(v)) throw std::invalid_argument("partition: objectness must be finite");
  }
  auto order = order_by_score(objectness);
  if (order.size() > static_cast<std::size_t>(top_k)) order.resize(static_cast<std::size_t>(top_k));
  return order;
}

}  // namespace

CliquePartition partition_cliques(std::span<const BoxD> boxes, std::span<const double> objectness, double tau,
                                  int top_k) {
  if (boxes.size() != objectness.size()) throw std::invalid_argument("partition: boxes and objectness differ in length");
  CliquePartition out;
  out.tau = tau;
  out.pool = top_k_pool(objectness, top_k);

  std::vector<bool> assigned(out.pool.size(), false);
  for (std::size_t seed = 0; seed < out.pool.size(); ++seed) {
    if (assigned[seed]) continue;
    Clique clique;
    clique.members.push_back(out.pool[seed]);
    assigned[seed] = true;
    // Breadth-first closure: each member gets one scan over the remaining pool.
    for (std::size_t at = 0; at < clique.members.size(); ++at) {
      const BoxD& anchor = boxes[clique.members[at]];
      for (std::size_t j = 0; j < out.pool.size(); ++j) {
        if (!assigned[j] && iou(anchor, boxes[out.pool[j]]) > tau) {
          assigned[j] = true;
          clique.members.push_back(out.pool[j]);
        }
      }
    }
    out.cliques.push_back(std::move(clique));
  }
  return out;
}

CliquePartition singleton_partition(std::span<const double> objectness, int top_k) {
  CliquePartition out;
  out.tau = 1.0;
  out.pool = top_k_pool(objectness, top_k);
  for (std::size_t p : out.pool) out.cliques.push_back(Clique{{p}, Vector{}});
  return out;
}

RowMatrix<double> clique_mean_scores(const CliquePartition& partition, const Scores& scores) {
  RowMatrix<double> means(static_cast<Eigen::Index>(partition.size()), scores.cols());
  for (std::size_t c = 0; c < partition.size(); ++c) {
    const auto& members = partition.cliques[c].members;
    if (members.empty()) throw std::invalid_argument("partition: empty clique");
    RowVector<double> acc = RowVector<double>::Zero(scores.cols());
    for (std::size_t h : members) {
      if (h >= static_cast<std::size_t>(scores.rows())) throw std::out_of_range("partition: member index out of range");
      acc += scores.row(static_cast<Eigen::Index>(h));
    }
    means.row(static_cast<Eigen::Index>(c)) = acc / static_cast<double>(members.size());
  }
  return means;
}

void cache_mean_scores(CliquePartition& partition, const Scores& scores) {
  const auto means = clique_mean_scores(partition, scores);
  for (std::size_t c = 0; c < partition.size(); ++c) {
    partition.cliques[c].mean_scores = means.row(static_cast<Eigen::Index>(c)).transpose();
  }
}

ProbMatrix clique_class_probs(const CliquePartition& partition, const Scores& scores) {
  return table_softmax(clique_mean_scores(partition, scores));
}

ProbMatrix clique_weights(const ProbMatrix& clique_probs) {
  ProbMatrix w = clique_probs;
  for (Eigen::Index c = 0; c < w.rows(); ++c) {
    w.row(c) /= std::max(kEpsilon, clique_probs.row(c).sum());
  }
  return w;
}

double global_entropy(const ProbMatrix& clique_probs, const ProbMatrix& clique_weights, int cls) {
  const double f = clique_probs.col(cls).dot(clique_weights.col(cls));
  return -std::log(std::max(kEpsilon, f));
}

std::size_t select_clique(const ProbMatrix& clique_probs, const ProbMatrix& clique_weights, int cls) {
  if (clique_probs.rows() == 0) throw std::invalid_argument("select_clique: no cliques");
  std::size_t best = 0;
  double best_v = clique_probs(0, cls) * clique_weights(0, cls);
  for (Eigen::Index c = 1; c < clique_probs.rows(); ++c) {
    const double v = clique_probs(c, cls) * clique_weights(c, cls);
    if (v > best_v) {
      best_v = v;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

DiscoveryOutput discovery_loss(std::span<const int> labels, const CliquePartition& partition, const Scores& scores) {
  const Eigen::Index n = scores.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw std::invalid_argument("discovery_loss: labels length != classes");

  DiscoveryOutput out;
  out.proposal_probs = row_softmax(scores);
  out.selected_clique.assign(labels.size(), -1);
  out.global_entropy.assign(labels.size(), 0.0);
  out.grad = Scores::Zero(scores.rows(), n);

  const bool any_positive = std::any_of(labels.begin(), labels.end(), [](int v) { return v != 0; });
  if (any_positive && partition.size() == 0) throw std::invalid_argument("discovery_loss: positive bag needs cliques");

  // Negative classes: -sum_h log(1 - p(y, h)).
  ProbMatrix d_probs = ProbMatrix::Zero(scores.rows(), n);
  for (Eigen::Index y = 0; y < n; ++y) {
    if (labels[static_cast<std::size_t>(y)] != 0) continue;
    for (Eigen::Index h = 0; h < scores.rows(); ++h) {
      const double q = 1.0 - out.proposal_probs(h, y);
      out.loss -= std::log(std::max(kEpsilon, q));
      if (q > kEpsilon) d_probs(h, y) = 1.0 / q;
    }
  }
  out.grad += row_softmax_backward(out.proposal_probs, d_probs);

  if (!any_positive) return out;

  const RowMatrix<double> means = clique_mean_scores(partition, scores);
  out.clique_probs = table_softmax(means);
  out.clique_weights = clique_weights(out.clique_probs);
  const ProbMatrix& q = out.clique_probs;
  const ProbMatrix& w = out.clique_weights;

  ProbMatrix d_q = ProbMatrix::Zero(q.rows(), n);
  ProbMatrix d_w = ProbMatrix::Zero(q.rows(), n);
  for (Eigen::Index y = 0; y < n; ++y) {
    if (labels[static_cast<std::size_t>(y)] == 0) continue;
    const double f = q.col(y).dot(w.col(y));
    const double e = -std::log(std::max(kEpsilon, f));
    out.global_entropy[static_cast<std::size_t>(y)] = e;
    out.selected_clique[static_cast<std::size_t>(y)] = static_cast<int>(select_clique(q, w, static_cast<int>(y)));
    out.loss += e;
    if (f > kEpsilon) {
      d_q.col(y) -= w.col(y) / f;
      d_w.col(y) -= q.col(y) / f;
    }
  }

  // Through the per-clique renormalization w = q / rowsum(q).
  for (Eigen::Index c = 0; c < q.rows(); ++c) {
    const double r = q.row(c).sum();
    if (r > kEpsilon) {
      const double dot = d_w.row(c).dot(q.row(c));
      d_q.row(c) += d_w.row(c) / r;
      d_q.row(c).array() -= dot / (r * r);
    } else {
      d_q.row(c) += d_w.row(c) / kEpsilon;
    }
  }

  const RowMatrix<double> d_means = table_softmax_backward(q, d_q);
  for (std::size_t c = 0; c < partition.size(); ++c) {
    const auto& members = partition.cliques[c].members;
    const double share = 1.0 / static_cast<double>(members.size());
    for (std::size_t h : members) out.grad.row(static_cast<Eigen::Index>(h)) += share * d_means.row(static_cast<Eigen::Index>(c));
  }
  return out;
}

std::vector<double> soft_weights(std::span<const double> probs, std::span<const double> ious, double a) {
  if (probs.empty()) throw std::invalid_argument("soft_weights: empty neighborhood");
  if (probs.size() != ious.size()) throw std::invalid_argument("soft_weights: probs and ious differ in length");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double g = gaussian_kernel(ious[i], a);
    num += g * std::max(kEpsilon, probs[i]);
    den += g;
  }
  den = std::max(kEpsilon, den);
  std::vector<double> w(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) w[i] = num / (std::max(kEpsilon, probs[i]) * den);
  return w;
}

std::size_t select_object(std::span<const std::size_t> members, const ProbMatrix& proposal_probs, int cls) {
  if (members.empty()) throw std::invalid_argument("select_object: empty clique");
  std::size_t best = members.front();
  double best_p = proposal_probs(static_cast<Eigen::Index>(best), cls);
  for (std::size_t h : members.subspan(1)) {
    const double p = proposal_probs(static_cast<Eigen::Index>(h), cls);
    if (p > best_p) {
      best_p = p;
      best = h;
    }
  }
  return best;
}

std::vector<std::size_t> hard_negatives(std::span<const std::size_t> members, std::size_t h_star,
                                        std::span<const BoxD> boxes) {
  std::vector<std::size_t> out;
  for (std::size_t h : members) {
    if (h != h_star && iou(boxes[h], boxes[h_star]) < kHardNegativeIoU) out.push_back(h);
  }
  return out;
}

LocalizationOutput localization_loss(std::span<const LocalSupervision> supervision, const Scores& scores,
                                     std::span<const BoxD> boxes, double kernel_a) {
  if (!(kernel_a > 0.0)) throw std::invalid_argument("localization_loss: kernel parameter must be positive");
  LocalizationOutput out;
  out.proposal_probs = row_softmax(scores);
  out.grad = Scores::Zero(scores.rows(), scores.cols());
  ProbMatrix d_probs = ProbMatrix::Zero(scores.rows(), scores.cols());

  for (const auto& sup : supervision) {
    if (std::find(sup.members.begin(), sup.members.end(), sup.h_star) == sup.members.end()) {
      throw std::invalid_argument("localization_loss: h* is not a member of its clique");
    }
    LocalTerm term;
    term.supervision = sup;
    std::vector<double> probs;
    std::vector<double> overlaps;
    for (std::size_t h : sup.members) {
      probs.push_back(out.proposal_probs(static_cast<Eigen::Index>(h), sup.cls));
      overlaps.push_back(iou(boxes[h], boxes[sup.h_star]));
    }
    term.soft_weights = soft_weights(probs, overlaps, kernel_a);
    for (std::size_t i = 0; i < sup.members.size(); ++i) {
      const double pseudo = term.soft_weights[i] * probs[i];
      term.pseudo_labels.push_back(pseudo);
      const double p = std::max(kEpsilon, probs[i]);
      term.entropy -= pseudo * std::log(p);
      if (probs[i] > kEpsilon) d_probs(static_cast<Eigen::Index>(sup.members[i]), sup.cls) -= pseudo / probs[i];
    }
    out.loss += term.entropy;
    out.terms.push_back(std::move(term));
  }
  out.grad = row_softmax_backward(out.proposal_probs, d_probs);
  return out;
}

}  // namespace melm
