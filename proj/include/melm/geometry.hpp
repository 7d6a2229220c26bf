#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace melm {

/// Axis-aligned box on a continuous canvas. Area is (x2-x1)*(y2-y1), no +1.
template <typename Scalar>
struct Box {
  Scalar x1{0}, y1{0}, x2{1}, y2{1};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar area() const { return width() * height(); }
  Scalar center_x() const { return (x1 + x2) / Scalar(2); }
  Scalar center_y() const { return (y1 + y2) / Scalar(2); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 &&
           y1 < y2;
  }

  /// Closed containment test, so a box's own corners count as inside.
  bool contains(Scalar x, Scalar y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }

  bool operator==(const Box&) const = default;
};

using BoxD = Box<double>;

/// Builds a box and rejects zero or negative area.
template <typename Scalar>
Box<Scalar> make_box(Scalar x1, Scalar y1, Scalar x2, Scalar y2) {
  Box<Scalar> b{x1, y1, x2, y2};
  if (!b.valid()) {
    throw std::invalid_argument("degenerate box [" + std::to_string(x1) + ", " + std::to_string(y1) + ", " +
                                std::to_string(x2) + ", " + std::to_string(y2) + "]");
  }
  return b;
}

template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Scalar h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= Scalar(0) || h <= Scalar(0)) return Scalar(0);
  return w * h;
}

template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  if (inter <= Scalar(0)) return Scalar(0);
  const Scalar uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

/// Proposal indices sorted by descending score; equal scores keep the lower index first.
template <typename Scalar>
std::vector<std::size_t> order_by_score(std::span<const Scalar> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
template <typename Scalar>
std::vector<std::size_t> nms(std::span<const Box<Scalar>> boxes, std::span<const Scalar> scores,
                             Scalar iou_threshold) {
  if (boxes.size() != scores.size()) {
    throw std::invalid_argument("nms: boxes and scores differ in length");
  }
  std::vector<std::size_t> keep;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t idx : order_by_score(scores)) {
    if (suppressed[idx]) continue;
    keep.push_back(idx);
    for (std::size_t other = 0; other < boxes.size(); ++other) {
      if (!suppressed[other] && other != idx && iou(boxes[idx], boxes[other]) > iou_threshold) {
        suppressed[other] = true;
      }
    }
  }
  return keep;
}

}  // namespace melm
