#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "falkit/numerics.h"

namespace fal {

/// Normalized (cx, cy, w, h) rectangle. Construction rejects zero-area and
/// non-finite boxes; centers must lie in [0, 1] and extents in (0, 1].
class Box {
 public:
  Box(double cx, double cy, double w, double h);

  double cx() const { return c_[0]; }
  double cy() const { return c_[1]; }
  double w() const { return c_[2]; }
  double h() const { return c_[3]; }
  const std::array<double, 4>& coords() const { return c_; }

  double x1() const { return c_[0] - 0.5 * c_[2]; }
  double y1() const { return c_[1] - 0.5 * c_[3]; }
  double x2() const { return c_[0] + 0.5 * c_[2]; }
  double y2() const { return c_[1] + 0.5 * c_[3]; }
  /// Area from the corner form, so that iou(a, a) is exactly 1.
  double area() const { return (x2() - x1()) * (y2() - y1()); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  std::array<double, 4> c_;
};

using BoxGrad = std::array<double, 4>;

struct ScoredBox {
  Box box;
  double score;
  std::size_t class_id;
};

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);
inline double giou_loss(const Box& a, const Box& b) {
  return 1.0 - giou(a, b);
}

/// d giou / d(a coords) and d giou / d(b coords). Ties between corners
/// resolve toward `a`; a zero-width overlap contributes no gradient.
std::pair<BoxGrad, BoxGrad> giou_grad(const Box& a, const Box& b);

Matrix pairwise_iou(const std::vector<Box>& boxes);

double l1_box_loss(const Box& a, const Box& b);
/// Subgradient of l1_box_loss with respect to `a`; 0 where coordinates agree.
BoxGrad l1_box_grad(const Box& a, const Box& b);

/// Class-aware greedy NMS. Returns kept indices ordered by descending score
/// (ties by original index).
std::vector<std::size_t> nms(const std::vector<ScoredBox>& candidates, double iou_threshold);

} // namespace fal
