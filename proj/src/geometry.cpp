#include "falkit/geometry.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "falkit/errors.h"

namespace fal {

Box::Box(double cx, double cy, double w, double h) : c_{cx, cy, w, h} {
  for (double v : c_) {
    if (!std::isfinite(v)) {
      throw InvalidInput("Box: non-finite coordinate");
    }
  }
  if (!(w > 0.0 && h > 0.0) || w > 1.0 || h > 1.0) {
    throw InvalidInput("Box: extents must lie in (0, 1], got w=" + std::to_string(w) +
                       " h=" + std::to_string(h));
  }
  if (cx < 0.0 || cx > 1.0 || cy < 0.0 || cy > 1.0) {
    throw InvalidInput("Box: center must lie in [0, 1]");
  }
}

namespace {

struct Overlap {
  double iw;
  double ih;
  double inter;
  double uni;
  double cw;
  double ch;
  double hull;
};

Overlap overlap(const Box& a, const Box& b) {
  Overlap o{};
  o.iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  o.ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  o.inter = o.iw * o.ih;
  o.uni = a.area() + b.area() - o.inter;
  o.cw = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
  o.ch = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
  o.hull = o.cw * o.ch;
  return o;
}

// Gradient with respect to corners (x1, y1, x2, y2) mapped to (cx, cy, w, h).
BoxGrad corners_to_center(double gx1, double gy1, double gx2, double gy2) {
  return {gx1 + gx2, gy1 + gy2, 0.5 * (gx2 - gx1), 0.5 * (gy2 - gy1)};
}

} // namespace

double iou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  return o.inter / o.uni;
}

double giou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  return o.inter / o.uni - (o.hull - o.uni) / o.hull;
}

std::pair<BoxGrad, BoxGrad> giou_grad(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  const double U = o.uni;
  const double C = o.hull;
  const double dI = 1.0 / U + o.inter / (U * U) - 1.0 / C;
  const double dArea = -o.inter / (U * U) + 1.0 / C;
  const double dC = -U / (C * C);

  // corner gradients: index 0..3 = x1, y1, x2, y2
  std::array<double, 4> ga{};
  std::array<double, 4> gb{};

  // Own-area terms.
  const double aw = a.x2() - a.x1();
  const double ah = a.y2() - a.y1();
  const double bw = b.x2() - b.x1();
  const double bh = b.y2() - b.y1();
  ga[0] -= dArea * ah;
  ga[2] += dArea * ah;
  ga[1] -= dArea * aw;
  ga[3] += dArea * aw;
  gb[0] -= dArea * bh;
  gb[2] += dArea * bh;
  gb[1] -= dArea * bw;
  gb[3] += dArea * bw;

  // Intersection terms, only with positive overlap on both axes.
  if (o.iw > 0.0 && o.ih > 0.0) {
    const double dIw = dI * o.ih;
    const double dIh = dI * o.iw;
    (a.x2() <= b.x2() ? ga : gb)[2] += dIw;
    (a.x1() >= b.x1() ? ga : gb)[0] -= dIw;
    (a.y2() <= b.y2() ? ga : gb)[3] += dIh;
    (a.y1() >= b.y1() ? ga : gb)[1] -= dIh;
  }

  // Enclosing box terms.
  const double dCw = dC * o.ch;
  const double dCh = dC * o.cw;
  (a.x2() >= b.x2() ? ga : gb)[2] += dCw;
  (a.x1() <= b.x1() ? ga : gb)[0] -= dCw;
  (a.y2() >= b.y2() ? ga : gb)[3] += dCh;
  (a.y1() <= b.y1() ? ga : gb)[1] -= dCh;

  return {corners_to_center(ga[0], ga[1], ga[2], ga[3]),
          corners_to_center(gb[0], gb[1], gb[2], gb[3])};
}

Matrix pairwise_iou(const std::vector<Box>& boxes) {
  if (boxes.empty()) {
    throw InvalidInput("pairwise_iou: need at least one box");
  }
  const std::size_t n = boxes.size();
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = iou(boxes[i], boxes[j]);
      m(i, j) = v;
      m(j, i) = v;
    }
  }
  return m;
}

double l1_box_loss(const Box& a, const Box& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    s += std::abs(a.coords()[i] - b.coords()[i]);
  }
  return s;
}

BoxGrad l1_box_grad(const Box& a, const Box& b) {
  BoxGrad g{};
  for (std::size_t i = 0; i < 4; ++i) {
    const double d = a.coords()[i] - b.coords()[i];
    g[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  }
  return g;
}

std::vector<std::size_t> nms(const std::vector<ScoredBox>& candidates, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw InvalidInput("nms: threshold must lie in (0, 1]");
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& c : candidates) {
    if (!std::isfinite(c.score)) {
      throw InvalidInput("nms: non-finite score");
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return candidates[x].score > candidates[y].score;
  });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const ScoredBox& c = candidates[idx];
    bool keep = true;
    for (std::size_t k : kept) {
      if (candidates[k].class_id == c.class_id && iou(candidates[k].box, c.box) >= iou_threshold) {
        keep = false;
        break;
      }
    }
    if (keep) {
      kept.push_back(idx);
    }
  }
  return kept;
}

} // namespace fal
