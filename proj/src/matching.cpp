#include "falkit/matching.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "falkit/errors.h"
#include "falkit/losses.h"

namespace fal {

namespace {

struct Solved {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u;
  std::vector<double> v;
};

// Shortest augmenting path Hungarian (Kuhn-Munkres with potentials) on a
// square matrix. Returns the matching and a feasible optimal dual.
Solved solve_square(const Matrix& c) {
  const std::size_t n = c.rows();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-indexed potentials; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0);
  std::vector<double> v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0);
  std::vector<std::size_t> way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) {
          continue;
        }
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Solved s;
  s.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) {
    s.row_to_col[p[j] - 1] = j - 1;
  }
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

// Re-routes an optimal matching to the lexicographically smallest perfect
// matching of the tight (zero reduced cost) subgraph. Every optimal
// assignment lives in that subgraph, so the result is the lexicographically
// smallest optimal assignment.
void lexicographic_refine(const Matrix& c, Solved& s) {
  const std::size_t n = c.rows();
  double scale = 1.0;
  for (double x : c.data()) {
    scale = std::max(scale, std::abs(x));
  }
  const double tol = 1e-12 * scale * static_cast<double>(n);
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      tight[i][j] = (c(i, j) - s.u[i] - s.v[j]) <= tol;
    }
  }
  std::vector<std::size_t>& r2c = s.row_to_col;
  std::vector<std::size_t> c2r(n);
  for (std::size_t i = 0; i < n; ++i) {
    c2r[r2c[i]] = i;
  }
  std::vector<char> fixed_row(n, 0);

  // Alternating path from row `start` to column `goal` through tight edges
  // and unfixed rows, avoiding column `banned`. Re-matches along it.
  auto reroute = [&](std::size_t start, std::size_t goal, std::size_t banned) {
    std::vector<std::size_t> parent_col(n, n);  // row -> column it would take
    std::vector<std::size_t> prev_row(n, n);    // column -> row reaching it
    std::vector<char> seen_col(n, 0);
    std::vector<std::size_t> queue{start};
    seen_col[banned] = 1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
      const std::size_t r = queue[qi];
      for (std::size_t col = 0; col < n; ++col) {
        if (seen_col[col] || !tight[r][col]) {
          continue;
        }
        seen_col[col] = 1;
        prev_row[col] = r;
        if (col == goal) {
          // Walk back, shifting each row onto the column it reached.
          std::size_t cc = col;
          while (true) {
            const std::size_t rr = prev_row[cc];
            const std::size_t old = r2c[rr];
            r2c[rr] = cc;
            c2r[cc] = rr;
            if (rr == start) {
              return true;
            }
            cc = old;
          }
        }
        const std::size_t next = c2r[col];
        if (!fixed_row[next] && parent_col[next] == n) {
          parent_col[next] = col;
          queue.push_back(next);
        }
      }
    }
    return false;
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t col = 0; col < n; ++col) {
      if (!tight[i][col]) {
        continue;
      }
      if (r2c[i] == col) {
        break;
      }
      const std::size_t owner = c2r[col];
      if (fixed_row[owner]) {
        continue;
      }
      const std::size_t freed = r2c[i];
      // Owner must move along an alternating path ending at the column that
      // row i releases; row i itself is excluded by pre-fixing it.
      fixed_row[i] = 1;
      if (reroute(owner, freed, col)) {
        r2c[i] = col;
        c2r[col] = i;
        break;
      }
      fixed_row[i] = 0;
    }
    fixed_row[i] = 1;
  }
}

} // namespace

Assignment hungarian(const Matrix& cost) {
  const std::size_t targets = cost.rows();
  const std::size_t preds = cost.cols();
  if (targets > preds) {
    throw ShapeError("hungarian: " + std::to_string(targets) + " targets exceed " +
                     std::to_string(preds) + " predictions");
  }
  if (!cost.all_finite()) {
    throw InvalidInput("hungarian: non-finite cost");
  }
  Assignment out;
  if (targets == 0) {
    return out;
  }
  // Zero-cost dummy targets absorb the unmatched predictions.
  Matrix square(preds, preds, 0.0);
  for (std::size_t i = 0; i < targets; ++i) {
    for (std::size_t j = 0; j < preds; ++j) {
      square(i, j) = cost(i, j);
    }
  }
  Solved s = solve_square(square);
  lexicographic_refine(square, s);
  out.sigma.assign(s.row_to_col.begin(), s.row_to_col.begin() + static_cast<std::ptrdiff_t>(targets));
  for (std::size_t i = 0; i < targets; ++i) {
    out.cost += cost(i, out.sigma[i]);
  }
  return out;
}

double supervised_match_cost(const GroundTruth& target,
                             const Prediction& pred,
                             const CostWeights& w,
                             const FocalParams& focal) {
  if (target.class_id + 1 >= pred.logits.size()) {
    throw InvalidInput("supervised_match_cost: target class must be a real (non no-object) class");
  }
  return w.lambda_class * focal_loss(pred.logits, target.class_id, focal) +
         w.lambda_l1 * l1_box_loss(target.box, pred.box) +
         w.lambda_giou * giou_loss(target.box, pred.box);
}

double pseudo_match_cost(const PseudoLabel& target, const Prediction& pred, const CostWeights& w) {
  return w.lambda_class * soft_cross_entropy_dist(target.dist, pred.logits) +
         w.lambda_l1 * l1_box_loss(target.box, pred.box) +
         w.lambda_giou * giou_loss(target.box, pred.box);
}

double prop_match_cost(const Proposal& teacher, const Proposal& student, const CostWeights& w) {
  return -w.lambda_sim * cosine_similarity(teacher.z, student.z) +
         w.lambda_coord * l1_box_loss(teacher.b, student.b) +
         w.lambda_giou * giou_loss(teacher.b, student.b);
}

double box_match_cost(const Box& ss_box, const Box& pred_box, const CostWeights& w) {
  double c = 0.0;
  if (w.lambda_coord != 0.0) {
    c += w.lambda_coord * l1_box_loss(ss_box, pred_box);
  }
  if (w.lambda_giou != 0.0) {
    c += w.lambda_giou * giou_loss(ss_box, pred_box);
  }
  return c;
}

Matrix supervised_cost_matrix(const std::vector<GroundTruth>& targets,
                              const std::vector<Prediction>& preds,
                              const CostWeights& w,
                              const FocalParams& focal) {
  Matrix c(targets.size(), preds.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = 0; j < preds.size(); ++j) {
      c(i, j) = supervised_match_cost(targets[i], preds[j], w, focal);
    }
  }
  return c;
}

Matrix pseudo_cost_matrix(const std::vector<PseudoLabel>& targets,
                          const std::vector<Prediction>& preds,
                          const CostWeights& w) {
  Matrix c(targets.size(), preds.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t j = 0; j < preds.size(); ++j) {
      c(i, j) = pseudo_match_cost(targets[i], preds[j], w);
    }
  }
  return c;
}

Matrix prop_cost_matrix(const std::vector<Proposal>& teacher,
                        const std::vector<Proposal>& student,
                        const CostWeights& w) {
  Matrix c(teacher.size(), student.size());
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (std::size_t j = 0; j < student.size(); ++j) {
      c(i, j) = prop_match_cost(teacher[i], student[j], w);
    }
  }
  return c;
}

Matrix box_cost_matrix(const std::vector<Box>& ss_boxes,
                       const std::vector<Box>& pred_boxes,
                       const CostWeights& w) {
  Matrix c(ss_boxes.size(), pred_boxes.size());
  for (std::size_t i = 0; i < ss_boxes.size(); ++i) {
    for (std::size_t j = 0; j < pred_boxes.size(); ++j) {
      c(i, j) = box_match_cost(ss_boxes[i], pred_boxes[j], w);
    }
  }
  return c;
}

} // namespace fal
