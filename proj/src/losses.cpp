#include "falkit/losses.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "falkit/errors.h"

namespace fal {

namespace {

void check_class(const ClassLogits& logits, std::size_t target, const char* who) {
  if (logits.size() < 2) {
    throw InvalidInput(std::string(who) + ": need at least two logits");
  }
  if (target >= logits.size()) {
    throw InvalidInput(std::string(who) + ": class index " + std::to_string(target) +
                       " out of range");
  }
}

void check_same_size(std::size_t a, std::size_t b, const char* who) {
  if (a != b) {
    throw ShapeError(std::string(who) + ": length mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Marks predictions used by an assignment and validates its range.
std::vector<char> matched_mask(const Assignment& a, std::size_t targets, std::size_t preds,
                               const char* who) {
  if (a.sigma.size() != targets) {
    throw ShapeError(std::string(who) + ": assignment size does not match targets");
  }
  std::vector<char> used(preds, 0);
  for (std::size_t p : a.sigma) {
    if (p >= preds || used[p]) {
      throw InvalidInput(std::string(who) + ": assignment is not injective into predictions");
    }
    used[p] = 1;
  }
  return used;
}

void axpy(Vec& y, double a, std::span<const double> x) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] += a * x[i];
  }
}

void add_box(BoxGrad& g, double a, const BoxGrad& x) {
  for (std::size_t i = 0; i < 4; ++i) {
    g[i] += a * x[i];
  }
}

// d(1 - giou(target, pred)) / d pred
BoxGrad giou_loss_grad_pred(const Box& target, const Box& pred) {
  BoxGrad g = giou_grad(target, pred).second;
  for (double& x : g) {
    x = -x;
  }
  return g;
}

// d l1(target, pred) / d pred
BoxGrad l1_grad_pred(const Box& target, const Box& pred) {
  return l1_box_grad(pred, target);
}

} // namespace

void ContrastConfig::validate() const {
  if (!(tau > 0.0) || !(tau_t > 0.0) || !std::isfinite(tau) || !std::isfinite(tau_t)) {
    throw InvalidInput("ContrastConfig: temperatures must be positive");
  }
  if (!(lambda_sce >= 0.0 && lambda_sce <= 1.0)) {
    throw InvalidInput("ContrastConfig: lambda_sce must lie in [0, 1]");
  }
  if (!(delta > 0.0 && delta <= 1.0)) {
    throw InvalidInput("ContrastConfig: delta must lie in (0, 1]");
  }
}

double focal_loss(const ClassLogits& logits, std::size_t target, const FocalParams& p) {
  check_class(logits, target, "focal_loss");
  const Vec lp = log_softmax(logits);
  const double log_pt = lp[target];
  const double pt = std::exp(log_pt);
  return -p.alpha * std::pow(1.0 - pt, p.gamma) * log_pt;
}

Vec focal_loss_grad(const ClassLogits& logits, std::size_t target, const FocalParams& p) {
  check_class(logits, target, "focal_loss_grad");
  const Vec lp = log_softmax(logits);
  const double log_pt = lp[target];
  const double pt = std::exp(log_pt);
  const double q = 1.0 - pt;
  // dFL/dp_t * p_t
  double s = -p.alpha * std::pow(q, p.gamma);
  if (p.gamma != 0.0 && q > 0.0) {
    s += p.alpha * p.gamma * std::pow(q, p.gamma - 1.0) * pt * log_pt;
  }
  Vec g(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double pk = std::exp(lp[k]);
    g[k] = s * ((k == target ? 1.0 : 0.0) - pk);
  }
  return g;
}

double soft_cross_entropy(const ClassLogits& teacher, const ClassLogits& student) {
  check_same_size(teacher.size(), student.size(), "soft_cross_entropy");
  return soft_cross_entropy_dist(softmax(teacher), student);
}

double soft_cross_entropy_dist(std::span<const double> target, const ClassLogits& student) {
  check_same_size(target.size(), student.size(), "soft_cross_entropy");
  const Vec lq = log_softmax(student);
  double s = 0.0;
  for (std::size_t k = 0; k < lq.size(); ++k) {
    if (target[k] != 0.0) {
      s -= target[k] * lq[k];
    }
  }
  return s;
}

SoftCeGrad soft_cross_entropy_grad(const ClassLogits& teacher, const ClassLogits& student) {
  check_same_size(teacher.size(), student.size(), "soft_cross_entropy_grad");
  const Vec p = softmax(teacher);
  const Vec lq = log_softmax(student);
  double mean_lq = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    mean_lq += p[k] * lq[k];
  }
  SoftCeGrad g{Vec(p.size()), Vec(p.size())};
  for (std::size_t k = 0; k < p.size(); ++k) {
    g.d_student[k] = std::exp(lq[k]) - p[k];
    g.d_teacher[k] = -p[k] * (lq[k] - mean_lq);
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

struct ProtoSetup {
  std::size_t n_way = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> counts;
  Matrix means;       // class means
  Matrix protos;      // possibly normalized
  Vec norms;          // norms of class means
};

ProtoSetup proto_setup(const std::vector<LabeledEmbedding>& support,
                       const std::vector<LabeledEmbedding>& query,
                       bool normalize) {
  if (support.empty()) {
    throw InvalidEpisode("proto_loss: empty support set");
  }
  ProtoSetup s;
  s.dim = support.front().z.size();
  if (s.dim == 0) {
    throw ShapeError("proto_loss: zero-dimensional embeddings");
  }
  for (const auto& e : support) {
    s.n_way = std::max(s.n_way, e.label + 1);
    check_same_size(e.z.size(), s.dim, "proto_loss");
  }
  for (const auto& e : query) {
    check_same_size(e.z.size(), s.dim, "proto_loss");
    if (e.label >= s.n_way) {
      throw InvalidEpisode("proto_loss: query class " + std::to_string(e.label) +
                           " absent from support");
    }
  }
  s.counts.assign(s.n_way, 0);
  s.means = Matrix(s.n_way, s.dim);
  for (const auto& e : support) {
    ++s.counts[e.label];
    for (std::size_t d = 0; d < s.dim; ++d) {
      s.means(e.label, d) += e.z[d];
    }
  }
  for (std::size_t c = 0; c < s.n_way; ++c) {
    if (s.counts[c] == 0) {
      throw InvalidEpisode("proto_loss: class " + std::to_string(c) + " has no support examples");
    }
    for (std::size_t d = 0; d < s.dim; ++d) {
      s.means(c, d) /= static_cast<double>(s.counts[c]);
    }
  }
  s.protos = s.means;
  s.norms.assign(s.n_way, 1.0);
  if (normalize) {
    for (std::size_t c = 0; c < s.n_way; ++c) {
      const double n = norm2(s.means.row(c));
      if (!(n > 0.0)) {
        throw NumericalError("proto_loss: zero-norm prototype cannot be normalized");
      }
      s.norms[c] = n;
      for (std::size_t d = 0; d < s.dim; ++d) {
        s.protos(c, d) /= n;
      }
    }
  }
  return s;
}

} // namespace

ProtoResult proto_loss(const std::vector<LabeledEmbedding>& support,
                       const std::vector<LabeledEmbedding>& query,
                       bool normalize) {
  return proto_loss_grad(support, query, normalize).value;
}

ProtoGrad proto_loss_grad(const std::vector<LabeledEmbedding>& support,
                          const std::vector<LabeledEmbedding>& query,
                          bool normalize,
                          const Matrix* d_prototypes) {
  ProtoSetup s = proto_setup(support, query, normalize);
  ProtoGrad g;
  g.value.prototypes = s.protos;
  g.value.loss = 0.0;
  std::size_t correct = 0;
  g.d_query.assign(query.size(), Vec(s.dim, 0.0));
  Matrix d_protos(s.n_way, s.dim);
  const double inv_q = query.empty() ? 0.0 : 1.0 / static_cast<double>(query.size());

  Vec neg_d(s.n_way);
  for (std::size_t qi = 0; qi < query.size(); ++qi) {
    const auto& q = query[qi];
    for (std::size_t c = 0; c < s.n_way; ++c) {
      neg_d[c] = -squared_distance(q.z, s.protos.row(c));
    }
    const Vec lp = log_softmax(neg_d);
    g.value.loss -= lp[q.label] * inv_q;
    if (argmax(neg_d) == q.label) {
      ++correct;
    }
    // dL/dd_c = 1[c = y] - P_c
    for (std::size_t c = 0; c < s.n_way; ++c) {
      const double gd = ((c == q.label) ? 1.0 : 0.0) - std::exp(lp[c]);
      const double k = 2.0 * gd * inv_q;
      for (std::size_t d = 0; d < s.dim; ++d) {
        const double diff = q.z[d] - s.protos(c, d);
        g.d_query[qi][d] += k * diff;
        d_protos(c, d) -= k * diff;
      }
    }
  }
  g.value.accuracy = query.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(query.size());
  if (d_prototypes != nullptr) {
    if (d_prototypes->rows() != s.n_way || d_prototypes->cols() != s.dim) {
      throw ShapeError("proto_loss_grad: upstream prototype gradient has wrong shape");
    }
    d_protos += *d_prototypes;
  }

  // Through normalization to the class means.
  Matrix d_means = d_protos;
  if (normalize) {
    for (std::size_t c = 0; c < s.n_way; ++c) {
      const double proj = dot(s.protos.row(c), d_protos.row(c));
      for (std::size_t d = 0; d < s.dim; ++d) {
        d_means(c, d) = (d_protos(c, d) - s.protos(c, d) * proj) / s.norms[c];
      }
    }
  }
  g.d_support.reserve(support.size());
  for (const auto& e : support) {
    Vec ds(s.dim);
    const double inv_n = 1.0 / static_cast<double>(s.counts[e.label]);
    for (std::size_t d = 0; d < s.dim; ++d) {
      ds[d] = d_means(e.label, d) * inv_n;
    }
    g.d_support.push_back(std::move(ds));
  }
  return g;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Target>
void check_detr_shapes(const std::vector<std::vector<Target>>& targets,
                       const std::vector<std::vector<Prediction>>& predictions,
                       const std::vector<Assignment>& assignments,
                       const char* who) {
  if (targets.size() != predictions.size() || targets.size() != assignments.size()) {
    throw ShapeError(std::string(who) + ": batch sizes disagree");
  }
}

} // namespace

DetrGrad supervised_detr_loss_grad(const std::vector<std::vector<GroundTruth>>& targets,
                                   const std::vector<std::vector<Prediction>>& predictions,
                                   const std::vector<Assignment>& assignments,
                                   const CostWeights& w,
                                   const FocalParams& focal) {
  check_detr_shapes(targets, predictions, assignments, "supervised_detr_loss");
  DetrGrad g;
  g.value = 0.0;
  g.d_predictions.resize(predictions.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& preds = predictions[i];
    const auto used = matched_mask(assignments[i], targets[i].size(), preds.size(),
                                   "supervised_detr_loss");
    auto& dp = g.d_predictions[i];
    dp.resize(preds.size());
    for (std::size_t p = 0; p < preds.size(); ++p) {
      dp[p].d_logits.assign(preds[p].logits.size(), 0.0);
      dp[p].d_box = {};
    }
    for (std::size_t j = 0; j < targets[i].size(); ++j) {
      const GroundTruth& t = targets[i][j];
      const std::size_t p = assignments[i].sigma[j];
      const Prediction& pr = preds[p];
      if (t.class_id + 1 >= pr.logits.size()) {
        throw InvalidInput("supervised_detr_loss: target class must not be no-object");
      }
      g.value += w.lambda_class * focal_loss(pr.logits, t.class_id, focal) +
                 w.lambda_l1 * l1_box_loss(t.box, pr.box) +
                 w.lambda_giou * giou_loss(t.box, pr.box);
      axpy(dp[p].d_logits, w.lambda_class, focal_loss_grad(pr.logits, t.class_id, focal));
      add_box(dp[p].d_box, w.lambda_l1, l1_grad_pred(t.box, pr.box));
      add_box(dp[p].d_box, w.lambda_giou, giou_loss_grad_pred(t.box, pr.box));
    }
    for (std::size_t p = 0; p < preds.size(); ++p) {
      if (used[p]) {
        continue;
      }
      const std::size_t none = preds[p].logits.size() - 1;
      g.value += w.lambda_class * focal_loss(preds[p].logits, none, focal);
      axpy(dp[p].d_logits, w.lambda_class, focal_loss_grad(preds[p].logits, none, focal));
    }
  }
  return g;
}

double supervised_detr_loss(const std::vector<std::vector<GroundTruth>>& targets,
                            const std::vector<std::vector<Prediction>>& predictions,
                            const std::vector<Assignment>& assignments,
                            const CostWeights& w,
                            const FocalParams& focal) {
  return supervised_detr_loss_grad(targets, predictions, assignments, w, focal).value;
}

DetrGrad unsupervised_detr_loss_grad(const std::vector<std::vector<PseudoLabel>>& pseudo_labels,
                                     const std::vector<std::vector<Prediction>>& predictions,
                                     const std::vector<Assignment>& assignments,
                                     const CostWeights& w) {
  check_detr_shapes(pseudo_labels, predictions, assignments, "unsupervised_detr_loss");
  DetrGrad g;
  g.value = 0.0;
  g.d_predictions.resize(predictions.size());
  for (std::size_t i = 0; i < pseudo_labels.size(); ++i) {
    const auto& preds = predictions[i];
    const auto used = matched_mask(assignments[i], pseudo_labels[i].size(), preds.size(),
                                   "unsupervised_detr_loss");
    auto& dp = g.d_predictions[i];
    dp.resize(preds.size());
    for (std::size_t p = 0; p < preds.size(); ++p) {
      dp[p].d_logits.assign(preds[p].logits.size(), 0.0);
      dp[p].d_box = {};
    }
    for (std::size_t j = 0; j < pseudo_labels[i].size(); ++j) {
      const PseudoLabel& t = pseudo_labels[i][j];
      const std::size_t p = assignments[i].sigma[j];
      const Prediction& pr = preds[p];
      check_same_size(t.dist.size(), pr.logits.size(), "unsupervised_detr_loss");
      const Vec q = softmax(pr.logits);
      g.value += w.lambda_class * soft_cross_entropy_dist(t.dist, pr.logits);
      double mass = 0.0;
      for (double x : t.dist) {
        mass += x;
      }
      for (std::size_t k = 0; k < q.size(); ++k) {
        dp[p].d_logits[k] += w.lambda_class * (mass * q[k] - t.dist[k]);
      }
      if (argmax(t.dist) + 1 != t.dist.size()) {
        g.value += w.lambda_l1 * l1_box_loss(t.box, pr.box) +
                   w.lambda_giou * giou_loss(t.box, pr.box);
        add_box(dp[p].d_box, w.lambda_l1, l1_grad_pred(t.box, pr.box));
        add_box(dp[p].d_box, w.lambda_giou, giou_loss_grad_pred(t.box, pr.box));
      }
    }
    for (std::size_t p = 0; p < preds.size(); ++p) {
      if (used[p]) {
        continue;
      }
      const std::size_t none = preds[p].logits.size() - 1;
      const Vec lq = log_softmax(preds[p].logits);
      g.value -= w.lambda_class * lq[none];
      for (std::size_t k = 0; k < lq.size(); ++k) {
        dp[p].d_logits[k] += w.lambda_class * (std::exp(lq[k]) - (k == none ? 1.0 : 0.0));
      }
    }
  }
  return g;
}

double unsupervised_detr_loss(const std::vector<std::vector<PseudoLabel>>& pseudo_labels,
                              const std::vector<std::vector<Prediction>>& predictions,
                              const std::vector<Assignment>& assignments,
                              const CostWeights& w) {
  return unsupervised_detr_loss_grad(pseudo_labels, predictions, assignments, w).value;
}

// ---------------------------------------------------------------------------

ProsecoGrad proseco_loss_grad(const ProposalBatch& teacher,
                              const ProposalBatch& student,
                              const std::vector<std::vector<Box>>& ss_boxes,
                              const std::vector<Assignment>& prop_assignments,
                              const std::vector<Assignment>& box_assignments,
                              const CostWeights& w,
                              const ContrastConfig& cfg,
                              double lambda_contrast) {
  if (ss_boxes.size() != student.size() || box_assignments.size() != student.size()) {
    throw ShapeError("proseco_loss: batch sizes disagree");
  }
  ProsecoGrad g;
  g.d_student.resize(student.size());
  for (std::size_t i = 0; i < student.size(); ++i) {
    g.d_student[i].resize(student[i].size());
    for (std::size_t j = 0; j < student[i].size(); ++j) {
      g.d_student[i][j].d_z.assign(student[i][j].z.size(), 0.0);
    }
  }
  g.value.contrast = 0.0;
  if (lambda_contrast != 0.0) {
    const ContrastGrad cg = loc_sce_grad(teacher, student, prop_assignments, cfg);
    g.value.contrast = cg.value;
    for (std::size_t i = 0; i < student.size(); ++i) {
      for (std::size_t j = 0; j < student[i].size(); ++j) {
        axpy(g.d_student[i][j].d_z, lambda_contrast, cg.d_student[i][j]);
      }
    }
  } else {
    g.value.contrast = loc_sce(teacher, student, prop_assignments, cfg);
  }

  std::size_t total = 0;
  for (const auto& v : ss_boxes) {
    total += v.size();
  }
  double box_sum = 0.0;
  const double inv = total == 0 ? 0.0 : 1.0 / static_cast<double>(total);
  for (std::size_t i = 0; i < student.size(); ++i) {
    matched_mask(box_assignments[i], ss_boxes[i].size(), student[i].size(), "proseco_loss");
    for (std::size_t j = 0; j < ss_boxes[i].size(); ++j) {
      const std::size_t p = box_assignments[i].sigma[j];
      const Box& t = ss_boxes[i][j];
      const Box& b = student[i][p].b;
      box_sum += w.lambda_coord * l1_box_loss(t, b) + w.lambda_giou * giou_loss(t, b);
      add_box(g.d_student[i][p].d_box, w.lambda_coord * inv, l1_grad_pred(t, b));
      add_box(g.d_student[i][p].d_box, w.lambda_giou * inv, giou_loss_grad_pred(t, b));
    }
  }
  g.value.box = box_sum * inv;
  g.value.total = lambda_contrast * g.value.contrast + g.value.box;
  return g;
}

ProsecoParts proseco_loss(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<std::vector<Box>>& ss_boxes,
                          const std::vector<Assignment>& prop_assignments,
                          const std::vector<Assignment>& box_assignments,
                          const CostWeights& w,
                          const ContrastConfig& cfg,
                          double lambda_contrast) {
  ProsecoParts out{};
  out.contrast = loc_sce(teacher, student, prop_assignments, cfg);
  std::size_t total = 0;
  double box_sum = 0.0;
  if (ss_boxes.size() != student.size() || box_assignments.size() != student.size()) {
    throw ShapeError("proseco_loss: batch sizes disagree");
  }
  for (std::size_t i = 0; i < student.size(); ++i) {
    matched_mask(box_assignments[i], ss_boxes[i].size(), student[i].size(), "proseco_loss");
    for (std::size_t j = 0; j < ss_boxes[i].size(); ++j) {
      const Box& b = student[i][box_assignments[i].sigma[j]].b;
      box_sum += w.lambda_coord * l1_box_loss(ss_boxes[i][j], b) +
                 w.lambda_giou * giou_loss(ss_boxes[i][j], b);
      ++total;
    }
  }
  out.box = total == 0 ? 0.0 : box_sum / static_cast<double>(total);
  out.total = lambda_contrast * out.contrast + out.box;
  return out;
}

} // namespace fal
