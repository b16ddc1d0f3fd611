#pragma once

#include <cstddef>
#include <vector>

#include "falkit/types.h"

namespace fal {

// ---------------------------------------------------------------------------
// Classification terms
// ---------------------------------------------------------------------------

/// -alpha (1 - p_t)^gamma log p_t with p_t = softmax(logits)[target].
double focal_loss(const ClassLogits& logits, std::size_t target, const FocalParams& p = {});
Vec focal_loss_grad(const ClassLogits& logits, std::size_t target, const FocalParams& p = {});

/// Cross-entropy of softmax(student) against the target softmax(teacher).
double soft_cross_entropy(const ClassLogits& teacher, const ClassLogits& student);
/// Same, with an explicit target distribution.
double soft_cross_entropy_dist(std::span<const double> target, const ClassLogits& student);

struct SoftCeGrad {
  Vec d_teacher;
  Vec d_student;
};
SoftCeGrad soft_cross_entropy_grad(const ClassLogits& teacher, const ClassLogits& student);

// ---------------------------------------------------------------------------
// Prototypical loss
// ---------------------------------------------------------------------------

struct LabeledEmbedding {
  Vec z;
  std::size_t label;
};

struct ProtoResult {
  double loss;
  Matrix prototypes;  // n_way x k, row c = prototype of class c
  double accuracy;    // fraction of queries whose nearest prototype is correct
};

/// Mean over queries of -log softmax(-||q - c||^2)[label]. Labels must be
/// 0..n_way-1, each present in the support set. With `normalize`, prototypes
/// are scaled to unit norm before distances are computed.
ProtoResult proto_loss(const std::vector<LabeledEmbedding>& support,
                       const std::vector<LabeledEmbedding>& query,
                       bool normalize);

struct ProtoGrad {
  ProtoResult value;
  std::vector<Vec> d_support;
  std::vector<Vec> d_query;
};

/// `d_prototypes` (optional, n_way x k) is an upstream gradient on the
/// prototype matrix returned in value.prototypes, e.g. from a spectral
/// regularizer; it is chained through normalization and the class means.
ProtoGrad proto_loss_grad(const std::vector<LabeledEmbedding>& support,
                          const std::vector<LabeledEmbedding>& query,
                          bool normalize,
                          const Matrix* d_prototypes = nullptr);

// ---------------------------------------------------------------------------
// Contrastive terms
// ---------------------------------------------------------------------------

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// -(1/N) sum_i log softmax_j(z_i . z'_j / tau)[i]; no normalization applied.
double info_nce(const std::vector<Vec>& z, const std::vector<Vec>& z_prime, double tau);

struct InfoNceGrad {
  double value;
  std::vector<Vec> d_z;
  std::vector<Vec> d_z_prime;
};
InfoNceGrad info_nce_grad(const std::vector<Vec>& z, const std::vector<Vec>& z_prime, double tau);

/// Per-image proposal batches; batch[i][j] is proposal j of image i.
using ProposalBatch = std::vector<std::vector<Proposal>>;

struct ContrastGrad {
  double value;
  std::vector<std::vector<Vec>> d_teacher;  // w.r.t. raw teacher embeddings
  std::vector<std::vector<Vec>> d_student;  // w.r.t. raw student embeddings
};

/// Localization-aware SCE. Embeddings are L2-normalized internally.
/// assignments[n].sigma[m] is the student index matched to teacher m of
/// image n.
double loc_sce(const ProposalBatch& teacher,
               const ProposalBatch& student,
               const std::vector<Assignment>& assignments,
               const ContrastConfig& cfg);
ContrastGrad loc_sce_grad(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<Assignment>& assignments,
                          const ContrastConfig& cfg);

/// Plain SCE: only the matched proposal is positive, no box information.
double sce(const ProposalBatch& teacher,
           const ProposalBatch& student,
           const std::vector<Assignment>& assignments,
           const ContrastConfig& cfg);

/// Localization-aware InfoNCE. Every teacher proposal m overlapping anchor j
/// at IoU >= delta adds a positive term log p''(j -> sigma(m)).
double loc_nce(const ProposalBatch& teacher,
               const ProposalBatch& student,
               const std::vector<Assignment>& assignments,
               const ContrastConfig& cfg);
ContrastGrad loc_nce_grad(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<Assignment>& assignments,
                          const ContrastConfig& cfg);

// ---------------------------------------------------------------------------
// Set-prediction objectives
// ---------------------------------------------------------------------------

/// Supervised DETR loss summed over images. Unmatched predictions are pushed
/// toward the no-object class through the focal term.
double supervised_detr_loss(const std::vector<std::vector<GroundTruth>>& targets,
                            const std::vector<std::vector<Prediction>>& predictions,
                            const std::vector<Assignment>& assignments,
                            const CostWeights& w,
                            const FocalParams& focal = {});

struct DetrGrad {
  double value;
  std::vector<std::vector<PredictionGrad>> d_predictions;
};
DetrGrad supervised_detr_loss_grad(const std::vector<std::vector<GroundTruth>>& targets,
                                   const std::vector<std::vector<Prediction>>& predictions,
                                   const std::vector<Assignment>& assignments,
                                   const CostWeights& w,
                                   const FocalParams& focal = {});

/// Soft pseudo-label loss summed over images. Box terms apply to pseudo-labels
/// whose most likely class is not no-object; predictions left unmatched (after
/// pseudo-label filtering) are pushed toward no-object.
double unsupervised_detr_loss(const std::vector<std::vector<PseudoLabel>>& pseudo_labels,
                              const std::vector<std::vector<Prediction>>& predictions,
                              const std::vector<Assignment>& assignments,
                              const CostWeights& w);
DetrGrad unsupervised_detr_loss_grad(const std::vector<std::vector<PseudoLabel>>& pseudo_labels,
                                     const std::vector<std::vector<Prediction>>& predictions,
                                     const std::vector<Assignment>& assignments,
                                     const CostWeights& w);

struct ProsecoParts {
  double total;
  double contrast;  // loc_sce value (before lambda_contrast)
  double box;       // averaged box-matching term
};

/// lambda_contrast * LocSCE + (1 / (N_b K)) sum of box terms against sampled
/// region proposals.
ProsecoParts proseco_loss(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<std::vector<Box>>& ss_boxes,
                          const std::vector<Assignment>& prop_assignments,
                          const std::vector<Assignment>& box_assignments,
                          const CostWeights& w,
                          const ContrastConfig& cfg,
                          double lambda_contrast);

struct ProsecoGrad {
  ProsecoParts value;
  std::vector<std::vector<ProposalGrad>> d_student;
};
ProsecoGrad proseco_loss_grad(const ProposalBatch& teacher,
                              const ProposalBatch& student,
                              const std::vector<std::vector<Box>>& ss_boxes,
                              const std::vector<Assignment>& prop_assignments,
                              const std::vector<Assignment>& box_assignments,
                              const CostWeights& w,
                              const ContrastConfig& cfg,
                              double lambda_contrast);

} // namespace fal
