#pragma once

#include <cstddef>
#include <vector>

#include "falkit/types.h"

namespace fal {

/// Minimum-cost assignment of every target (row) to a distinct prediction
/// (column). Requires rows <= cols; extra columns are left unmatched. Among
/// optimal assignments the lexicographically smallest sigma is returned.
Assignment hungarian(const Matrix& cost);

/// Focal class term + l1 + gIoU loss between a ground truth and a prediction.
double supervised_match_cost(const GroundTruth& target,
                             const Prediction& pred,
                             const CostWeights& w,
                             const FocalParams& focal = {});

/// Class term uses soft cross-entropy against the pseudo-label distribution.
double pseudo_match_cost(const PseudoLabel& target, const Prediction& pred, const CostWeights& w);

/// -lambda_sim * cos(z, z_hat) + lambda_coord * l1 + lambda_giou * gIoU loss.
double prop_match_cost(const Proposal& teacher, const Proposal& student, const CostWeights& w);

double box_match_cost(const Box& ss_box, const Box& pred_box, const CostWeights& w);

Matrix supervised_cost_matrix(const std::vector<GroundTruth>& targets,
                              const std::vector<Prediction>& preds,
                              const CostWeights& w,
                              const FocalParams& focal = {});
Matrix pseudo_cost_matrix(const std::vector<PseudoLabel>& targets,
                          const std::vector<Prediction>& preds,
                          const CostWeights& w);
Matrix prop_cost_matrix(const std::vector<Proposal>& teacher,
                        const std::vector<Proposal>& student,
                        const CostWeights& w);
Matrix box_cost_matrix(const std::vector<Box>& ss_boxes,
                       const std::vector<Box>& pred_boxes,
                       const CostWeights& w);

} // namespace fal
