#pragma once

#include <cstddef>
#include <vector>

#include "falkit/geometry.h"
#include "falkit/numerics.h"

namespace fal {

/// C + 1 logits; the last index is the no-object class.
using ClassLogits = Vec;

/// (embedding, box) pair emitted by a detector.
struct Proposal {
  Vec z;
  Box b;
};

/// Class logits and box of one detector query.
struct Prediction {
  ClassLogits logits;
  Box box;
};

struct GroundTruth {
  std::size_t class_id;
  Box box;
};

/// Target distribution over C + 1 classes plus the teacher's box.
struct PseudoLabel {
  Vec dist;
  Box box;
  std::size_t source_index;
};

/// sigma[j] = prediction matched to target j. Injective.
struct Assignment {
  std::vector<std::size_t> sigma;
  double cost = 0.0;
};

struct CostWeights {
  double lambda_class = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double lambda_sim = 2.0;
  double lambda_coord = 5.0;
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
};

struct ContrastConfig {
  double tau = 0.1;
  double tau_t = 0.07;
  double lambda_sce = 0.5;
  double delta = 0.5;

  void validate() const;
};

/// Gradient with respect to one prediction.
struct PredictionGrad {
  Vec d_logits;
  BoxGrad d_box{};
};

/// Gradient with respect to one proposal (raw, unnormalized embedding).
struct ProposalGrad {
  Vec d_z;
  BoxGrad d_box{};
};

} // namespace fal
