#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "falkit/losses.h"
#include "falkit/numerics.h"
#include "falkit/rng.h"

namespace fal {

struct TaskGenConfig {
  std::size_t d = 32;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t q_queries = 15;  // per class
  double class_spread = 3.0;
  double noise_std = 1.0;

  void validate() const;
};

struct LabeledInput {
  Vec x;
  std::size_t label;
};

struct Episode {
  std::vector<LabeledInput> support;
  std::vector<LabeledInput> query;
};

/// Fresh class means on a sphere of radius class_spread, then Gaussian samples
/// around them. Support is ordered class by class.
Episode sample_episode(const TaskGenConfig& cfg, Rng& rng);

/// phi(x) = Phi x with Phi of shape k x d.
struct LinearEncoder {
  Matrix phi;

  Vec encode(std::span<const double> x) const;
  std::vector<LabeledEmbedding> encode(const std::vector<LabeledInput>& items) const;
};

/// Entries drawn N(0, 1/d).
LinearEncoder random_encoder(std::size_t k, std::size_t d, Rng& rng);

/// n_way x k prototype matrix; rows unit-norm when `normalize` is set.
Matrix prototypes(const std::vector<LabeledInput>& support, const LinearEncoder& enc, bool normalize);

struct EpisodeLossGrad {
  ProtoResult value;
  Matrix d_phi;
};

/// Prototypical loss of one episode through the encoder and its gradient with
/// respect to Phi. `d_prototypes` is forwarded to proto_loss_grad.
EpisodeLossGrad episode_loss_grad(const Episode& ep,
                                  const LinearEncoder& enc,
                                  bool normalize,
                                  const Matrix* d_prototypes = nullptr);

enum class ProtoVariant { vanilla, normalized, normalized_entropy };

ProtoVariant parse_proto_variant(const std::string& name);
std::string to_string(ProtoVariant v);

struct ProtoTrainConfig {
  TaskGenConfig task;
  std::size_t k = 16;             // embedding dimension
  std::size_t episodes = 400;     // training episodes, consumed in batches
  std::size_t batch = 4;
  double lr = 0.05;
  ProtoVariant variant = ProtoVariant::vanilla;
  double lambda1 = 0.0;           // entropy weight, normalized_entropy only
  double init_scale = 1.0;        // multiplies the N(0, 1/d) encoder init
  std::size_t log_every = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TrainRecord {
  std::size_t step;
  double loss;
  double kappa_wn;
  double frob_wn;
  double accuracy;
  double h_sigma;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  LinearEncoder encoder;
};

/// Stacked prototypes (batch * n_way rows) of a batch of episodes.
Matrix stacked_prototypes(const std::vector<Episode>& batch, const LinearEncoder& enc, bool normalize);

/// Gradient descent on the batched prototypical objective. Metrics are taken
/// on a fixed monitor batch drawn from a dedicated stream, at step 0 and
/// every `log_every` steps after that (and always at the last step).
TrainLog train_protonet(const ProtoTrainConfig& cfg);

/// kappa of all prototypes of up to 2000 episodes stacked under one encoder.
double history_kappa(const std::vector<Episode>& episodes, const LinearEncoder& enc, bool normalize);

// ---------------------------------------------------------------------------

enum class TaskMode { iid, colinear };

struct MamlSimConfig {
  std::size_t iterations = 200;
  double alpha = 0.1;
  double beta = 0.5;
  std::size_t d = 8;
  TaskMode mode = TaskMode::iid;
  /// Colinear mode only: number of leading iid tasks before the colinear chain.
  std::size_t warmup_iid = 0;
  double c_min = 0.5;
  double c_max = 2.0;

  void validate() const;
};

struct MamlSimStep {
  std::size_t t;      // index of the newest predictor (>= 1)
  Matrix w2;          // 2 x d: rows w_{t-1}, w_t
  double kappa;       // +inf when w2 is rank deficient
  bool degenerate;
};

struct MamlSimResult {
  std::vector<Vec> predictors;  // w_0 .. w_T
  std::vector<Vec> thetas;      // theta_1 .. theta_T
  std::vector<MamlSimStep> steps;
};

/// Closed-form first-order MAML on linear regression:
/// w_t = w_{t-1} - beta (1 - alpha)^2 (w_{t-1} - theta_t), w_0 = 0.
MamlSimResult maml_linreg_sim(const MamlSimConfig& cfg, Rng& rng);

/// Number of steps where kappa decreases by more than `tol`.
std::size_t kappa_decreases(const MamlSimResult& r, double tol = 1e-9);

// ---------------------------------------------------------------------------

struct Prop44Sample {
  Vec x;
  double y;
  std::size_t task;  // 0 -> mu_1, 1 -> mu_2
};

struct Prop44Result {
  Matrix phi_star;   // d x 2
  Matrix w_star;     // 2 x 2
  Matrix phi_hat;    // d x 2
  Matrix w_hat;      // 2 x 2
  double kappa_star;
  double kappa_hat;
  double kappa_hat_closed_form;
  std::vector<Prop44Sample> samples;
  double max_residual_star;  // max |y - <w*, phi*(x)>|
  double max_residual_hat;
};

/// The two-task construction where the well-conditioned representation differs
/// from the optimal one. Draws `n_samples` per task, the offset k uniformly in
/// [-k_range, k_range].
Prop44Result prop44_example(double epsilon, std::size_t d, Rng& rng,
                            std::size_t n_samples = 64, double k_range = 2.0);

double prop44_kappa_hat_closed_form(double epsilon);

// ---------------------------------------------------------------------------

struct ImpCluster {
  Vec mean;
  std::size_t label;
};

struct ImpResult {
  std::vector<std::size_t> predictions;
  std::vector<Vec> class_probs;
  std::vector<ImpCluster> clusters;
};

/// Infinite-mixture prototypes. Squared distances throughout; a support point
/// farther than lambda_thresh from every cluster of its class starts a new one.
ImpResult imp_infer(const std::vector<LabeledInput>& support,
                    const std::vector<Vec>& query,
                    double lambda_thresh,
                    double sigma_cluster,
                    const LinearEncoder& enc,
                    std::size_t refine_iters = 3);

// ---------------------------------------------------------------------------

/// G x3 M_f x2 M_i x1 M_o.
Tensor3 mc_transform(const Tensor3& g, const Matrix& m_o, const Matrix& m_i, const Matrix& m_f);

} // namespace fal
