#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "falkit/losses.h"
#include "falkit/rng.h"
#include "falkit/types.h"

namespace fal {

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// A token is d_f values: logit(cx, cy, w, h) plus noise in the first four
/// entries, class features in the rest.
inline constexpr std::size_t kBoxDims = 4;

struct SceneConfig {
  std::size_t num_classes = 3;     // C, excluding no-object
  std::size_t d_f = 16;            // token dimension (>= 5)
  std::size_t n_tokens = 16;       // N
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double class_spread = 2.0;       // norm of each class mean
  double feature_noise = 1.0;
  double box_noise = 0.1;          // noise on the box logits of object tokens
  double background_std = 1.0;     // feature std of background tokens
  double min_extent = 0.1;
  double max_extent = 0.4;

  void validate() const;
};

/// Class means shared by every scene of one synthetic world.
struct SceneWorld {
  SceneConfig cfg;
  std::vector<Vec> class_means;  // C x (d_f - 4)
};

SceneWorld make_world(const SceneConfig& cfg, Rng& rng);

struct SceneObject {
  std::size_t class_id;
  Box box;
  Vec feature;  // full token
};

struct Scene {
  std::vector<SceneObject> objects;
  std::vector<Vec> background_tokens;

  /// Object tokens first, then background tokens.
  std::vector<Vec> tokens() const;
  std::vector<GroundTruth> ground_truth() const;
};

Scene gen_scene(const SceneWorld& world, Rng& rng);

/// K boxes: jittered ground truth boxes (cycled) and, with probability
/// bg_ratio each, background boxes whose IoU with every object is < 0.5.
std::vector<Box> region_proposals(const Scene& scene, std::size_t k, double jitter_std,
                                  double bg_ratio, Rng& rng);

enum class ViewStrength { weak, strong };

struct AugmentConfig {
  double weak_noise = 0.05;
  double strong_noise = 0.3;
  double mask_prob = 0.1;
};

/// weak: additive noise. strong: the weak transform, then more noise and
/// token masking.
std::vector<Vec> augment_view(const std::vector<Vec>& tokens, ViewStrength strength,
                              const AugmentConfig& cfg, Rng& rng);

struct Views {
  std::vector<Vec> weak;
  std::vector<Vec> strong;  // derived from `weak`
};
Views make_views(const std::vector<Vec>& tokens, const AugmentConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Detector
// ---------------------------------------------------------------------------

/// One linear head shared by every token: out = A t + bias, split into the
/// embedding (k), box logits (4) and class logits (C + 1).
struct DetectorParams {
  std::size_t k = 8;
  std::size_t num_classes = 3;
  Matrix a;   // (k + 4 + C + 1) x d_f
  Vec bias;

  static DetectorParams zeros(std::size_t k, std::size_t num_classes, std::size_t d_f);
  static DetectorParams random(std::size_t k, std::size_t num_classes, std::size_t d_f, double scale,
                               Rng& rng);
  std::size_t out_dim() const { return k + kBoxDims + num_classes + 1; }
  std::size_t d_f() const { return a.cols(); }

  DetectorParams& operator+=(const DetectorParams& o);
  DetectorParams& operator*=(double s);
  bool all_finite() const;
  friend bool operator==(const DetectorParams&, const DetectorParams&) = default;
};

struct DetectorOutput {
  std::vector<Proposal> proposals;
  std::vector<ClassLogits> logits;
  std::vector<Vec> raw;  // pre-activation outputs, for backward

  std::vector<Prediction> predictions() const;
};

DetectorOutput detector_forward(const DetectorParams& p, const std::vector<Vec>& tokens);

/// Per-token upstream gradient.
struct TokenGrad {
  Vec d_z;
  BoxGrad d_box{};
  Vec d_logits;
};

/// Accumulates into `grad` the parameter gradient for the given upstream
/// gradients; empty d_z / d_logits count as zero.
void detector_backward(const DetectorParams& p, const std::vector<Vec>& tokens,
                       const DetectorOutput& out, const std::vector<TokenGrad>& upstream,
                       DetectorParams& grad);

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// alpha * teacher + (1 - alpha) * student.
DetectorParams ema_update(const DetectorParams& teacher, const DetectorParams& student, double alpha);

struct EmaSchedule {
  double alpha_start = 0.9996;
  double alpha_end = 1.0;
  std::size_t total = 1;

  void validate() const;
};

/// alpha_end - (alpha_end - alpha_start) (cos(pi k / K) + 1) / 2.
double cosine_keep_rate(std::size_t k, const EmaSchedule& s);

struct PseudoLabelFlags {
  bool use_nms = false;
  double nms_iou = 0.7;
  std::optional<double> confidence_threshold;
  bool hard_labels = false;

  void validate() const;
};

/// Teacher outputs turned into targets. Defaults keep every proposal with its
/// full softmax distribution. The threshold applies to the largest class
/// probability (no-object included); NMS scores by the same quantity and is
/// class-aware on the argmax.
std::vector<PseudoLabel> pseudo_labels(const DetectorOutput& teacher_out, const PseudoLabelFlags& flags);

// ---------------------------------------------------------------------------
// ProSeCo pretraining loop
// ---------------------------------------------------------------------------

struct ProsecoConfig {
  SceneConfig scene;
  AugmentConfig aug;
  std::size_t k = 8;
  std::size_t batch = 4;
  std::size_t ss_boxes = 8;
  double ss_jitter = 0.02;
  double ss_bg_ratio = 0.25;
  CostWeights weights{};
  ContrastConfig contrast{};
  double lambda_contrast = 2.0;
  double lr = 0.05;
  double keep_rate = 0.999;
  double init_scale = 0.1;
  std::size_t steps = 200;
  std::size_t log_every = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ProsecoState {
  SceneWorld world;
  DetectorParams student;
  DetectorParams teacher;
  std::size_t step = 0;
};

ProsecoState proseco_init(const ProsecoConfig& cfg);

/// Loss and student gradient of one batch, no parameter change.
struct ProsecoBatchResult {
  ProsecoParts parts;
  DetectorParams grad;
};
ProsecoBatchResult proseco_batch_loss(const ProsecoState& state, const std::vector<Scene>& scenes,
                                      const ProsecoConfig& cfg, Rng& rng);

/// One SGD step on the student followed by the EMA teacher update.
ProsecoParts proseco_step(ProsecoState& state, const std::vector<Scene>& scenes,
                          const ProsecoConfig& cfg, Rng& rng);

struct ProsecoRecord {
  std::size_t step;
  double loss;        // training batch loss of this step
  double contrast;
  double box;
  double eval_loss;   // on the fixed monitor batch
  double eval_box;
};

struct ProsecoLog {
  std::vector<ProsecoRecord> records;
};

ProsecoLog run_proseco(const ProsecoConfig& cfg);

// ---------------------------------------------------------------------------
// MT-DETR semi-supervised loop
// ---------------------------------------------------------------------------

struct MtdetrConfig {
  SceneConfig scene;
  AugmentConfig aug;
  std::size_t k = 8;
  std::size_t pool = 400;          // training scenes
  double labeled_fraction = 0.05;
  std::size_t test_scenes = 60;
  std::size_t batch_labeled = 4;
  std::size_t batch_unlabeled = 4;
  std::size_t pre_steps = 300;     // supervised pre-finetuning
  std::size_t steps = 300;
  double lr = 0.05;
  double lambda_u = 4.0;
  CostWeights weights{};
  FocalParams focal{};
  PseudoLabelFlags flags{};
  EmaSchedule ema{};
  double init_scale = 0.1;
  bool box_passthrough_init = false;  // box rows start as the identity on the token box dims
  double box_lr_scale = 1.0;          // learning-rate multiplier for the box rows
  std::size_t log_every = 50;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t labeled_count() const;
};

struct MtdetrData {
  SceneWorld world;
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
  std::vector<Scene> test;
};

MtdetrData mtdetr_data(const MtdetrConfig& cfg);

struct MtdetrState {
  DetectorParams student;
  DetectorParams teacher;
  std::size_t step = 0;
};

struct MtdetrStepMetrics {
  double loss_sup;
  double loss_unsup;
  double total;
  double keep_rate;
  std::size_t pseudo_count;
};

/// Supervised loss (Hungarian-matched DETR loss) averaged over the batch and
/// its gradient, on weak views drawn from `rng`.
double supervised_batch(const DetectorParams& student, const std::vector<const Scene*>& scenes,
                        const AugmentConfig& aug, const CostWeights& w, const FocalParams& focal,
                        Rng& rng, DetectorParams& grad);

/// One plain supervised SGD step.
double supervised_step(DetectorParams& student, const std::vector<const Scene*>& scenes,
                       const MtdetrConfig& cfg, Rng& rng);

/// One semi-supervised step. The labeled and unlabeled branches draw from
/// separate streams so lambda_u = 0 reproduces supervised training exactly.
MtdetrStepMetrics mtdetr_step(MtdetrState& state,
                              const std::vector<const Scene*>& labeled,
                              const std::vector<const Scene*>& unlabeled,
                              const MtdetrConfig& cfg,
                              Rng& labeled_rng,
                              Rng& unlabeled_rng);

struct MtdetrRecord {
  std::size_t step;
  double loss_sup;
  double loss_unsup;
  double keep_rate;
  double map;
};

struct MtdetrLog {
  std::vector<MtdetrRecord> records;
  double pre_map = 0.0;    // after supervised pre-finetuning
  double final_map = 0.0;
};

MtdetrLog run_mtdetr(const MtdetrConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Detections of one scene: predicted class, confidence and box.
struct Detection {
  std::size_t class_id;
  double score;
  Box box;
};

/// COCO-style AP: greedy matching by descending score, 101-point interpolated
/// precision, averaged over classes with ground truth and over thresholds.
double mean_average_precision(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<GroundTruth>>& ground_truth,
                              std::size_t num_classes,
                              const std::vector<double>& iou_thresholds);

/// 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

/// Proposals whose argmax is a real class become detections scored by that
/// class probability.
std::vector<Detection> to_detections(const DetectorOutput& out);

double evaluate_map(const DetectorParams& detector, const std::vector<Scene>& scenes,
                    const std::vector<double>& iou_thresholds = coco_iou_thresholds());

} // namespace fal
