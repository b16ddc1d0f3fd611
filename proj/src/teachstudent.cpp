#include "falkit/teachstudent.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "falkit/errors.h"
#include "falkit/matching.h"

namespace fal {

namespace {

double logit(double p) {
  return std::log(p / (1.0 - p));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kMinBoxValue = 1e-6;

Box random_box(double lo, double hi, Rng& rng) {
  const double w = rng.uniform(lo, hi);
  const double h = rng.uniform(lo, hi);
  const double cx = rng.uniform(0.5 * w, 1.0 - 0.5 * w);
  const double cy = rng.uniform(0.5 * h, 1.0 - 0.5 * h);
  return Box(cx, cy, w, h);
}

// Overflow inside a training step surfaces as a NumericalError.
template <class F>
auto diverge_guard(const char* who, F&& f) {
  try {
    return f();
  } catch (const NumericalError& e) {
    throw TrainingDiverged(std::string(who) + ": " + e.what());
  }
}

} // namespace

void SceneConfig::validate() const {
  if (num_classes == 0) {
    throw InvalidInput("SceneConfig: need at least one class");
  }
  if (d_f <= kBoxDims) {
    throw InvalidInput("SceneConfig: d_f must exceed 4");
  }
  if (n_tokens == 0 || min_objects > max_objects || max_objects > n_tokens) {
    throw InvalidInput("SceneConfig: need min_objects <= max_objects <= n_tokens, n_tokens >= 1");
  }
  if (!(min_extent > 0.0 && min_extent <= max_extent && max_extent < 1.0)) {
    throw InvalidInput("SceneConfig: need 0 < min_extent <= max_extent < 1");
  }
  if (feature_noise < 0.0 || box_noise < 0.0 || background_std < 0.0 || class_spread < 0.0) {
    throw InvalidInput("SceneConfig: noise levels and spread must be >= 0");
  }
}

SceneWorld make_world(const SceneConfig& cfg, Rng& rng) {
  cfg.validate();
  SceneWorld w{cfg, {}};
  const std::size_t fd = cfg.d_f - kBoxDims;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    Vec m(fd);
    double n = 0.0;
    while (!(n > 0.0)) {
      for (double& v : m) {
        v = rng.normal();
      }
      n = norm2(m);
    }
    for (double& v : m) {
      v *= cfg.class_spread / n;
    }
    w.class_means.push_back(std::move(m));
  }
  return w;
}

std::vector<Vec> Scene::tokens() const {
  std::vector<Vec> t;
  t.reserve(objects.size() + background_tokens.size());
  for (const auto& o : objects) {
    t.push_back(o.feature);
  }
  for (const auto& b : background_tokens) {
    t.push_back(b);
  }
  return t;
}

std::vector<GroundTruth> Scene::ground_truth() const {
  std::vector<GroundTruth> g;
  g.reserve(objects.size());
  for (const auto& o : objects) {
    g.push_back({o.class_id, o.box});
  }
  return g;
}

Scene gen_scene(const SceneWorld& world, Rng& rng) {
  const SceneConfig& cfg = world.cfg;
  const std::size_t n_obj =
      cfg.min_objects + static_cast<std::size_t>(rng.below(cfg.max_objects - cfg.min_objects + 1));
  Scene s;
  for (std::size_t i = 0; i < n_obj; ++i) {
    const std::size_t c = static_cast<std::size_t>(rng.below(cfg.num_classes));
    const Box b = random_box(cfg.min_extent, cfg.max_extent, rng);
    Vec f(cfg.d_f);
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      f[j] = logit(b.coords()[j]) + cfg.box_noise * rng.normal();
    }
    for (std::size_t j = kBoxDims; j < cfg.d_f; ++j) {
      f[j] = world.class_means[c][j - kBoxDims] + cfg.feature_noise * rng.normal();
    }
    s.objects.push_back({c, b, std::move(f)});
  }
  for (std::size_t i = n_obj; i < cfg.n_tokens; ++i) {
    Vec f(cfg.d_f);
    for (std::size_t j = 0; j < kBoxDims; ++j) {
      f[j] = rng.normal();
    }
    for (std::size_t j = kBoxDims; j < cfg.d_f; ++j) {
      f[j] = cfg.background_std * rng.normal();
    }
    s.background_tokens.push_back(std::move(f));
  }
  return s;
}

std::vector<Box> region_proposals(const Scene& scene, std::size_t k, double jitter_std,
                                  double bg_ratio, Rng& rng) {
  if (k == 0) {
    throw InvalidInput("region_proposals: K must be >= 1");
  }
  if (!(bg_ratio >= 0.0 && bg_ratio <= 1.0) || jitter_std < 0.0) {
    throw InvalidInput("region_proposals: bg_ratio must lie in [0, 1] and jitter >= 0");
  }
  std::vector<Box> out;
  out.reserve(k);
  std::size_t next_obj = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const bool background = scene.objects.empty() || rng.uniform() < bg_ratio;
    if (background) {
      for (int attempt = 0;; ++attempt) {
        if (attempt == 10000) {
          throw NumericalError("region_proposals: could not place a background box");
        }
        const Box b = random_box(0.05, 0.5, rng);
        bool clear = true;
        for (const auto& o : scene.objects) {
          if (iou(b, o.box) >= 0.5) {
            clear = false;
            break;
          }
        }
        if (clear) {
          out.push_back(b);
          break;
        }
      }
      continue;
    }
    const Box& g = scene.objects[next_obj % scene.objects.size()].box;
    ++next_obj;
    if (jitter_std == 0.0) {
      out.push_back(g);
      continue;
    }
    const double w = std::clamp(g.w() + jitter_std * rng.normal(), 0.01, 1.0);
    const double h = std::clamp(g.h() + jitter_std * rng.normal(), 0.01, 1.0);
    const double cx = std::clamp(g.cx() + jitter_std * rng.normal(), 0.0, 1.0);
    const double cy = std::clamp(g.cy() + jitter_std * rng.normal(), 0.0, 1.0);
    out.push_back(Box(cx, cy, w, h));
  }
  return out;
}

std::vector<Vec> augment_view(const std::vector<Vec>& tokens, ViewStrength strength,
                              const AugmentConfig& cfg, Rng& rng) {
  if (cfg.weak_noise < 0.0 || cfg.strong_noise < 0.0 || !(cfg.mask_prob >= 0.0 && cfg.mask_prob <= 1.0)) {
    throw InvalidInput("augment_view: noise must be >= 0 and mask_prob in [0, 1]");
  }
  std::vector<Vec> out = tokens;
  for (auto& t : out) {
    for (double& v : t) {
      v += cfg.weak_noise * rng.normal();
    }
  }
  if (strength == ViewStrength::strong) {
    for (auto& t : out) {
      for (double& v : t) {
        v += cfg.strong_noise * rng.normal();
      }
      if (rng.uniform() < cfg.mask_prob) {
        std::fill(t.begin(), t.end(), 0.0);
      }
    }
  }
  return out;
}

Views make_views(const std::vector<Vec>& tokens, const AugmentConfig& cfg, Rng& rng) {
  Views v;
  v.weak = augment_view(tokens, ViewStrength::weak, cfg, rng);
  v.strong = v.weak;
  for (auto& t : v.strong) {
    for (double& x : t) {
      x += cfg.strong_noise * rng.normal();
    }
    if (rng.uniform() < cfg.mask_prob) {
      std::fill(t.begin(), t.end(), 0.0);
    }
  }
  return v;
}

// ---------------------------------------------------------------------------

DetectorParams DetectorParams::zeros(std::size_t k, std::size_t num_classes, std::size_t d_f) {
  if (k == 0 || num_classes == 0 || d_f == 0) {
    throw InvalidInput("DetectorParams: dimensions must be positive");
  }
  DetectorParams p;
  p.k = k;
  p.num_classes = num_classes;
  p.a = Matrix(p.out_dim(), d_f);
  p.bias.assign(p.out_dim(), 0.0);
  return p;
}

DetectorParams DetectorParams::random(std::size_t k, std::size_t num_classes, std::size_t d_f,
                                      double scale, Rng& rng) {
  DetectorParams p = zeros(k, num_classes, d_f);
  for (double& v : p.a.data()) {
    v = scale * rng.normal();
  }
  for (double& v : p.bias) {
    v = scale * rng.normal();
  }
  return p;
}

DetectorParams& DetectorParams::operator+=(const DetectorParams& o) {
  if (o.k != k || o.num_classes != num_classes || o.a.cols() != a.cols()) {
    throw ShapeError("DetectorParams: shape mismatch");
  }
  a += o.a;
  for (std::size_t i = 0; i < bias.size(); ++i) {
    bias[i] += o.bias[i];
  }
  return *this;
}

DetectorParams& DetectorParams::operator*=(double s) {
  a *= s;
  for (double& v : bias) {
    v *= s;
  }
  return *this;
}

bool DetectorParams::all_finite() const {
  if (!a.all_finite()) {
    return false;
  }
  return std::all_of(bias.begin(), bias.end(), [](double v) { return std::isfinite(v); });
}

std::vector<Prediction> DetectorOutput::predictions() const {
  std::vector<Prediction> p;
  p.reserve(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    p.push_back({logits[i], proposals[i].b});
  }
  return p;
}

DetectorOutput detector_forward(const DetectorParams& p, const std::vector<Vec>& tokens) {
  DetectorOutput out;
  out.proposals.reserve(tokens.size());
  out.logits.reserve(tokens.size());
  out.raw.reserve(tokens.size());
  for (const auto& t : tokens) {
    if (t.size() != p.d_f()) {
      throw ShapeError("detector_forward: token has " + std::to_string(t.size()) +
                       " dims, expected " + std::to_string(p.d_f()));
    }
    Vec r = matvec(p.a, t);
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] += p.bias[i];
    }
    if (!std::all_of(r.begin(), r.end(), [](double v) { return std::isfinite(v); })) {
      throw NumericalError("detector_forward: non-finite output");
    }
    std::array<double, 4> b{};
    for (std::size_t i = 0; i < kBoxDims; ++i) {
      b[i] = std::clamp(sigmoid(r[p.k + i]), kMinBoxValue, 1.0);
    }
    out.proposals.push_back(
        {Vec(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(p.k)), Box(b[0], b[1], b[2], b[3])});
    out.logits.emplace_back(r.begin() + static_cast<std::ptrdiff_t>(p.k + kBoxDims), r.end());
    out.raw.push_back(std::move(r));
  }
  return out;
}

void detector_backward(const DetectorParams& p, const std::vector<Vec>& tokens,
                       const DetectorOutput& out, const std::vector<TokenGrad>& upstream,
                       DetectorParams& grad) {
  if (upstream.size() != tokens.size() || out.raw.size() != tokens.size()) {
    throw ShapeError("detector_backward: token count mismatch");
  }
  Vec d_raw(p.out_dim());
  for (std::size_t n = 0; n < tokens.size(); ++n) {
    const TokenGrad& g = upstream[n];
    std::fill(d_raw.begin(), d_raw.end(), 0.0);
    for (std::size_t i = 0; i < g.d_z.size(); ++i) {
      d_raw[i] = g.d_z[i];
    }
    for (std::size_t i = 0; i < kBoxDims; ++i) {
      const double s = sigmoid(out.raw[n][p.k + i]);
      if (s > kMinBoxValue && s < 1.0) {
        d_raw[p.k + i] = g.d_box[i] * s * (1.0 - s);
      }
    }
    for (std::size_t i = 0; i < g.d_logits.size(); ++i) {
      d_raw[p.k + kBoxDims + i] = g.d_logits[i];
    }
    for (std::size_t r = 0; r < d_raw.size(); ++r) {
      if (d_raw[r] == 0.0) {
        continue;
      }
      grad.bias[r] += d_raw[r];
      for (std::size_t c = 0; c < tokens[n].size(); ++c) {
        grad.a(r, c) += d_raw[r] * tokens[n][c];
      }
    }
  }
}

// ---------------------------------------------------------------------------

DetectorParams ema_update(const DetectorParams& teacher, const DetectorParams& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw InvalidInput("ema_update: alpha must lie in [0, 1]");
  }
  if (teacher.k != student.k || teacher.num_classes != student.num_classes ||
      teacher.a.rows() != student.a.rows() || teacher.a.cols() != student.a.cols()) {
    throw ShapeError("ema_update: teacher and student shapes differ");
  }
  DetectorParams out = teacher;
  auto ta = teacher.a.data();
  auto sa = student.a.data();
  auto oa = out.a.data();
  for (std::size_t i = 0; i < oa.size(); ++i) {
    oa[i] = alpha * ta[i] + (1.0 - alpha) * sa[i];
  }
  for (std::size_t i = 0; i < out.bias.size(); ++i) {
    out.bias[i] = alpha * teacher.bias[i] + (1.0 - alpha) * student.bias[i];
  }
  return out;
}

void EmaSchedule::validate() const {
  if (!(alpha_start >= 0.0 && alpha_start <= alpha_end && alpha_end <= 1.0)) {
    throw InvalidInput("EmaSchedule: need 0 <= alpha_start <= alpha_end <= 1");
  }
  if (total == 0) {
    throw InvalidInput("EmaSchedule: total must be >= 1");
  }
}

double cosine_keep_rate(std::size_t k, const EmaSchedule& s) {
  s.validate();
  if (k > s.total) {
    throw InvalidInput("cosine_keep_rate: step " + std::to_string(k) + " beyond schedule length " +
                       std::to_string(s.total));
  }
  const double frac = static_cast<double>(k) / static_cast<double>(s.total);
  return s.alpha_end - (s.alpha_end - s.alpha_start) * (std::cos(std::numbers::pi * frac) + 1.0) / 2.0;
}

void PseudoLabelFlags::validate() const {
  if (confidence_threshold && !(*confidence_threshold > 0.0 && *confidence_threshold < 1.0)) {
    throw InvalidInput("PseudoLabelFlags: threshold must lie in (0, 1)");
  }
  if (use_nms && !(nms_iou > 0.0 && nms_iou <= 1.0)) {
    throw InvalidInput("PseudoLabelFlags: nms_iou must lie in (0, 1]");
  }
}

std::vector<PseudoLabel> pseudo_labels(const DetectorOutput& teacher_out, const PseudoLabelFlags& flags) {
  flags.validate();
  const std::size_t n = teacher_out.proposals.size();
  std::vector<Vec> dist(n);
  std::vector<std::size_t> top(n);
  for (std::size_t i = 0; i < n; ++i) {
    dist[i] = softmax(teacher_out.logits[i]);
    top[i] = static_cast<std::size_t>(std::max_element(dist[i].begin(), dist[i].end()) - dist[i].begin());
  }
  std::vector<std::size_t> keep(n);
  for (std::size_t i = 0; i < n; ++i) {
    keep[i] = i;
  }
  if (flags.use_nms) {
    std::vector<ScoredBox> cand;
    cand.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      cand.push_back({teacher_out.proposals[i].b, dist[i][top[i]], top[i]});
    }
    keep = nms(cand, flags.nms_iou);
    std::sort(keep.begin(), keep.end());
  }
  std::vector<PseudoLabel> out;
  for (std::size_t i : keep) {
    if (flags.confidence_threshold && dist[i][top[i]] < *flags.confidence_threshold) {
      continue;
    }
    Vec d = dist[i];
    if (flags.hard_labels) {
      std::fill(d.begin(), d.end(), 0.0);
      d[top[i]] = 1.0;
    }
    out.push_back({std::move(d), teacher_out.proposals[i].b, i});
  }
  return out;
}

// ---------------------------------------------------------------------------

void ProsecoConfig::validate() const {
  scene.validate();
  contrast.validate();
  if (k == 0 || batch == 0 || ss_boxes == 0 || log_every == 0) {
    throw InvalidInput("ProsecoConfig: k, batch, ss_boxes and log_every must be positive");
  }
  if (ss_boxes > scene.n_tokens) {
    throw InvalidInput("ProsecoConfig: ss_boxes cannot exceed the number of proposals");
  }
  if (!(lr > 0.0) || lambda_contrast < 0.0 || !(keep_rate >= 0.0 && keep_rate <= 1.0)) {
    throw InvalidInput("ProsecoConfig: need lr > 0, lambda_contrast >= 0, keep_rate in [0, 1]");
  }
}

ProsecoState proseco_init(const ProsecoConfig& cfg) {
  cfg.validate();
  const Rng master(cfg.seed);
  Rng world_rng = master.split(1);
  Rng init_rng = master.split(2);
  ProsecoState s;
  s.world = make_world(cfg.scene, world_rng);
  s.student = DetectorParams::random(cfg.k, cfg.scene.num_classes, cfg.scene.d_f, cfg.init_scale, init_rng);
  s.teacher = s.student;
  return s;
}

ProsecoBatchResult proseco_batch_loss(const ProsecoState& state, const std::vector<Scene>& scenes,
                                      const ProsecoConfig& cfg, Rng& rng) {
  const std::size_t b = scenes.size();
  ProposalBatch teacher(b);
  ProposalBatch student(b);
  std::vector<std::vector<Box>> ss(b);
  std::vector<Assignment> prop_assign(b);
  std::vector<Assignment> box_assign(b);
  std::vector<std::vector<Vec>> strong(b);
  std::vector<DetectorOutput> s_out(b);
  for (std::size_t i = 0; i < b; ++i) {
    Views v = make_views(scenes[i].tokens(), cfg.aug, rng);
    const DetectorOutput t_out = detector_forward(state.teacher, v.weak);
    s_out[i] = detector_forward(state.student, v.strong);
    strong[i] = std::move(v.strong);
    teacher[i] = t_out.proposals;
    student[i] = s_out[i].proposals;
    ss[i] = region_proposals(scenes[i], cfg.ss_boxes, cfg.ss_jitter, cfg.ss_bg_ratio, rng);
    prop_assign[i] = hungarian(prop_cost_matrix(teacher[i], student[i], cfg.weights));
    std::vector<Box> pred_boxes;
    for (const auto& p : student[i]) {
      pred_boxes.push_back(p.b);
    }
    box_assign[i] = hungarian(box_cost_matrix(ss[i], pred_boxes, cfg.weights));
  }
  const ProsecoGrad pg = proseco_loss_grad(teacher, student, ss, prop_assign, box_assign, cfg.weights,
                                           cfg.contrast, cfg.lambda_contrast);
  ProsecoBatchResult r{pg.value, DetectorParams::zeros(cfg.k, cfg.scene.num_classes, cfg.scene.d_f)};
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<TokenGrad> up(student[i].size());
    for (std::size_t j = 0; j < up.size(); ++j) {
      up[j].d_z = pg.d_student[i][j].d_z;
      up[j].d_box = pg.d_student[i][j].d_box;
    }
    detector_backward(state.student, strong[i], s_out[i], up, r.grad);
  }
  return r;
}

ProsecoParts proseco_step(ProsecoState& state, const std::vector<Scene>& scenes,
                          const ProsecoConfig& cfg, Rng& rng) {
  ProsecoBatchResult r =
      diverge_guard("proseco_step", [&] { return proseco_batch_loss(state, scenes, cfg, rng); });
  if (!std::isfinite(r.parts.total) || r.parts.total > 1e12) {
    throw TrainingDiverged("proseco_step: loss diverged at step " + std::to_string(state.step));
  }
  r.grad *= -cfg.lr;
  state.student += r.grad;
  if (!state.student.all_finite()) {
    throw TrainingDiverged("proseco_step: student parameters became non-finite");
  }
  state.teacher = ema_update(state.teacher, state.student, cfg.keep_rate);
  ++state.step;
  return r.parts;
}

ProsecoLog run_proseco(const ProsecoConfig& cfg) {
  ProsecoState state = proseco_init(cfg);
  const Rng master(cfg.seed);
  Rng scene_rng = master.split(3);
  Rng step_rng = master.split(4);
  Rng monitor_scene_rng = master.split(5);
  std::vector<Scene> monitor;
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    monitor.push_back(gen_scene(state.world, monitor_scene_rng));
  }
  auto evaluate = [&](ProsecoRecord& rec) {
    Rng view_rng = master.split(6);  // same views at every evaluation
    const ProsecoBatchResult r = proseco_batch_loss(state, monitor, cfg, view_rng);
    rec.eval_loss = r.parts.total;
    rec.eval_box = r.parts.box;
    return r.parts;
  };
  ProsecoLog log;
  ProsecoRecord first{0, 0.0, 0.0, 0.0, 0.0, 0.0};
  const ProsecoParts initial = evaluate(first);
  first.loss = initial.total;
  first.contrast = initial.contrast;
  first.box = initial.box;
  log.records.push_back(first);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Scene> batch;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      batch.push_back(gen_scene(state.world, scene_rng));
    }
    const ProsecoParts parts = proseco_step(state, batch, cfg, step_rng);
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      ProsecoRecord rec{step, parts.total, parts.contrast, parts.box, 0.0, 0.0};
      evaluate(rec);
      log.records.push_back(rec);
    }
  }
  return log;
}

// ---------------------------------------------------------------------------

void MtdetrConfig::validate() const {
  scene.validate();
  flags.validate();
  if (k == 0 || batch_labeled == 0 || batch_unlabeled == 0 || log_every == 0 || test_scenes == 0) {
    throw InvalidInput("MtdetrConfig: k, batch sizes, test_scenes and log_every must be positive");
  }
  if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0)) {
    throw InvalidInput("MtdetrConfig: labeled_fraction must lie in (0, 1)");
  }
  if (labeled_count() == 0 || labeled_count() >= pool) {
    throw InvalidInput("MtdetrConfig: pool too small for the labeled fraction");
  }
  if (!(lr > 0.0) || lambda_u < 0.0) {
    throw InvalidInput("MtdetrConfig: need lr > 0 and lambda_u >= 0");
  }
  if (!(box_lr_scale >= 0.0) || !std::isfinite(box_lr_scale)) {
    throw InvalidInput("MtdetrConfig: box_lr_scale must be >= 0");
  }
  EmaSchedule e = ema;
  e.total = std::max<std::size_t>(steps, 1);
  e.validate();
}

std::size_t MtdetrConfig::labeled_count() const {
  return static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(pool)));
}

MtdetrData mtdetr_data(const MtdetrConfig& cfg) {
  cfg.validate();
  const Rng master(cfg.seed);
  Rng world_rng = master.split(1);
  Rng pool_rng = master.split(7);
  Rng test_rng = master.split(8);
  MtdetrData d;
  d.world = make_world(cfg.scene, world_rng);
  const std::size_t n_l = cfg.labeled_count();
  for (std::size_t i = 0; i < cfg.pool; ++i) {
    (i < n_l ? d.labeled : d.unlabeled).push_back(gen_scene(d.world, pool_rng));
  }
  for (std::size_t i = 0; i < cfg.test_scenes; ++i) {
    d.test.push_back(gen_scene(d.world, test_rng));
  }
  return d;
}

double supervised_batch(const DetectorParams& student, const std::vector<const Scene*>& scenes,
                        const AugmentConfig& aug, const CostWeights& w, const FocalParams& focal,
                        Rng& rng, DetectorParams& grad) {
  if (scenes.empty()) {
    throw InvalidInput("supervised_batch: empty batch");
  }
  const std::size_t b = scenes.size();
  std::vector<std::vector<Vec>> views(b);
  std::vector<DetectorOutput> outs(b);
  std::vector<std::vector<GroundTruth>> targets(b);
  std::vector<std::vector<Prediction>> preds(b);
  std::vector<Assignment> assign(b);
  for (std::size_t i = 0; i < b; ++i) {
    views[i] = augment_view(scenes[i]->tokens(), ViewStrength::weak, aug, rng);
    outs[i] = detector_forward(student, views[i]);
    targets[i] = scenes[i]->ground_truth();
    preds[i] = outs[i].predictions();
    assign[i] = hungarian(supervised_cost_matrix(targets[i], preds[i], w, focal));
  }
  const DetrGrad dg = supervised_detr_loss_grad(targets, preds, assign, w, focal);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<TokenGrad> up(preds[i].size());
    for (std::size_t j = 0; j < up.size(); ++j) {
      up[j].d_logits = dg.d_predictions[i][j].d_logits;
      for (double& v : up[j].d_logits) {
        v *= inv_b;
      }
      for (std::size_t c = 0; c < 4; ++c) {
        up[j].d_box[c] = dg.d_predictions[i][j].d_box[c] * inv_b;
      }
    }
    detector_backward(student, views[i], outs[i], up, grad);
  }
  return dg.value * inv_b;
}

namespace {

void sgd(DetectorParams& p, DetectorParams& grad, double lr, double box_scale, const char* who) {
  if (box_scale != 1.0) {
    for (std::size_t r = p.k; r < p.k + kBoxDims; ++r) {
      for (double& v : grad.a.row(r)) {
        v *= box_scale;
      }
      grad.bias[r] *= box_scale;
    }
  }
  grad *= -lr;
  p += grad;
  if (!p.all_finite()) {
    throw TrainingDiverged(std::string(who) + ": parameters became non-finite");
  }
}

double unsupervised_batch(const DetectorParams& student, const DetectorParams& teacher,
                          const std::vector<const Scene*>& scenes, const MtdetrConfig& cfg,
                          Rng& rng, DetectorParams& grad, std::size_t& pseudo_count) {
  const std::size_t b = scenes.size();
  std::vector<std::vector<Vec>> strong(b);
  std::vector<DetectorOutput> outs(b);
  std::vector<std::vector<PseudoLabel>> targets(b);
  std::vector<std::vector<Prediction>> preds(b);
  std::vector<Assignment> assign(b);
  pseudo_count = 0;
  for (std::size_t i = 0; i < b; ++i) {
    Views v = make_views(scenes[i]->tokens(), cfg.aug, rng);
    targets[i] = pseudo_labels(detector_forward(teacher, v.weak), cfg.flags);
    pseudo_count += targets[i].size();
    strong[i] = std::move(v.strong);
    outs[i] = detector_forward(student, strong[i]);
    preds[i] = outs[i].predictions();
    assign[i] = hungarian(pseudo_cost_matrix(targets[i], preds[i], cfg.weights));
  }
  const DetrGrad dg = unsupervised_detr_loss_grad(targets, preds, assign, cfg.weights);
  const double scale = cfg.lambda_u / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<TokenGrad> up(preds[i].size());
    for (std::size_t j = 0; j < up.size(); ++j) {
      up[j].d_logits = dg.d_predictions[i][j].d_logits;
      for (double& v : up[j].d_logits) {
        v *= scale;
      }
      for (std::size_t c = 0; c < 4; ++c) {
        up[j].d_box[c] = dg.d_predictions[i][j].d_box[c] * scale;
      }
    }
    detector_backward(student, strong[i], outs[i], up, grad);
  }
  return dg.value / static_cast<double>(b);
}

} // namespace

double supervised_step(DetectorParams& student, const std::vector<const Scene*>& scenes,
                       const MtdetrConfig& cfg, Rng& rng) {
  DetectorParams grad = DetectorParams::zeros(student.k, student.num_classes, student.d_f());
  const double loss = diverge_guard("supervised_step", [&] {
    return supervised_batch(student, scenes, cfg.aug, cfg.weights, cfg.focal, rng, grad);
  });
  if (!std::isfinite(loss) || loss > 1e12) {
    throw TrainingDiverged("supervised_step: loss diverged");
  }
  sgd(student, grad, cfg.lr, cfg.box_lr_scale, "supervised_step");
  return loss;
}

MtdetrStepMetrics mtdetr_step(MtdetrState& state,
                              const std::vector<const Scene*>& labeled,
                              const std::vector<const Scene*>& unlabeled,
                              const MtdetrConfig& cfg,
                              Rng& labeled_rng,
                              Rng& unlabeled_rng) {
  MtdetrStepMetrics m{0.0, 0.0, 0.0, 0.0, 0};
  DetectorParams grad = DetectorParams::zeros(state.student.k, state.student.num_classes,
                                              state.student.d_f());
  diverge_guard("mtdetr_step", [&] {
    m.loss_sup = supervised_batch(state.student, labeled, cfg.aug, cfg.weights, cfg.focal, labeled_rng, grad);
    if (cfg.lambda_u > 0.0) {
      m.loss_unsup = unsupervised_batch(state.student, state.teacher, unlabeled, cfg, unlabeled_rng, grad,
                                        m.pseudo_count);
    }
  });
  m.total = m.loss_sup + cfg.lambda_u * m.loss_unsup;
  if (!std::isfinite(m.total) || m.total > 1e12) {
    throw TrainingDiverged("mtdetr_step: loss diverged at step " + std::to_string(state.step));
  }
  sgd(state.student, grad, cfg.lr, cfg.box_lr_scale, "mtdetr_step");
  ++state.step;
  EmaSchedule sched = cfg.ema;
  sched.total = std::max<std::size_t>(cfg.steps, 1);
  m.keep_rate = cosine_keep_rate(std::min(state.step, sched.total), sched);
  state.teacher = ema_update(state.teacher, state.student, m.keep_rate);
  return m;
}

MtdetrLog run_mtdetr(const MtdetrConfig& cfg) {
  const MtdetrData data = mtdetr_data(cfg);
  const Rng master(cfg.seed);
  Rng init_rng = master.split(2);
  Rng pre_rng = master.split(3);
  Rng labeled_rng = master.split(4);
  Rng unlabeled_rng = master.split(5);

  auto sample = [](const std::vector<Scene>& from, std::size_t n, Rng& rng) {
    std::vector<const Scene*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(&from[static_cast<std::size_t>(rng.below(from.size()))]);
    }
    return out;
  };

  MtdetrState state;
  state.student = DetectorParams::random(cfg.k, cfg.scene.num_classes, cfg.scene.d_f, cfg.init_scale, init_rng);
  if (cfg.box_passthrough_init) {
    for (std::size_t c = 0; c < kBoxDims; ++c) {
      state.student.a(cfg.k + c, c) += 1.0;
    }
  }
  for (std::size_t s = 0; s < cfg.pre_steps; ++s) {
    supervised_step(state.student, sample(data.labeled, cfg.batch_labeled, pre_rng), cfg, pre_rng);
  }
  state.teacher = state.student;

  MtdetrLog log;
  log.pre_map = evaluate_map(state.student, data.test);
  log.records.push_back({0, 0.0, 0.0, cfg.ema.alpha_start, log.pre_map});
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto lab = sample(data.labeled, cfg.batch_labeled, labeled_rng);
    const auto unl = sample(data.unlabeled, cfg.batch_unlabeled, unlabeled_rng);
    const MtdetrStepMetrics m = mtdetr_step(state, lab, unl, cfg, labeled_rng, unlabeled_rng);
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      log.records.push_back({step, m.loss_sup, m.loss_unsup, m.keep_rate, evaluate_map(state.student, data.test)});
    }
  }
  log.final_map = log.records.back().map;
  return log;
}

} // namespace fal
