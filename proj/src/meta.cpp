#include "falkit/meta.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "falkit/errors.h"
#include "falkit/spectral.h"

namespace fal {

void TaskGenConfig::validate() const {
  if (d == 0 || n_way == 0 || k_shot == 0) {
    throw InvalidInput("TaskGenConfig: d, n_way and k_shot must be positive");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw InvalidInput("TaskGenConfig: noise_std must be >= 0");
  }
  if (!(class_spread >= 0.0) || !std::isfinite(class_spread)) {
    throw InvalidInput("TaskGenConfig: class_spread must be >= 0");
  }
}

Episode sample_episode(const TaskGenConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Vec> means(cfg.n_way, Vec(cfg.d));
  for (auto& m : means) {
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
  }
  auto draw = [&](std::size_t c) {
    Vec x(cfg.d);
    for (std::size_t i = 0; i < cfg.d; ++i) {
      x[i] = means[c][i] + cfg.noise_std * rng.normal();
    }
    return LabeledInput{std::move(x), c};
  };
  Episode ep;
  ep.support.reserve(cfg.n_way * cfg.k_shot);
  ep.query.reserve(cfg.n_way * cfg.q_queries);
  for (std::size_t c = 0; c < cfg.n_way; ++c) {
    for (std::size_t s = 0; s < cfg.k_shot; ++s) {
      ep.support.push_back(draw(c));
    }
  }
  for (std::size_t c = 0; c < cfg.n_way; ++c) {
    for (std::size_t q = 0; q < cfg.q_queries; ++q) {
      ep.query.push_back(draw(c));
    }
  }
  return ep;
}

Vec LinearEncoder::encode(std::span<const double> x) const {
  if (x.size() != phi.cols()) {
    throw ShapeError("LinearEncoder: input has " + std::to_string(x.size()) + " dims, expected " +
                     std::to_string(phi.cols()));
  }
  return matvec(phi, x);
}

std::vector<LabeledEmbedding> LinearEncoder::encode(const std::vector<LabeledInput>& items) const {
  std::vector<LabeledEmbedding> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    out.push_back({encode(it.x), it.label});
  }
  return out;
}

LinearEncoder random_encoder(std::size_t k, std::size_t d, Rng& rng) {
  if (k == 0 || d == 0) {
    throw InvalidInput("random_encoder: dimensions must be positive");
  }
  LinearEncoder e{Matrix(k, d)};
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& v : e.phi.data()) {
    v = rng.normal(0.0, sd);
  }
  return e;
}

Matrix prototypes(const std::vector<LabeledInput>& support, const LinearEncoder& enc, bool normalize) {
  return proto_loss(enc.encode(support), {}, normalize).prototypes;
}

EpisodeLossGrad episode_loss_grad(const Episode& ep,
                                  const LinearEncoder& enc,
                                  bool normalize,
                                  const Matrix* d_prototypes) {
  const auto support = enc.encode(ep.support);
  const auto query = enc.encode(ep.query);
  ProtoGrad pg = proto_loss_grad(support, query, normalize, d_prototypes);
  EpisodeLossGrad out{std::move(pg.value), Matrix(enc.phi.rows(), enc.phi.cols())};
  auto accumulate = [&](const Vec& dz, const Vec& x) {
    for (std::size_t a = 0; a < dz.size(); ++a) {
      if (dz[a] == 0.0) {
        continue;
      }
      for (std::size_t b = 0; b < x.size(); ++b) {
        out.d_phi(a, b) += dz[a] * x[b];
      }
    }
  };
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    accumulate(pg.d_support[i], ep.support[i].x);
  }
  for (std::size_t i = 0; i < ep.query.size(); ++i) {
    accumulate(pg.d_query[i], ep.query[i].x);
  }
  return out;
}

ProtoVariant parse_proto_variant(const std::string& name) {
  if (name == "vanilla") {
    return ProtoVariant::vanilla;
  }
  if (name == "normalized") {
    return ProtoVariant::normalized;
  }
  if (name == "normalized_entropy" || name == "normalized+entropy") {
    return ProtoVariant::normalized_entropy;
  }
  throw InvalidInput("unknown ProtoNet variant '" + name + "'");
}

std::string to_string(ProtoVariant v) {
  switch (v) {
    case ProtoVariant::vanilla:
      return "vanilla";
    case ProtoVariant::normalized:
      return "normalized";
    case ProtoVariant::normalized_entropy:
      return "normalized_entropy";
  }
  return "unknown";
}

void ProtoTrainConfig::validate() const {
  task.validate();
  if (k == 0 || batch == 0 || log_every == 0) {
    throw InvalidInput("ProtoTrainConfig: k, batch and log_every must be positive");
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) {
    throw InvalidInput("ProtoTrainConfig: lr must be positive");
  }
  if (!(lambda1 >= 0.0)) {
    throw InvalidInput("ProtoTrainConfig: lambda1 must be >= 0");
  }
  if (!(init_scale > 0.0) || !std::isfinite(init_scale)) {
    throw InvalidInput("ProtoTrainConfig: init_scale must be positive");
  }
  if (task.q_queries == 0) {
    throw InvalidInput("ProtoTrainConfig: episodes need queries");
  }
}

Matrix stacked_prototypes(const std::vector<Episode>& batch, const LinearEncoder& enc, bool normalize) {
  std::vector<Matrix> parts;
  std::size_t rows = 0;
  for (const auto& ep : batch) {
    parts.push_back(prototypes(ep.support, enc, normalize));
    rows += parts.back().rows();
  }
  Matrix w(rows, enc.phi.rows());
  std::size_t r = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i, ++r) {
      for (std::size_t j = 0; j < p.cols(); ++j) {
        w(r, j) = p(i, j);
      }
    }
  }
  return w;
}

namespace {

double kappa_or_inf(const Matrix& w) {
  try {
    return condition_number(w);
  } catch (const DegenerateMatrix&) {
    return std::numeric_limits<double>::infinity();
  }
}

double entropy_or_nan(const Matrix& w) {
  try {
    return sv_entropy(w);
  } catch (const DegenerateMatrix&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

TrainRecord measure(std::size_t step, const std::vector<Episode>& monitor, const LinearEncoder& enc,
                    bool normalize) {
  TrainRecord r{step, 0.0, 0.0, 0.0, 0.0, 0.0};
  for (const auto& ep : monitor) {
    const ProtoResult pr = proto_loss(enc.encode(ep.support), enc.encode(ep.query), normalize);
    r.loss += pr.loss / static_cast<double>(monitor.size());
    r.accuracy += pr.accuracy / static_cast<double>(monitor.size());
  }
  const Matrix w = stacked_prototypes(monitor, enc, normalize);
  r.kappa_wn = kappa_or_inf(w);
  r.frob_wn = w.frobenius();
  r.h_sigma = entropy_or_nan(w);
  return r;
}

} // namespace

TrainLog train_protonet(const ProtoTrainConfig& cfg) {
  cfg.validate();
  if (cfg.episodes % cfg.batch != 0) {
    throw InvalidInput("train_protonet: episodes must be a multiple of the batch size");
  }
  const bool normalize = cfg.variant != ProtoVariant::vanilla;
  const bool entropy = cfg.variant == ProtoVariant::normalized_entropy && cfg.lambda1 > 0.0;
  const Rng master(cfg.seed);
  Rng init_rng = master.split(1);
  Rng monitor_rng = master.split(2);
  Rng train_rng = master.split(3);

  TrainLog log;
  log.encoder = random_encoder(cfg.k, cfg.task.d, init_rng);
  log.encoder.phi *= cfg.init_scale;
  std::vector<Episode> monitor;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    monitor.push_back(sample_episode(cfg.task, monitor_rng));
  }
  log.records.push_back(measure(0, monitor, log.encoder, normalize));

  const std::size_t steps = cfg.episodes / cfg.batch;
  const double inv_b = 1.0 / static_cast<double>(cfg.batch);
  for (std::size_t step = 1; step <= steps; ++step) {
    std::vector<Episode> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      batch.push_back(sample_episode(cfg.task, train_rng));
    }
    // Upstream gradient of lambda1 * H_sigma(W_N), split per episode. It is
    // scaled by the batch size because the episode terms are averaged below.
    std::vector<Matrix> d_protos;
    double reg = 0.0;
    if (entropy) {
      const Matrix w = stacked_prototypes(batch, log.encoder, true);
      try {
        const Matrix gh = grad_sv_entropy(w);
        reg = cfg.lambda1 * sv_entropy(w);
        const std::size_t n = cfg.task.n_way;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
          Matrix part(n, w.cols());
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w.cols(); ++j) {
              part(i, j) = gh(b * n + i, j) * cfg.lambda1 * static_cast<double>(cfg.batch);
            }
          }
          d_protos.push_back(std::move(part));
        }
      } catch (const NonSmoothPoint&) {
        d_protos.clear();
      } catch (const DegenerateMatrix&) {
        d_protos.clear();
      }
    }
    Matrix grad(cfg.k, cfg.task.d);
    double loss = reg;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const Matrix* dp = d_protos.empty() ? nullptr : &d_protos[b];
      const EpisodeLossGrad eg = episode_loss_grad(batch[b], log.encoder, normalize, dp);
      loss += eg.value.loss * inv_b;
      grad += eg.d_phi;
    }
    if (!std::isfinite(loss) || loss > 1e12) {
      throw TrainingDiverged("train_protonet: loss " + std::to_string(loss) + " at step " +
                             std::to_string(step));
    }
    grad *= inv_b;
    log.encoder.phi -= grad * cfg.lr;
    if (!log.encoder.phi.all_finite()) {
      throw TrainingDiverged("train_protonet: encoder became non-finite at step " +
                             std::to_string(step));
    }
    if (step % cfg.log_every == 0 || step == steps) {
      log.records.push_back(measure(step, monitor, log.encoder, normalize));
    }
  }
  return log;
}

double history_kappa(const std::vector<Episode>& episodes, const LinearEncoder& enc, bool normalize) {
  if (episodes.empty() || episodes.size() > 2000) {
    throw InvalidInput("history_kappa: need between 1 and 2000 episodes");
  }
  return condition_number(stacked_prototypes(episodes, enc, normalize));
}

// ---------------------------------------------------------------------------

void MamlSimConfig::validate() const {
  if (d < 2) {
    throw InvalidInput("maml_linreg_sim: d must be >= 2");
  }
  const double c = beta * (1.0 - alpha) * (1.0 - alpha);
  if (!(c > 0.0 && c < 2.0)) {
    throw InvalidInput("maml_linreg_sim: beta (1 - alpha)^2 must lie in (0, 2)");
  }
  if (!(c_min > 0.0 && c_min <= c_max)) {
    throw InvalidInput("maml_linreg_sim: need 0 < c_min <= c_max");
  }
}

MamlSimResult maml_linreg_sim(const MamlSimConfig& cfg, Rng& rng) {
  cfg.validate();
  const double c = cfg.beta * (1.0 - cfg.alpha) * (1.0 - cfg.alpha);
  MamlSimResult r;
  r.predictors.push_back(Vec(cfg.d, 0.0));
  Vec theta;
  for (std::size_t t = 1; t <= cfg.iterations; ++t) {
    const bool fresh = cfg.mode == TaskMode::iid || t <= cfg.warmup_iid + 1;
    if (fresh) {
      theta.assign(cfg.d, 0.0);
      for (double& v : theta) {
        v = rng.normal();
      }
    } else {
      const double ci = rng.uniform(cfg.c_min, cfg.c_max);
      for (double& v : theta) {
        v *= ci;
      }
    }
    r.thetas.push_back(theta);
    const Vec& prev = r.predictors.back();
    Vec w(cfg.d);
    for (std::size_t i = 0; i < cfg.d; ++i) {
      w[i] = prev[i] - c * (prev[i] - theta[i]);
    }
    r.predictors.push_back(std::move(w));

    MamlSimStep s{t, Matrix(2, cfg.d), 0.0, false};
    for (std::size_t i = 0; i < cfg.d; ++i) {
      s.w2(0, i) = r.predictors[t - 1][i];
      s.w2(1, i) = r.predictors[t][i];
    }
    try {
      s.kappa = condition_number(s.w2);
    } catch (const DegenerateMatrix&) {
      s.kappa = std::numeric_limits<double>::infinity();
      s.degenerate = true;
    }
    r.steps.push_back(std::move(s));
  }
  return r;
}

std::size_t kappa_decreases(const MamlSimResult& r, double tol) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < r.steps.size(); ++i) {
    const double a = r.steps[i - 1].kappa;
    const double b = r.steps[i].kappa;
    if (std::isinf(a) && std::isinf(b)) {
      continue;
    }
    if (b < a - tol) {
      ++n;
    }
  }
  return n;
}

// ---------------------------------------------------------------------------

double prop44_kappa_hat_closed_form(double epsilon) {
  const double e2 = epsilon * epsilon;
  const double root = epsilon * std::sqrt(e2 + 4.0);
  return std::sqrt((2.0 + e2 + root) / (2.0 + e2 - root));
}

Prop44Result prop44_example(double epsilon, std::size_t d, Rng& rng, std::size_t n_samples,
                            double k_range) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw InvalidInput("prop44_example: epsilon must lie in (0, 1)");
  }
  if (d < 3) {
    throw InvalidInput("prop44_example: d must be >= 3");
  }
  Prop44Result r;
  r.phi_star = Matrix(d, 2);
  r.phi_star(0, 0) = 1.0;
  r.phi_star(1, 1) = 1.0;
  r.phi_hat = Matrix(d, 2);
  r.phi_hat(1, 0) = 1.0;
  r.phi_hat(2, 1) = 1.0;
  r.w_star = Matrix{{1.0, epsilon}, {1.0, -epsilon}};
  r.w_hat = Matrix{{0.0, 1.0}, {1.0, -epsilon}};
  r.kappa_star = condition_number(r.w_star);
  r.kappa_hat = condition_number(r.w_hat);
  r.kappa_hat_closed_form = prop44_kappa_hat_closed_form(epsilon);

  // Points of mu_1 and mu_2. The negative branch of mu_1 uses first coordinate
  // -1 - k eps so that both representations reproduce the label.
  auto point = [&](std::size_t task, double y, double k) {
    Vec x(d);
    if (task == 0) {
      x[0] = y > 0 ? 1.0 - k * epsilon : -1.0 - k * epsilon;
      x[1] = k;
      x[2] = y;
    } else {
      x[0] = y > 0 ? 1.0 + k * epsilon : -1.0 + k * epsilon;
      x[1] = k;
      x[2] = y > 0 ? (k - 1.0) / epsilon : (1.0 + k) / epsilon;
    }
    for (std::size_t i = 3; i < d; ++i) {
      x[i] = rng.normal();
    }
    return x;
  };
  r.max_residual_star = 0.0;
  r.max_residual_hat = 0.0;
  for (std::size_t task = 0; task < 2; ++task) {
    for (std::size_t s = 0; s < n_samples; ++s) {
      const double y = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double k = rng.uniform(-k_range, k_range);
      Vec x = point(task, y, k);
      const Vec fs = matvec_t(r.phi_star, x);
      const Vec fh = matvec_t(r.phi_hat, x);
      const double ys = dot(r.w_star.row(task), fs);
      const double yh = dot(r.w_hat.row(task), fh);
      r.max_residual_star = std::max(r.max_residual_star, std::abs(y - ys));
      r.max_residual_hat = std::max(r.max_residual_hat, std::abs(y - yh));
      r.samples.push_back({std::move(x), y, task});
    }
  }
  return r;
}

// ---------------------------------------------------------------------------

ImpResult imp_infer(const std::vector<LabeledInput>& support,
                    const std::vector<Vec>& query,
                    double lambda_thresh,
                    double sigma_cluster,
                    const LinearEncoder& enc,
                    std::size_t refine_iters) {
  if (support.empty()) {
    throw InvalidEpisode("imp_infer: empty support set");
  }
  if (!(lambda_thresh > 0.0) || !(sigma_cluster > 0.0)) {
    throw InvalidInput("imp_infer: lambda_thresh and sigma_cluster must be positive");
  }
  const auto emb = enc.encode(support);
  const ProtoResult base = proto_loss(emb, {}, false);
  const std::size_t n_way = base.prototypes.rows();

  ImpResult out;
  for (std::size_t c = 0; c < n_way; ++c) {
    const auto row = base.prototypes.row(c);
    out.clusters.push_back({Vec(row.begin(), row.end()), c});
  }
  // Spawn pass in support order.
  for (const auto& e : emb) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& cl : out.clusters) {
      if (cl.label == e.label) {
        best = std::min(best, squared_distance(e.z, cl.mean));
      }
    }
    if (best > lambda_thresh) {
      out.clusters.push_back({e.z, e.label});
    }
  }
  // Soft refinement restricted to same-label clusters.
  const double inv_two_var = 1.0 / (2.0 * sigma_cluster * sigma_cluster);
  for (std::size_t it = 0; it < refine_iters; ++it) {
    std::vector<Vec> sums(out.clusters.size(), Vec(enc.phi.rows(), 0.0));
    Vec weights(out.clusters.size(), 0.0);
    for (const auto& e : emb) {
      std::vector<std::size_t> idx;
      Vec logits;
      for (std::size_t c = 0; c < out.clusters.size(); ++c) {
        if (out.clusters[c].label == e.label) {
          idx.push_back(c);
          logits.push_back(-squared_distance(e.z, out.clusters[c].mean) * inv_two_var);
        }
      }
      const Vec resp = softmax(logits);
      for (std::size_t t = 0; t < idx.size(); ++t) {
        weights[idx[t]] += resp[t];
        for (std::size_t a = 0; a < e.z.size(); ++a) {
          sums[idx[t]][a] += resp[t] * e.z[a];
        }
      }
    }
    for (std::size_t c = 0; c < out.clusters.size(); ++c) {
      if (weights[c] > 1e-12) {
        for (std::size_t a = 0; a < sums[c].size(); ++a) {
          out.clusters[c].mean[a] = sums[c][a] / weights[c];
        }
      }
    }
  }
  // Classification: closest cluster per class, softmax over classes.
  for (const auto& qx : query) {
    const Vec z = enc.encode(qx);
    Vec neg_d(n_way, -std::numeric_limits<double>::infinity());
    for (const auto& cl : out.clusters) {
      neg_d[cl.label] = std::max(neg_d[cl.label], -squared_distance(z, cl.mean));
    }
    out.class_probs.push_back(softmax(neg_d));
    out.predictions.push_back(
        static_cast<std::size_t>(std::max_element(neg_d.begin(), neg_d.end()) - neg_d.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor3 mc_transform(const Tensor3& g, const Matrix& m_o, const Matrix& m_i, const Matrix& m_f) {
  const Matrix* ms[3] = {&m_o, &m_i, &m_f};
  for (int mode = 1; mode <= 3; ++mode) {
    const Matrix& m = *ms[mode - 1];
    if (m.rows() != m.cols() || m.cols() != g.dim(mode)) {
      throw ShapeError("mc_transform: mode-" + std::to_string(mode) + " matrix must be " +
                       std::to_string(g.dim(mode)) + " x " + std::to_string(g.dim(mode)));
    }
  }
  Tensor3 out = n_mode_product(g, m_f, 3);
  out = n_mode_product(out, m_i, 2);
  return n_mode_product(out, m_o, 1);
}

} // namespace fal
