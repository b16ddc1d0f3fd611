// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>

#include "falkit/experiments.h"
#include "falkit/matching.h"
#include "falkit/spectral.h"
#include "oracles.h"

using fal::Box;
using fal::Matrix;
using fal::Vec;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string list(const Vec& v, int digits = 4) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i], digits);
  return s + "]";
}

fal::ExperimentConfig config(const std::string& name) {
  return fal::load_config(std::string(FAL_CONFIG_DIR) + "/" + name);
}

Box random_box(fal::Rng& rng) {
  return Box(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4));
}

Matrix naive_kron(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q) k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

// ---------------------------------------------------------------------------

Outcome two_task_construction() {
  const double e = 0.02;
  const double root = e * std::sqrt(e * e + 4.0);
  const double want_hat = std::sqrt((2.0 + e * e + root) / (2.0 + e * e - root));
  fal::Rng rng(1);
  const auto r = fal::prop44_example(e, 5, rng);
  bool ok = std::abs(r.kappa_star - 50.0) <= 1e-12 * 50.0;
  ok = ok && std::abs(r.kappa_hat - want_hat) <= 1e-6 && std::abs(r.kappa_hat_closed_form - want_hat) <= 1e-6;
  ok = ok && r.max_residual_star < 1e-12 && r.max_residual_hat < 1e-12;
  Vec sweep;
  double prev = r.kappa_hat;
  for (double eps : {1e-1, 1e-2, 1e-3, 1e-4}) {
    fal::Rng s(2);
    const double k = fal::prop44_example(eps, 5, s).kappa_hat;
    sweep.push_back(k);
    ok = ok && k > 1.0 && (eps > e || k < prev);
    if (eps <= e) prev = k;
  }
  for (std::size_t i = 1; i < sweep.size(); ++i) ok = ok && sweep[i] < sweep[i - 1];
  return {ok, "kappa_star=" + fmt(r.kappa_star, 15) + " kappa_hat(svd)=" + fmt(r.kappa_hat, 15) +
                  " kappa_hat(formula)=" + fmt(r.kappa_hat_closed_form, 15) + " sweep " + list(sweep, 10)};
}

Outcome colinear_monotonicity() {
  bool ok = true;
  std::size_t degenerate = 0, steps = 0, decreases = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    fal::MamlSimConfig cfg;
    cfg.iterations = 200;
    cfg.mode = fal::TaskMode::colinear;
    fal::Rng rng(seed);
    const auto r = fal::maml_linreg_sim(cfg, rng);
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
      ++steps;
      degenerate += r.steps[i].degenerate ? 1 : 0;
      if (i > 0 && r.steps[i].kappa < r.steps[i - 1].kappa - 1e-9) ++decreases;
    }
  }
  ok = decreases == 0;
  return {ok, std::to_string(steps) + " steps, " + std::to_string(decreases) + " decreases, " +
                  std::to_string(degenerate) + " rank-deficient (kappa=inf)"};
}

Outcome hungarian_oracle() {
  fal::Rng rng(2024);
  std::size_t mismatches = 0;
  for (int t = 0; t < 120; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(t % 7);
    const Matrix c = oracle::random_matrix(n, n, rng);
    if (fal::hungarian(c).cost != oracle::brute_force_assignment(c)) ++mismatches;
  }
  return {mismatches == 0, "120 matrices up to 7x7, " + std::to_string(mismatches) + " mismatches"};
}

// Plain SCE and InfoNCE written from their definitions over unit embeddings.
double reference_sce(const std::vector<Vec>& u, const std::vector<Vec>& v, const std::vector<std::size_t>& pi,
                     const fal::ContrastConfig& cfg) {
  const std::size_t m = u.size();
  double loss = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    Vec st(v.size()), tt;
    for (std::size_t b = 0; b < v.size(); ++b) st[b] = oracle::dotp(u[a], v[b]);
    const Vec ps = oracle::naive_softmax(st, cfg.tau);
    for (std::size_t c = 0; c < m; ++c)
      if (c != a) tt.push_back(oracle::dotp(u[a], u[c]));
    const Vec pt = oracle::naive_softmax(tt, cfg.tau_t);
    for (std::size_t c = 0, k = 0; c < m; ++c) {
      const double target = c == a ? cfg.lambda_sce : (1.0 - cfg.lambda_sce) * pt[k++];
      loss -= target * std::log(ps[pi[c]]);
    }
  }
  return loss / static_cast<double>(m);
}

double reference_info_nce(const std::vector<Vec>& u, const std::vector<Vec>& v, double tau) {
  double loss = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    Vec s(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) s[j] = oracle::dotp(u[i], v[j]);
    loss -= std::log(oracle::naive_softmax(s, tau)[i]);
  }
  return loss / static_cast<double>(u.size());
}

Outcome loss_reductions() {
  fal::Rng rng(77);
  double worst_sce = 0.0, worst_nce = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t images = 1 + static_cast<std::size_t>(t % 3), per = 3;
    fal::ProposalBatch te(images), st(images);
    std::vector<fal::Assignment> as(images);
    std::vector<Vec> u, v;
    std::vector<std::size_t> pi;
    for (std::size_t n = 0; n < images; ++n) {
      std::vector<std::size_t> perm(per);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = per; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
      st[n].resize(per, {Vec(), Box(0.5, 0.5, 0.2, 0.2)});
      for (std::size_t j = 0; j < per; ++j) {
        te[n].push_back({oracle::random_vec(4, rng), random_box(rng)});
        st[n][perm[j]] = {oracle::random_vec(4, rng), random_box(rng)};
      }
      as[n].sigma = perm;
    }
    for (std::size_t n = 0; n < images; ++n)
      for (const auto& p : st[n]) v.push_back(oracle::unit(p.z));
    std::vector<Vec> v_matched;
    for (std::size_t n = 0; n < images; ++n)
      for (std::size_t j = 0; j < per; ++j) {
        u.push_back(oracle::unit(te[n][j].z));
        pi.push_back(n * per + as[n].sigma[j]);
        v_matched.push_back(v[pi.back()]);
      }
    fal::ContrastConfig cfg;
    cfg.delta = 1.0;
    worst_sce = std::max(worst_sce, std::abs(fal::loc_sce(te, st, as, cfg) - reference_sce(u, v, pi, cfg)));
    worst_nce = std::max(worst_nce, std::abs(fal::loc_nce(te, st, as, cfg) - reference_info_nce(u, v_matched, cfg.tau)));
  }
  return {worst_sce <= 1e-12 && worst_nce <= 1e-12,
          "20 batches, max |loc_sce - sce| = " + fmt(worst_sce, 3) + ", max |loc_nce - info_nce| = " + fmt(worst_nce, 3)};
}

// ---------------------------------------------------------------------------
// Gradient sweep

struct GradCheck {
  std::string name;
  double worst = 0.0;
  int cases = 0;
  void add(const Vec& analytic, const Vec& numeric) {
    worst = std::max(worst, oracle::grad_rel_error(analytic, numeric));
    ++cases;
  }
};

Vec pack(const fal::DetectorParams& p) {
  Vec v(p.a.data().begin(), p.a.data().end());
  v.insert(v.end(), p.bias.begin(), p.bias.end());
  return v;
}

fal::DetectorParams unpack(const fal::DetectorParams& like, const Vec& v) {
  fal::DetectorParams p = like;
  std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(p.a.size()), p.a.data().begin());
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(p.a.size()), v.end(), p.bias.begin());
  return p;
}

Vec pack_z(const fal::ProposalBatch& b) {
  Vec v;
  for (const auto& img : b)
    for (const auto& p : img) v.insert(v.end(), p.z.begin(), p.z.end());
  return v;
}

fal::ProposalBatch with_z(fal::ProposalBatch b, const Vec& v) {
  std::size_t k = 0;
  for (auto& img : b)
    for (auto& p : img)
      for (double& z : p.z) z = v[k++];
  return b;
}

Vec pack_grads(const std::vector<std::vector<Vec>>& g) {
  Vec v;
  for (const auto& img : g)
    for (const auto& x : img) v.insert(v.end(), x.begin(), x.end());
  return v;
}

Vec pack_preds(const std::vector<fal::Prediction>& preds) {
  Vec x;
  for (const auto& p : preds) {
    x.insert(x.end(), p.logits.begin(), p.logits.end());
    x.insert(x.end(), p.box.coords().begin(), p.box.coords().end());
  }
  return x;
}

std::vector<fal::Prediction> unpack_preds(std::vector<fal::Prediction> preds, const Vec& x) {
  std::size_t k = 0;
  for (auto& p : preds) {
    for (double& v : p.logits) v = x[k++];
    p.box = Box(x[k], x[k + 1], x[k + 2], x[k + 3]);
    k += 4;
  }
  return preds;
}

Vec pack_detr_grad(const fal::DetrGrad& g) {
  Vec x;
  for (const auto& p : g.d_predictions[0]) {
    x.insert(x.end(), p.d_logits.begin(), p.d_logits.end());
    x.insert(x.end(), p.d_box.begin(), p.d_box.end());
  }
  return x;
}

Outcome gradient_oracle() {
  std::vector<GradCheck> checks{{"kappa"}, {"h_sigma"}, {"focal"}, {"soft_ce"}, {"proto+encoder"}, {"info_nce"},
                                {"loc_sce"}, {"loc_nce"}, {"supervised_detr"}, {"unsupervised_detr"},
                                {"proseco"}, {"detector_composition"}};
  fal::Rng rng(5150);
  const fal::CostWeights w;
  for (int t = 0; t < 10; ++t) {
    {
      // Separated singular values keep both spectral functions smooth.
      const Matrix qa = fal::svd(oracle::random_matrix(4, 4, rng)).u;
      const Matrix qb = fal::svd(oracle::random_matrix(5, 5, rng)).u;
      Matrix m(4, 5);
      const Vec s{3.0, 2.3, 1.6, 0.9};
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          for (std::size_t k = 0; k < 4; ++k) m(i, j) += qa(i, k) * s[k] * qb(j, k);
      const Vec x = oracle::flatten(m);
      checks[0].add(oracle::flatten(fal::grad_condition_number(m)),
                    oracle::central_diff([](const Vec& v) { return fal::condition_number(Matrix(4, 5, v)); }, x));
      checks[1].add(oracle::flatten(fal::grad_sv_entropy(m)),
                    oracle::central_diff([](const Vec& v) { return fal::sv_entropy(Matrix(4, 5, v)); }, x));
    }
    {
      const Vec l = oracle::random_vec(5, rng, 2.0), l2 = oracle::random_vec(5, rng, 2.0);
      const std::size_t target = rng.below(5);
      checks[2].add(fal::focal_loss_grad(l, target),
                    oracle::central_diff([&](const Vec& x) { return fal::focal_loss(x, target); }, l));
      const auto g = fal::soft_cross_entropy_grad(l, l2);
      Vec ana = g.d_teacher;
      ana.insert(ana.end(), g.d_student.begin(), g.d_student.end());
      Vec x = l;
      x.insert(x.end(), l2.begin(), l2.end());
      checks[3].add(ana, oracle::central_diff(
                             [](const Vec& v) {
                               return fal::soft_cross_entropy(Vec(v.begin(), v.begin() + 5), Vec(v.begin() + 5, v.end()));
                             },
                             x));
    }
    {
      fal::TaskGenConfig tc;
      tc.d = 5;
      tc.n_way = 3;
      tc.k_shot = 2;
      tc.q_queries = 2;
      const auto ep = fal::sample_episode(tc, rng);
      const auto enc = fal::random_encoder(4, 5, rng);
      const bool norm = t % 2 == 0;
      checks[4].add(oracle::flatten(fal::episode_loss_grad(ep, enc, norm).d_phi),
                    oracle::central_diff(
                        [&](const Vec& x) { return fal::episode_loss_grad(ep, {Matrix(4, 5, x)}, norm).value.loss; },
                        oracle::flatten(enc.phi)));
    }
    {
      std::vector<Vec> a, b;
      for (int i = 0; i < 4; ++i) {
        a.push_back(oracle::random_vec(3, rng));
        b.push_back(oracle::random_vec(3, rng));
      }
      const auto g = fal::info_nce_grad(a, b, 0.5);
      Vec ana = pack_grads({g.d_z});
      const Vec ana2 = pack_grads({g.d_z_prime});
      ana.insert(ana.end(), ana2.begin(), ana2.end());
      Vec x = pack_grads({a});
      const Vec x2 = pack_grads({b});
      x.insert(x.end(), x2.begin(), x2.end());
      checks[5].add(ana, oracle::central_diff(
                             [](const Vec& v) {
                               std::vector<Vec> za, zb;
                               for (std::size_t i = 0; i < 4; ++i) {
                                 za.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(3 * i),
                                                 v.begin() + static_cast<std::ptrdiff_t>(3 * i + 3));
                                 zb.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(12 + 3 * i),
                                                 v.begin() + static_cast<std::ptrdiff_t>(15 + 3 * i));
                               }
                               return fal::info_nce(za, zb, 0.5);
                             },
                             x));
    }
    {
      fal::ProposalBatch te(2), st(2);
      std::vector<fal::Assignment> as(2);
      std::vector<std::vector<Box>> ss(2);
      std::vector<fal::Assignment> ba(2);
      for (std::size_t n = 0; n < 2; ++n) {
        for (int j = 0; j < 3; ++j) te[n].push_back({oracle::random_vec(3, rng), random_box(rng)});
        for (int j = 0; j < 4; ++j) st[n].push_back({oracle::random_vec(3, rng), random_box(rng)});
        as[n] = fal::hungarian(fal::prop_cost_matrix(te[n], st[n], w));
        for (int j = 0; j < 2; ++j) ss[n].push_back(random_box(rng));
        std::vector<Box> sb;
        for (const auto& p : st[n]) sb.push_back(p.b);
        ba[n] = fal::hungarian(fal::box_cost_matrix(ss[n], sb, w));
      }
      fal::ContrastConfig cfg;
      cfg.delta = 0.2;
      for (int which = 0; which < 2; ++which) {
        auto loss = [&](const fal::ProposalBatch& a, const fal::ProposalBatch& b) {
          return which == 0 ? fal::loc_sce(a, b, as, cfg) : fal::loc_nce(a, b, as, cfg);
        };
        const auto g = which == 0 ? fal::loc_sce_grad(te, st, as, cfg) : fal::loc_nce_grad(te, st, as, cfg);
        Vec ana = pack_grads(g.d_teacher);
        const Vec ana2 = pack_grads(g.d_student);
        ana.insert(ana.end(), ana2.begin(), ana2.end());
        const std::size_t nt = pack_z(te).size();
        Vec x = pack_z(te);
        const Vec x2 = pack_z(st);
        x.insert(x.end(), x2.begin(), x2.end());
        checks[6 + static_cast<std::size_t>(which)].add(
            ana, oracle::central_diff(
                     [&](const Vec& v) {
                       return loss(with_z(te, Vec(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nt))),
                                   with_z(st, Vec(v.begin() + static_cast<std::ptrdiff_t>(nt), v.end())));
                     },
                     x));
      }
      const auto pg = fal::proseco_loss_grad(te, st, ss, as, ba, w, cfg, 2.0);
      Vec ana, x;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t j = 0; j < st[n].size(); ++j) {
          ana.insert(ana.end(), pg.d_student[n][j].d_z.begin(), pg.d_student[n][j].d_z.end());
          ana.insert(ana.end(), pg.d_student[n][j].d_box.begin(), pg.d_student[n][j].d_box.end());
          x.insert(x.end(), st[n][j].z.begin(), st[n][j].z.end());
          x.insert(x.end(), st[n][j].b.coords().begin(), st[n][j].b.coords().end());
        }
      checks[10].add(ana, oracle::central_diff(
                              [&](const Vec& v) {
                                auto s2 = st;
                                std::size_t k = 0;
                                for (auto& img : s2)
                                  for (auto& p : img) {
                                    for (double& z : p.z) z = v[k++];
                                    p.b = Box(v[k], v[k + 1], v[k + 2], v[k + 3]);
                                    k += 4;
                                  }
                                return fal::proseco_loss(te, s2, ss, as, ba, w, cfg, 2.0).total;
                              },
                              x, 1e-7));
    }
    {
      std::vector<fal::Prediction> preds;
      for (int i = 0; i < 4; ++i) preds.push_back({oracle::random_vec(4, rng), random_box(rng)});
      const std::vector<fal::GroundTruth> gts{{0, random_box(rng)}, {2, random_box(rng)}};
      const std::vector<fal::PseudoLabel> pls{
          {oracle::naive_softmax(oracle::random_vec(4, rng, 2.0)), random_box(rng), 0},
          {oracle::naive_softmax(oracle::random_vec(4, rng, 2.0)), random_box(rng), 1}};
      const auto as = fal::hungarian(fal::supervised_cost_matrix(gts, preds, w));
      const auto au = fal::hungarian(fal::pseudo_cost_matrix(pls, preds, w));
      checks[8].add(pack_detr_grad(fal::supervised_detr_loss_grad({gts}, {preds}, {as}, w)),
                    oracle::central_diff(
                        [&](const Vec& v) { return fal::supervised_detr_loss({gts}, {unpack_preds(preds, v)}, {as}, w); },
                        pack_preds(preds), 1e-7));
      checks[9].add(pack_detr_grad(fal::unsupervised_detr_loss_grad({pls}, {preds}, {au}, w)),
                    oracle::central_diff(
                        [&](const Vec& v) { return fal::unsupervised_detr_loss({pls}, {unpack_preds(preds, v)}, {au}, w); },
                        pack_preds(preds), 1e-7));
    }
    {
      fal::SceneConfig sc;
      sc.n_tokens = 6;
      const auto world = fal::make_world(sc, rng);
      std::vector<fal::Scene> scenes{fal::gen_scene(world, rng), fal::gen_scene(world, rng)};
      std::vector<const fal::Scene*> ptrs{&scenes[0], &scenes[1]};
      const auto p = fal::DetectorParams::random(4, 3, sc.d_f, 0.2, rng);
      const fal::Rng stream = rng.split(static_cast<std::uint64_t>(t));
      auto grad = fal::DetectorParams::zeros(4, 3, sc.d_f);
      fal::Rng r0 = stream;
      fal::supervised_batch(p, ptrs, {}, w, {}, r0, grad);
      checks[11].add(pack(grad), oracle::central_diff(
                                     [&](const Vec& x) {
                                       fal::Rng r = stream;
                                       auto sink = fal::DetectorParams::zeros(4, 3, sc.d_f);
                                       return fal::supervised_batch(unpack(p, x), ptrs, {}, w, {}, r, sink);
                                     },
                                     pack(p), 1e-7));
    }
  }
  bool ok = true;
  std::string detail;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : checks) {
    ok = ok && c.cases == 10 && c.worst < 1e-5;
    if (c.worst >= worst) {
      worst = c.worst;
      worst_name = c.name;
    }
  }
  return {ok, std::to_string(checks.size()) + " gradients x 10 inputs, worst relative error " + fmt(worst, 3) + " (" +
                  worst_name + ")"};
}

Outcome kron_identity() {
  fal::Rng rng(606);
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const fal::Tensor3 g({2, 3, 2}, oracle::random_vec(12, rng));
    const Matrix mo = oracle::random_matrix(2, 2, rng), mi = oracle::random_matrix(3, 3, rng),
                 mf = oracle::random_matrix(2, 2, rng);
    const Matrix i2 = Matrix::identity(2), i3 = Matrix::identity(3);
    const Matrix big = fal::matmul(fal::matmul(naive_kron(naive_kron(mo, i3), i2), naive_kron(naive_kron(i2, mi), i2)),
                                   naive_kron(naive_kron(i2, i3), mf));
    const Vec want = fal::matvec(big, fal::vec(g));
    const Vec got = fal::vec(fal::mc_transform(g, mo, mi, mf));
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  return {worst < 1e-10, "10 instances, max abs error " + fmt(worst, 3)};
}

Outcome protonet_dynamics() {
  const auto van = config("protonet_vanilla.ini");
  const auto nor = config("protonet_normalized.ini");
  bool ok = van.seeds == nor.seeds && van.seeds == std::vector<std::uint64_t>{1, 10, 100, 1000};
  Vec kv, kn, gv, gn;
  for (std::uint64_t seed : van.seeds) {
    auto cv = van.protonet, cn = nor.protonet;
    cv.seed = cn.seed = seed;
    const auto lv = fal::train_protonet(cv);
    const auto ln = fal::train_protonet(cn);
    kv.push_back(lv.records.back().kappa_wn);
    kn.push_back(ln.records.back().kappa_wn);
    gv.push_back(lv.records.back().frob_wn / lv.records.front().frob_wn);
    gn.push_back(ln.records.back().frob_wn / ln.records.front().frob_wn);
    ok = ok && kn.back() < kv.back() && std::abs(gn.back() - 1.0) <= 0.10 && gv.back() > 1.25;
  }
  return {ok, "final kappa normalized " + list(kn) + " vs vanilla " + list(kv) + "; frob ratio normalized " + list(gn) +
                  ", vanilla " + list(gv)};
}

Outcome mtdetr_ablation() {
  const auto base = config("mtdetr.ini");
  auto variant = [&](double lambda_u, std::optional<double> threshold) {
    Vec maps;
    for (std::uint64_t seed : base.seeds) {
      auto cfg = base.mtdetr;
      cfg.seed = seed;
      cfg.lambda_u = lambda_u;
      cfg.flags.confidence_threshold = threshold;
      maps.push_back(fal::run_mtdetr(cfg).final_map);
    }
    return maps;
  };
  const double lu = base.mtdetr.lambda_u;
  const Vec soft = variant(lu, std::nullopt);
  const Vec t07 = variant(lu, 0.7);
  const Vec t09 = variant(lu, 0.9);
  const Vec sup = variant(0.0, std::nullopt);
  auto mean = [](const Vec& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  bool order = mean(soft) >= mean(t07) && mean(t07) >= mean(t09);
  bool every_seed = base.seeds.size() == 3 && lu == 4.0 && base.mtdetr.labeled_fraction == 0.05;
  for (std::size_t i = 0; i < soft.size(); ++i) every_seed = every_seed && soft[i] > sup[i];
  return {order && every_seed, std::string("ordering ") + (order ? "holds" : "fails") + ": mean mAP soft " +
                                   fmt(mean(soft), 4) + ", t0.7 " + fmt(mean(t07), 4) + ", t0.9 " + fmt(mean(t09), 4) +
                                   "; per-seed soft " + list(soft) + " vs supervised " + list(sup) + " (" +
                                   (every_seed ? "above on every seed" : "not above on every seed") + ")"};
}

Outcome proseco_convergence() {
  const auto base = config("proseco.ini");
  bool ok = base.proseco.steps == 200;
  Vec ratio, box_half, box_one;
  for (std::uint64_t seed : base.seeds) {
    auto cfg = base.proseco;
    cfg.seed = seed;
    cfg.contrast.delta = 0.5;
    const auto a = fal::run_proseco(cfg);
    cfg.contrast.delta = 1.0;
    const auto b = fal::run_proseco(cfg);
    ratio.push_back(a.records.back().eval_loss / a.records.front().eval_loss);
    box_half.push_back(a.records.back().eval_box);
    box_one.push_back(b.records.back().eval_box);
    ok = ok && ratio.back() < 0.5 && box_half.back() <= box_one.back();
  }
  return {ok, "final/initial loss " + list(ratio) + "; final box loss delta=0.5 " + list(box_half, 8) + " vs delta=1 " +
                  list(box_one, 8)};
}

Outcome carbon() {
  const fal::CarbonInputs imagenet{2000.0, 300.0, {0.47, 0.34, 0.19}, {379.0, 633.0, 442.0}};
  fal::CarbonInputs coco = imagenet;
  coco.worker_hours = 85000.0;
  const double a = fal::carbon_estimate(imagenet);
  const double b = fal::carbon_estimate(coco) / 1000.0;
  const bool ok = std::abs(a - 286.4) / 286.4 <= 0.005 && std::abs(b - 12.17) / 12.17 <= 0.005;
  return {ok, "ImageNet " + fmt(a, 6) + " kg (" + fmt(fal::energy_kwh(imagenet), 6) + " kWh), COCO " + fmt(b, 5) +
                  " t (" + fmt(fal::energy_kwh(coco), 6) + " kWh)"};
}

Outcome determinism() {
  std::vector<fal::ExperimentConfig> cfgs;
  for (const char* name : {"prop44.ini", "protonet_vanilla.ini", "protonet_normalized.ini", "proseco.ini", "mtdetr.ini"})
    cfgs.push_back(config(name));
  for (const char* text : {"[run]\nexperiment = maml-linreg\n[maml-linreg]\nmode = colinear\nwarmup_iid = 1\n",
                           "[run]\nexperiment = carbon\n[carbon]\nhours = 2000\nwatts = 300\n"
                           "shares = 0.47, 0.34, 0.19\nintensities = 379, 633, 442\n"}) {
    std::istringstream in(text);
    cfgs.push_back(fal::parse_config(in));
  }
  std::size_t same = 0;
  std::string names;
  for (const auto& c : cfgs) {
    const auto seed = c.seeds.front();
    const bool eq = fal::to_csv(fal::run_seed(c, seed).table) == fal::to_csv(fal::run_seed(c, seed).table);
    same += eq ? 1 : 0;
    names += (names.empty() ? "" : ", ") + c.experiment + (eq ? "" : " (differs)");
  }
  return {same == cfgs.size(), std::to_string(same) + "/" + std::to_string(cfgs.size()) + " identical: " + names};
}

} // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"two-task construction closed forms", 1.0, two_task_construction},
      {"colinear MAML condition number monotone", 5.0, colinear_monotonicity},
      {"Hungarian matches brute force", 10.0, hungarian_oracle},
      {"LocSCE/LocNCE reduce to SCE/InfoNCE at delta=1", 0.0, loss_reductions},
      {"analytic gradients match finite differences", 0.0, gradient_oracle},
      {"meta-curvature Kronecker/vec identity", 0.0, kron_identity},
      {"normalized ProtoNet dynamics", 120.0, protonet_dynamics},
      {"MT-DETR pseudo-label ablation direction", 300.0, mtdetr_ablation},
      {"ProSeCo toy convergence", 120.0, proseco_convergence},
      {"carbon estimator", 1.0, carbon},
      {"determinism of CSV output", 0.0, determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = criteria[i].budget_s == 0.0 || secs < criteria[i].budget_s;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("%s %2zu  %s: %s [%.2f s%s]\n", pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str(), secs,
                in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
