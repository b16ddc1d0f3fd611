#include <cmath>

#include "doctest.h"
#include "falkit/errors.h"
#include "falkit/meta.h"
#include "falkit/spectral.h"
#include "oracles.h"

using fal::Matrix;
using fal::Vec;

namespace {

Matrix naive_kron(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q) k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return k;
}

} // namespace

TEST_SUITE("meta") {

TEST_CASE("episode sampling") {
  fal::TaskGenConfig cfg;
  cfg.d = 6;
  cfg.n_way = 4;
  cfg.k_shot = 2;
  cfg.q_queries = 3;
  fal::Rng rng(1);
  const auto ep = fal::sample_episode(cfg, rng);
  CHECK(ep.support.size() == 8);
  CHECK(ep.query.size() == 12);
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    CHECK(ep.support[i].label == i / 2);
    CHECK(ep.support[i].x.size() == 6);
  }
  std::vector<int> counts(4, 0);
  for (const auto& q : ep.query) ++counts[q.label];
  CHECK(counts == std::vector<int>{3, 3, 3, 3});

  fal::Rng again(1);
  const auto ep2 = fal::sample_episode(cfg, again);
  CHECK(ep2.support[3].x == ep.support[3].x);

  cfg.n_way = 0;
  CHECK_THROWS_AS(cfg.validate(), fal::InvalidInput);
  cfg.n_way = 2;
  cfg.noise_std = -1.0;
  CHECK_THROWS_AS(cfg.validate(), fal::InvalidInput);
}

TEST_CASE("random encoder entries have variance 1/d") {
  fal::Rng rng(2);
  const auto enc = fal::random_encoder(64, 50, rng);
  CHECK(enc.phi.rows() == 64);
  CHECK(enc.phi.cols() == 50);
  double ss = 0.0;
  for (double v : enc.phi.data()) ss += v * v;
  CHECK(ss / static_cast<double>(enc.phi.size()) == doctest::Approx(1.0 / 50.0).epsilon(0.1));
}

TEST_CASE("normalized prototypes are unit norm and noiseless episodes are solved") {
  fal::TaskGenConfig cfg;
  cfg.d = 8;
  cfg.n_way = 5;
  cfg.noise_std = 0.0;
  cfg.class_spread = 10.0;
  fal::Rng rng(3);
  fal::LinearEncoder id{Matrix::identity(8)};
  for (int t = 0; t < 10; ++t) {
    const auto ep = fal::sample_episode(cfg, rng);
    const Matrix p = fal::prototypes(ep.support, id, true);
    for (std::size_t c = 0; c < p.rows(); ++c) CHECK(fal::norm2(p.row(c)) == doctest::Approx(1.0).epsilon(1e-14));
    const auto r = fal::proto_loss(id.encode(ep.support), id.encode(ep.query), false);
    CHECK(r.accuracy == 1.0);
  }
}

TEST_CASE("episode gradient with respect to the encoder") {
  fal::TaskGenConfig cfg;
  cfg.d = 5;
  cfg.n_way = 3;
  cfg.k_shot = 2;
  cfg.q_queries = 2;
  fal::Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    const auto ep = fal::sample_episode(cfg, rng);
    const auto enc = fal::random_encoder(4, 5, rng);
    const bool norm = t % 2 == 0;
    const Matrix up = oracle::random_matrix(3, 4, rng);
    const Matrix* upstream = t % 3 == 0 ? &up : nullptr;
    const auto g = fal::episode_loss_grad(ep, enc, norm, upstream);
    auto f = [&](const Vec& x) {
      const fal::LinearEncoder e{oracle::unflatten(x, 4, 5)};
      double extra = 0.0;
      if (upstream) {
        const Matrix p = fal::prototypes(ep.support, e, norm);
        for (std::size_t i = 0; i < p.size(); ++i) extra += up.data()[i] * p.data()[i];
      }
      return fal::episode_loss_grad(ep, e, norm).value.loss + extra;
    };
    CHECK(oracle::grad_rel_error(oracle::flatten(g.d_phi), oracle::central_diff(f, oracle::flatten(enc.phi))) < 1e-5);
  }
}

TEST_CASE("proto variant names round-trip") {
  for (auto v : {fal::ProtoVariant::vanilla, fal::ProtoVariant::normalized, fal::ProtoVariant::normalized_entropy}) {
    CHECK(fal::parse_proto_variant(fal::to_string(v)) == v);
  }
  CHECK_THROWS_AS(fal::parse_proto_variant("fancy"), fal::InvalidInput);
}

TEST_CASE("protonet training is deterministic and logs the requested steps") {
  fal::ProtoTrainConfig cfg;
  cfg.task.d = 8;
  cfg.k = 4;
  cfg.episodes = 40;
  cfg.batch = 4;
  cfg.log_every = 3;
  cfg.variant = fal::ProtoVariant::normalized_entropy;
  cfg.lambda1 = 0.1;
  const auto a = fal::train_protonet(cfg);
  const auto b = fal::train_protonet(cfg);
  CHECK(a.encoder.phi == b.encoder.phi);
  std::vector<std::size_t> steps;
  for (const auto& r : a.records) steps.push_back(r.step);
  CHECK(steps == std::vector<std::size_t>{0, 3, 6, 9, 10});
  for (const auto& r : a.records) {
    CHECK(std::isfinite(r.loss));
    CHECK(r.h_sigma <= 0.0);
  }
  cfg.init_scale = 0.0;
  CHECK_THROWS_AS(cfg.validate(), fal::InvalidInput);
}

TEST_CASE("normalized training lowers the prototype condition number") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    fal::ProtoTrainConfig cfg;
    cfg.task.d = 16;
    cfg.task.class_spread = 5.0;
    cfg.k = 8;
    cfg.episodes = 200;
    cfg.lr = 0.2;
    cfg.init_scale = 0.1;
    cfg.variant = fal::ProtoVariant::normalized;
    cfg.log_every = 50;
    cfg.seed = seed;
    const auto log = fal::train_protonet(cfg);
    CHECK(log.records.back().kappa_wn < log.records.front().kappa_wn);
  }
}

TEST_CASE("history kappa limits") {
  fal::TaskGenConfig cfg;
  cfg.d = 6;
  fal::Rng rng(5);
  const auto enc = fal::random_encoder(6, 6, rng);
  std::vector<fal::Episode> eps{fal::sample_episode(cfg, rng), fal::sample_episode(cfg, rng)};
  CHECK(fal::history_kappa(eps, enc, true) >= 1.0);
  CHECK_THROWS_AS(fal::history_kappa({}, enc, true), fal::InvalidInput);
}

TEST_CASE("MAML linear-regression recursion") {
  fal::MamlSimConfig cfg;
  cfg.iterations = 30;
  fal::Rng rng(6);
  const auto r = fal::maml_linreg_sim(cfg, rng);
  CHECK(r.predictors.size() == 31);
  CHECK(r.thetas.size() == 30);
  CHECK(r.predictors[0] == Vec(cfg.d, 0.0));
  const double c = cfg.beta * (1 - cfg.alpha) * (1 - cfg.alpha);
  for (std::size_t t = 1; t <= 30; ++t) {
    for (std::size_t i = 0; i < cfg.d; ++i) {
      const double want = r.predictors[t - 1][i] - c * (r.predictors[t - 1][i] - r.thetas[t - 1][i]);
      CHECK(r.predictors[t][i] == doctest::Approx(want).epsilon(1e-15));
    }
  }
  CHECK(r.steps.front().degenerate);
  for (std::size_t i = 1; i < r.steps.size(); ++i) CHECK(std::isfinite(r.steps[i].kappa));

  cfg.beta = 10.0;
  CHECK_THROWS_AS(cfg.validate(), fal::InvalidInput);
}

TEST_CASE("colinear tasks never decrease the condition number") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    fal::MamlSimConfig cfg;
    cfg.mode = fal::TaskMode::colinear;
    fal::Rng rng(seed);
    const auto r = fal::maml_linreg_sim(cfg, rng);
    CHECK(fal::kappa_decreases(r) == 0);
    for (std::size_t i = 1; i < r.steps.size(); ++i) CHECK(r.steps[i].kappa >= r.steps[i - 1].kappa - 1e-9);
  }
}

TEST_CASE("two-task construction") {
  fal::Rng rng(7);
  const auto r = fal::prop44_example(0.02, 5, rng);
  CHECK(std::abs(r.kappa_star - 50.0) < 1e-10);
  CHECK(std::abs(r.kappa_hat - r.kappa_hat_closed_form) < 1e-12);
  CHECK(r.samples.size() == 128);
  for (const auto& s : r.samples) {
    const double ys = r.w_star(s.task, 0) * s.x[0] + r.w_star(s.task, 1) * s.x[1];
    const double yh = r.w_hat(s.task, 0) * s.x[1] + r.w_hat(s.task, 1) * s.x[2];
    CHECK(std::abs(ys - s.y) < 1e-12);
    CHECK(std::abs(yh - s.y) < 1e-12);
  }
  CHECK(r.max_residual_star < 1e-12);
  CHECK(r.max_residual_hat < 1e-12);
  CHECK_THROWS_AS(fal::prop44_example(0.0, 5, rng), fal::InvalidInput);
  CHECK_THROWS_AS(fal::prop44_example(0.1, 2, rng), fal::InvalidInput);

  double prev = INFINITY;
  for (double e : {0.1, 0.01, 0.001, 0.0001}) {
    const double k = fal::prop44_kappa_hat_closed_form(e);
    CHECK(k > 1.0);
    CHECK(k < prev);
    prev = k;
  }
}

TEST_CASE("infinite mixture prototypes") {
  fal::LinearEncoder id{Matrix::identity(2)};
  // Class 0 is bimodal with its mean far from both modes.
  const std::vector<fal::LabeledInput> support{
      {{-4.0, 3.0}, 0}, {{4.0, 3.0}, 0}, {{0.0, 0.9}, 1}, {{0.0, 1.1}, 1}};
  const std::vector<Vec> query{{3.8, 1.0}, {0.0, 1.05}};
  const auto wide = fal::imp_infer(support, query, 100.0, 1.0, id);
  CHECK(wide.clusters.size() == 2);
  CHECK(wide.predictions == std::vector<std::size_t>{1, 1});
  const auto tight = fal::imp_infer(support, query, 1.0, 1.0, id);
  CHECK(tight.clusters.size() > 2);
  CHECK(tight.predictions == std::vector<std::size_t>{0, 1});
  for (const auto& p : tight.class_probs) {
    double s = 0.0;
    for (double x : p) s += x;
    CHECK(s == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(fal::imp_infer({}, query, 1.0, 1.0, id), fal::InvalidEpisode);
}

TEST_CASE("meta-curvature transform") {
  fal::Rng rng(8);
  const fal::Tensor3 g({2, 3, 2}, oracle::random_vec(12, rng));
  const auto doubled = fal::mc_transform(g, Matrix::identity(2) * 2.0, Matrix::identity(3), Matrix::identity(2));
  for (std::size_t i = 0; i < 12; ++i) CHECK(doubled.data()[i] == 2.0 * g.data()[i]);
  for (int t = 0; t < 10; ++t) {
    const fal::Tensor3 x({2, 3, 2}, oracle::random_vec(12, rng));
    const Matrix mo = oracle::random_matrix(2, 2, rng), mi = oracle::random_matrix(3, 3, rng),
                 mf = oracle::random_matrix(2, 2, rng);
    const Matrix m = naive_kron(naive_kron(mo, mi), mf);
    const Vec want = fal::matvec(m, fal::vec(x));
    const Vec got = fal::vec(fal::mc_transform(x, mo, mi, mf));
    for (std::size_t i = 0; i < 12; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-10);
  }
  CHECK_THROWS_AS(fal::mc_transform(g, Matrix::identity(3), Matrix::identity(3), Matrix::identity(2)),
                  fal::ShapeError);
}

} // TEST_SUITE
