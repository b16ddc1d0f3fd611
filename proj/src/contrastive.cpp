#include <cmath>
#include <string>

#include "falkit/errors.h"
#include "falkit/losses.h"

namespace fal {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: length mismatch");
  }
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!std::isfinite(na) || !std::isfinite(nb)) {
    throw NumericalError("cosine_similarity: embedding norm overflows");
  }
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw InvalidInput("cosine_similarity: zero-norm embedding");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += (a[i] / na) * (b[i] / nb);
  }
  return s;
}

namespace {

void check_pairs(const std::vector<Vec>& z, const std::vector<Vec>& z_prime, double tau) {
  if (z.empty() || z.size() != z_prime.size()) {
    throw ShapeError("info_nce: batches must be non-empty and of equal size");
  }
  if (!(tau > 0.0)) {
    throw InvalidInput("info_nce: temperature must be positive");
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i].size() != z.front().size() || z_prime[i].size() != z.front().size()) {
      throw ShapeError("info_nce: embedding dimension mismatch");
    }
  }
}

} // namespace

InfoNceGrad info_nce_grad(const std::vector<Vec>& z, const std::vector<Vec>& z_prime, double tau) {
  check_pairs(z, z_prime, tau);
  const std::size_t n = z.size();
  const std::size_t d = z.front().size();
  const double inv_n = 1.0 / static_cast<double>(n);
  InfoNceGrad g{0.0, std::vector<Vec>(n, Vec(d, 0.0)), std::vector<Vec>(n, Vec(d, 0.0))};
  Vec s(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = dot(z[i], z_prime[j]);
    }
    const Vec lp = log_softmax(s, tau);
    g.value -= lp[i] * inv_n;
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = inv_n * (std::exp(lp[j]) - (i == j ? 1.0 : 0.0)) / tau;
      for (std::size_t k = 0; k < d; ++k) {
        g.d_z[i][k] += gij * z_prime[j][k];
        g.d_z_prime[j][k] += gij * z[i][k];
      }
    }
  }
  return g;
}

double info_nce(const std::vector<Vec>& z, const std::vector<Vec>& z_prime, double tau) {
  return info_nce_grad(z, z_prime, tau).value;
}

namespace {

struct Flat {
  std::vector<Vec> u;             // unit teacher embeddings
  std::vector<Vec> v;             // unit student embeddings
  Vec u_norm;
  Vec v_norm;
  std::vector<std::size_t> t_img; // image of each teacher proposal
  std::vector<std::size_t> t_pos; // index within its image
  std::vector<std::size_t> pi;    // teacher flat index -> matched student flat index
};

Flat flatten(const ProposalBatch& teacher,
             const ProposalBatch& student,
             const std::vector<Assignment>& assignments,
             const char* who) {
  if (teacher.size() != student.size() || teacher.size() != assignments.size()) {
    throw ShapeError(std::string(who) + ": batch sizes disagree");
  }
  Flat f;
  std::vector<std::size_t> s_offset(student.size(), 0);
  std::size_t s_total = 0;
  for (std::size_t n = 0; n < student.size(); ++n) {
    s_offset[n] = s_total;
    s_total += student[n].size();
  }
  std::size_t dim = 0;
  bool have_dim = false;
  auto unit = [&](const Vec& z, std::vector<Vec>& out, Vec& norms) {
    if (!have_dim) {
      dim = z.size();
      have_dim = true;
    }
    if (z.size() != dim || dim == 0) {
      throw ShapeError(std::string(who) + ": embedding dimension mismatch");
    }
    const double nz = norm2(z);
    if (!std::isfinite(nz)) {
      throw NumericalError(std::string(who) + ": embedding norm overflows");
    }
    if (!(nz > 0.0)) {
      throw InvalidInput(std::string(who) + ": zero-norm embedding");
    }
    Vec x(z);
    for (double& e : x) {
      e /= nz;
    }
    out.push_back(std::move(x));
    norms.push_back(nz);
  };
  for (std::size_t n = 0; n < teacher.size(); ++n) {
    const auto& sigma = assignments[n].sigma;
    if (sigma.size() != teacher[n].size()) {
      throw ShapeError(std::string(who) + ": assignment does not cover the teacher proposals");
    }
    std::vector<char> used(student[n].size(), 0);
    for (std::size_t m = 0; m < teacher[n].size(); ++m) {
      if (sigma[m] >= student[n].size() || used[sigma[m]]) {
        throw InvalidInput(std::string(who) + ": assignment is not injective");
      }
      used[sigma[m]] = 1;
      unit(teacher[n][m].z, f.u, f.u_norm);
      f.t_img.push_back(n);
      f.t_pos.push_back(m);
      f.pi.push_back(s_offset[n] + sigma[m]);
    }
  }
  for (std::size_t n = 0; n < student.size(); ++n) {
    for (const auto& p : student[n]) {
      unit(p.z, f.v, f.v_norm);
    }
  }
  if (f.u.size() < 2) {
    throw InvalidInput(std::string(who) + ": need at least two proposals in the batch");
  }
  return f;
}

void accumulate_unit_grad(Vec& dx, const Vec& unit, double norm, const Vec& du) {
  const double proj = dot(unit, du);
  for (std::size_t k = 0; k < du.size(); ++k) {
    dx[k] = (du[k] - unit[k] * proj) / norm;
  }
}

// Shared core of LocSCE (with teacher relations) and LocNCE (lambda = 1).
ContrastGrad loc_contrast(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<Assignment>& assignments,
                          const ContrastConfig& cfg,
                          double lambda,
                          bool want_grad,
                          const char* who) {
  cfg.validate();
  const Flat f = flatten(teacher, student, assignments, who);
  const std::size_t M = f.u.size();
  const std::size_t S = f.v.size();
  const std::size_t d = f.u.front().size();
  const double inv_m = 1.0 / static_cast<double>(M);
  const bool relations = lambda < 1.0;

  ContrastGrad out;
  out.value = 0.0;
  std::vector<Vec> du(M, Vec(d, 0.0));
  std::vector<Vec> dv(S, Vec(d, 0.0));

  Vec s(S);
  Vec r(M);
  Vec w(M);
  Vec logp_pi(M);
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < S; ++b) {
      s[b] = dot(f.u[a], f.v[b]);
    }
    const Vec lp = log_softmax(s, cfg.tau);

    // Teacher relations p'(a, .) over every other teacher proposal.
    Vec pp(M, 0.0);
    if (relations) {
      Vec others;
      others.reserve(M - 1);
      for (std::size_t c = 0; c < M; ++c) {
        r[c] = dot(f.u[a], f.u[c]);
        if (c != a) {
          others.push_back(r[c]);
        }
      }
      const Vec po = softmax(others, cfg.tau_t);
      for (std::size_t c = 0, k = 0; c < M; ++c) {
        if (c != a) {
          pp[c] = po[k++];
        }
      }
    }

    double w_sum = 0.0;
    for (std::size_t c = 0; c < M; ++c) {
      double hard = 0.0;
      if (f.t_img[c] == f.t_img[a]) {
        const auto& img = teacher[f.t_img[a]];
        if (iou(img[f.t_pos[a]].b, img[f.t_pos[c]].b) >= cfg.delta) {
          hard = 1.0;
        }
      }
      w[c] = lambda * hard + (1.0 - lambda) * pp[c];
      logp_pi[c] = lp[f.pi[c]];
      out.value -= inv_m * w[c] * logp_pi[c];
      w_sum += w[c];
    }
    if (!want_grad) {
      continue;
    }

    // Through p'': dL/ds_ab = (W_a p''_ab - t_ab) / (M tau).
    Vec gs(S, 0.0);
    for (std::size_t b = 0; b < S; ++b) {
      gs[b] = w_sum * std::exp(lp[b]);
    }
    for (std::size_t c = 0; c < M; ++c) {
      gs[f.pi[c]] -= w[c];
    }
    for (std::size_t b = 0; b < S; ++b) {
      const double k = gs[b] * inv_m / cfg.tau;
      if (k == 0.0) {
        continue;
      }
      for (std::size_t e = 0; e < d; ++e) {
        du[a][e] += k * f.v[b][e];
        dv[b][e] += k * f.u[a][e];
      }
    }

    // Through p': h_c = dL/dp'_ac.
    if (relations) {
      double mean_h = 0.0;
      Vec h(M, 0.0);
      for (std::size_t c = 0; c < M; ++c) {
        if (c != a) {
          h[c] = -inv_m * (1.0 - lambda) * logp_pi[c];
          mean_h += pp[c] * h[c];
        }
      }
      for (std::size_t c = 0; c < M; ++c) {
        if (c == a) {
          continue;
        }
        const double k = pp[c] * (h[c] - mean_h) / cfg.tau_t;
        for (std::size_t e = 0; e < d; ++e) {
          du[a][e] += k * f.u[c][e];
          du[c][e] += k * f.u[a][e];
        }
      }
    }
  }

  if (want_grad) {
    out.d_teacher.resize(teacher.size());
    out.d_student.resize(student.size());
    std::size_t a = 0;
    for (std::size_t n = 0; n < teacher.size(); ++n) {
      for (std::size_t m = 0; m < teacher[n].size(); ++m, ++a) {
        Vec dx(d);
        accumulate_unit_grad(dx, f.u[a], f.u_norm[a], du[a]);
        out.d_teacher[n].push_back(std::move(dx));
      }
    }
    std::size_t b = 0;
    for (std::size_t n = 0; n < student.size(); ++n) {
      for (std::size_t l = 0; l < student[n].size(); ++l, ++b) {
        Vec dx(d);
        accumulate_unit_grad(dx, f.v[b], f.v_norm[b], dv[b]);
        out.d_student[n].push_back(std::move(dx));
      }
    }
  }
  return out;
}

} // namespace

double loc_sce(const ProposalBatch& teacher,
               const ProposalBatch& student,
               const std::vector<Assignment>& assignments,
               const ContrastConfig& cfg) {
  return loc_contrast(teacher, student, assignments, cfg, cfg.lambda_sce, false, "loc_sce").value;
}

ContrastGrad loc_sce_grad(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<Assignment>& assignments,
                          const ContrastConfig& cfg) {
  return loc_contrast(teacher, student, assignments, cfg, cfg.lambda_sce, true, "loc_sce");
}

double loc_nce(const ProposalBatch& teacher,
               const ProposalBatch& student,
               const std::vector<Assignment>& assignments,
               const ContrastConfig& cfg) {
  return loc_contrast(teacher, student, assignments, cfg, 1.0, false, "loc_nce").value;
}

ContrastGrad loc_nce_grad(const ProposalBatch& teacher,
                          const ProposalBatch& student,
                          const std::vector<Assignment>& assignments,
                          const ContrastConfig& cfg) {
  return loc_contrast(teacher, student, assignments, cfg, 1.0, true, "loc_nce");
}

double sce(const ProposalBatch& teacher,
           const ProposalBatch& student,
           const std::vector<Assignment>& assignments,
           const ContrastConfig& cfg) {
  cfg.validate();
  const Flat f = flatten(teacher, student, assignments, "sce");
  const std::size_t M = f.u.size();
  const std::size_t S = f.v.size();
  double loss = 0.0;
  for (std::size_t a = 0; a < M; ++a) {
    double denom_s = 0.0;
    for (std::size_t b = 0; b < S; ++b) {
      denom_s += std::exp(dot(f.u[a], f.v[b]) / cfg.tau);
    }
    double denom_t = 0.0;
    for (std::size_t c = 0; c < M; ++c) {
      if (c != a) {
        denom_t += std::exp(dot(f.u[a], f.u[c]) / cfg.tau_t);
      }
    }
    for (std::size_t c = 0; c < M; ++c) {
      const double p_rel = c == a ? 0.0 : std::exp(dot(f.u[a], f.u[c]) / cfg.tau_t) / denom_t;
      const double target = cfg.lambda_sce * (c == a ? 1.0 : 0.0) + (1.0 - cfg.lambda_sce) * p_rel;
      const double p_st = std::exp(dot(f.u[a], f.v[f.pi[c]]) / cfg.tau) / denom_s;
      loss -= target * std::log(p_st);
    }
  }
  return loss / static_cast<double>(M);
}

} // namespace fal
