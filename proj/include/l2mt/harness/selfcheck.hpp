// Copyright 2026 The l2mt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include "l2mt/linalg.hpp"
#include "l2mt/lgnn.hpp"
#include "l2mt/meta_estimator.hpp"
#include "l2mt/mtl_core.hpp"
#include "l2mt/omega_solver.hpp"
#include "l2mt/rng.hpp"
#include "l2mt/types.hpp"

// Quick oracle and invariant battery behind the `selfcheck` CLI subcommand.
// The oracles here (simplex projection, projected gradient, finite
// differences, scalar-loop forward pass) are written independently of the
// library code paths they cross-check.
namespace l2mt::harness::selfcheck_detail {

inline Vector project_to_simplex(Vector v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<double>());
  double cumulative = 0.0, theta = 0.0;
  int support = 0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    double candidate = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - candidate > 0.0) {
      support = static_cast<int>(j + 1);
      theta = candidate;
    }
  }
  (void)support;
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::max(v[i] - theta, 0.0);
  return v;
}

inline Vector projected_gradient_qp(const Vector& kappa, double rho) {
  const Eigen::Index n = kappa.size();
  Vector mu = Vector::Constant(n, 1.0 / static_cast<double>(n));
  double step = 1.0 / (2.0 * rho);
  for (int it = 0; it < 200000; ++it) {
    Vector next = project_to_simplex(mu - step * (2.0 * rho * mu + kappa));
    if ((next - mu).lpNorm<Eigen::Infinity>() <= 1e-14) {
      mu = next;
      break;
    }
    mu = next;
  }
  return mu;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

inline LabeledDataset random_dataset(Rng& rng, Eigen::Index d, Eigen::Index n) {
  LabeledDataset ds;
  ds.features = random_matrix(rng, d, n);
  ds.labels.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) ds.labels[j] = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return ds;
}

inline MultitaskProblem random_problem(Rng& rng, std::size_t m, Eigen::Index d, Eigen::Index n) {
  MultitaskProblem p;
  p.id = "selfcheck";
  for (std::size_t t = 0; t < m; ++t)
    p.tasks.push_back(
        Task{random_dataset(rng, d, n), random_dataset(rng, d, n), random_dataset(rng, d, n)});
  return p;
}

}  // namespace l2mt::harness::selfcheck_detail

namespace l2mt::harness {

/// Runs the battery; prints one line per check; returns true when all pass.
inline bool selfcheck(std::ostream& out = std::cout) {
  using namespace selfcheck_detail;
  bool all_ok = true;
  auto check = [&](const std::string& name, bool ok) {
    out << (ok ? "[ok]   " : "[FAIL] ") << name << '\n';
    all_ok = all_ok && ok;
  };

  Rng rng(20260810);

  {  // Closed-form Schatten update: penalty + regularizer sum collapses to
     // lambda_r * ||W||_{S(r_hat)}^{r_hat}.
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      double r = std::vector<double>{0.5, 1.0, 2.0}[static_cast<std::size_t>(trial) % 3];
      double l1 = rng.uniform(0.2, 3.0), l2 = rng.uniform(0.2, 3.0);
      Matrix w = random_matrix(rng, 8, 4);
      TaskCovariance omega = mtl_core::schatten_omega_update(w, l1, l2, r);
      double lhs = 0.5 * l1 *
                       (w * linalg::psd_pinv(omega.omega)).cwiseProduct(w).sum() +
                   l2 * linalg::psd_power(omega.omega, r).trace();
      double r_hat = 2.0 * r / (r + 1.0);
      double lambda_r = (1.0 + 1.0 / r) *
                        std::pow(std::pow(l1, r) * l2 * r / std::pow(2.0, r), 1.0 / (r + 1.0));
      double rhs = lambda_r * std::pow(linalg::schatten_norm(w, r_hat), r_hat);
      ok = std::abs(lhs - rhs) <= 1e-8 * std::max(1.0, std::abs(rhs));
    }
    check("schatten closed-form identity", ok);
  }

  {  // Squared-Schatten update: unit tr(Omega^r) and the norm identity.
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      double r = std::vector<double>{0.5, 1.0, 2.0}[static_cast<std::size_t>(trial) % 3];
      Matrix w = random_matrix(rng, 7, 5);
      TaskCovariance omega = mtl_core::squared_schatten_omega_update(w, r);
      double tr_r = linalg::psd_power(omega.omega, r).trace();
      double coupled = (w * linalg::psd_pinv(omega.omega)).cwiseProduct(w).sum();
      double r_hat = 2.0 * r / (r + 1.0);
      double norm_sq = std::pow(linalg::schatten_norm(w, r_hat), 2.0);
      ok = std::abs(tr_r - 1.0) <= 1e-8 &&
           std::abs(coupled - norm_sq) <= 1e-8 * std::max(1.0, norm_sq);
    }
    check("squared-schatten update identities", ok);
  }

  {  // Simplex QP against the projected-gradient oracle, plus KKT residuals.
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(30));
      Vector kappa(n);
      for (Eigen::Index i = 0; i < n; ++i) kappa[i] = rng.normal();
      double rho = rng.uniform(1e-3, 10.0);
      omega_solver::QpSolution sol = omega_solver::simplex_qp({kappa, rho});
      Vector oracle = projected_gradient_qp(kappa, rho);
      ok = (sol.mu - oracle).lpNorm<Eigen::Infinity>() <= 1e-6 &&
           std::abs(sol.mu.sum() - 1.0) <= 1e-10 &&
           sol.stats.kappa_reads <= 2 * static_cast<std::size_t>(n);
      for (Eigen::Index i = 0; i < n && ok; ++i) {
        double reconstructed = std::max(0.0, -(kappa[i] + sol.tau) / (2.0 * rho));
        ok = std::abs(sol.mu[i] - reconstructed) <= 1e-8;
      }
    }
    check("simplex qp vs projected-gradient oracle", ok);
  }

  {  // Spectral solve across the three rho regimes.
    Matrix phi = Matrix::Zero(3, 3);
    phi.diagonal() << 3.0, 2.0, 1.0;
    TaskCovariance zero_rho = omega_solver::solve_omega({phi, 0.0});
    TaskCovariance neg_rho = omega_solver::solve_omega({phi, -1.0});
    Matrix expected = Matrix::Zero(3, 3);
    expected(2, 2) = 1.0;
    bool ok = (zero_rho.omega - expected).cwiseAbs().maxCoeff() <= 1e-10 &&
              (neg_rho.omega - expected).cwiseAbs().maxCoeff() <= 1e-10;
    TaskCovariance uniform = omega_solver::solve_omega({Matrix::Identity(4, 4), 0.0});
    ok = ok && (uniform.omega - Matrix::Identity(4, 4) / 4.0).cwiseAbs().maxCoeff() <= 1e-10;
    check("spectral omega regimes", ok);
  }

  {  // Meta gradient vs central finite differences away from kinks.
    bool ok = true;
    int accepted = 0;
    for (int attempt = 0; attempt < 200 && accepted < 10 && ok; ++attempt) {
      MultitaskProblem problem = random_problem(rng, 3, 4, 8);
      meta_estimator::BoundProblem bound = meta_estimator::bind_problem(problem, 2);
      Matrix a = random_matrix(rng, 3, 3);
      Matrix omega = a * a.transpose();
      omega /= omega.trace();
      meta_estimator::TrainingTuple tuple{&bound, omega, rng.uniform(0.3, 1.5)};

      meta_estimator::TrainConfig cfg;
      cfg.d_hat = 3;
      cfg.layers = 2;
      Rng init_rng(rng.next_u64());
      meta_estimator::MetaParams params = meta_estimator::init_meta_params(4, cfg, init_rng);

      std::vector<lgnn::ForwardCache> caches(3);
      double min_pre = std::numeric_limits<double>::infinity();
      Matrix e(3, 3);
      for (Eigen::Index t = 0; t < 3; ++t) {
        e.col(t) = lgnn::lgnn_forward(bound.train[static_cast<std::size_t>(t)].get(),
                                      bound.graphs[static_cast<std::size_t>(t)], params.lgnn,
                                      &caches[static_cast<std::size_t>(t)]);
        for (const Matrix& pre : caches[static_cast<std::size_t>(t)].pre)
          min_pre = std::min(min_pre, pre.cwiseAbs().minCoeff());
      }
      double f = meta_estimator::estimation_fn(e, omega, params.est);
      double target = meta_estimator::link(tuple.o, params.est.gamma);
      if (min_pre < 1e-4 || std::abs(f - target) < 1e-4) continue;  // too close to a kink
      ++accepted;

      double lambda = 0.05;
      Vector analytic =
          meta_estimator::pack_grad(meta_estimator::meta_grad(tuple, params, lambda), params);
      Vector x = meta_estimator::pack(params);
      const double h = 1e-5;
      for (Eigen::Index i = 0; i < x.size() && ok; ++i) {
        meta_estimator::MetaParams plus = params, minus = params;
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        meta_estimator::unpack(xp, plus);
        meta_estimator::unpack(xm, minus);
        std::vector<meta_estimator::TrainingTuple> single{tuple};
        double fd = (meta_estimator::meta_loss(single, plus, lambda) -
                     meta_estimator::meta_loss(single, minus, lambda)) /
                    (2.0 * h);
        double rel = std::abs(analytic[i] - fd) / std::max({1.0, std::abs(analytic[i]),
                                                            std::abs(fd)});
        ok = rel < 1e-5;
      }
    }
    check("meta gradient vs finite differences", ok && accepted == 10);
  }

  {  // Permutation invariance of the forward pass.
    bool ok = true;
    for (int trial = 0; trial < 10 && ok; ++trial) {
      LabeledDataset ds = random_dataset(rng, 5, 12);
      lgnn::GraphAdjacency graph = lgnn::build_graph(ds, 3);
      lgnn::LgnnParams params = lgnn::zero_params(5, 4, 2);
      Rng fill(rng.next_u64());
      for (Eigen::Index i = 0; i < params.l1.size(); ++i) {
        params.l1.data()[i] = fill.normal(0.0, 0.3);
        params.l_shared.data()[i] = fill.normal(0.0, 0.3);
      }
      Vector base = lgnn::lgnn_forward(ds, graph, params);

      std::vector<Eigen::Index> perm(12);
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      fill.shuffle(perm.begin(), perm.end());
      LabeledDataset permuted;
      permuted.features.resize(5, 12);
      permuted.labels.resize(12);
      lgnn::GraphAdjacency pg;
      pg.entries.resize(12, 12);
      for (Eigen::Index i = 0; i < 12; ++i) {
        permuted.features.col(i) = ds.features.col(perm[static_cast<std::size_t>(i)]);
        permuted.labels[i] = ds.labels[perm[static_cast<std::size_t>(i)]];
        for (Eigen::Index j = 0; j < 12; ++j)
          pg.entries(i, j) = graph.entries(perm[static_cast<std::size_t>(i)],
                                           perm[static_cast<std::size_t>(j)]);
      }
      Vector permuted_e = lgnn::lgnn_forward(permuted, pg, params);
      ok = (base - permuted_e).lpNorm<Eigen::Infinity>() <= 1e-10;
    }
    check("lgnn permutation invariance", ok);
  }

  {  // Graph construction on the collinear three-point configuration.
    LabeledDataset ds;
    ds.features.resize(1, 3);
    ds.features << 0.0, 1.0, 10.0;
    ds.labels.resize(3);
    ds.labels << 1.0, -1.0, 1.0;
    lgnn::GraphAdjacency g = lgnn::build_graph(ds, 1);
    bool ok = g.entries(0, 1) == -1.0 && g.entries(0, 2) == 1.0 && g.entries(1, 2) == -1.0 &&
              g.entries(0, 0) == 1.0;
    check("label graph three-point case", ok);
  }

  {  // Block separability: identity covariance equals per-task solves.
    MultitaskProblem problem = random_problem(rng, 3, 4, 12);
    DatasetRefs train = problem.train_splits();
    TaskCovariance identity{Matrix::Identity(3, 3) / 3.0};
    double lambda1 = 0.4;
    mtl_core::GivenOmegaResult joint =
        mtl_core::solve_given_omega(train, identity, lambda1, mtl_core::LossKind::Logistic);
    double separate = 0.0;
    TaskCovariance unit{Matrix::Identity(1, 1)};
    for (std::size_t t = 0; t < 3; ++t) {
      DatasetRefs single{std::cref(problem.tasks[t].train)};
      separate += mtl_core::solve_given_omega(single, unit, lambda1 * 3.0,
                                              mtl_core::LossKind::Logistic)
                      .info.objective;
    }
    check("identity covariance separability",
          std::abs(joint.info.objective - separate) <= 1e-6 * std::max(1.0, separate));
  }

  {  // Link function range and estimation-function permutation invariance.
    bool ok = true;
    for (int trial = 0; trial < 50 && ok; ++trial) {
      Eigen::Vector2d gamma(rng.normal(), rng.normal());
      double v = meta_estimator::link(rng.uniform(0.0, 10.0), gamma);
      ok = v > -1.0 && v < 1.0;
    }
    Matrix e = random_matrix(rng, 4, 5);
    Matrix a = random_matrix(rng, 5, 5);
    Matrix omega = a * a.transpose();
    omega /= omega.trace();
    meta_estimator::EstimatorParams params;
    params.alpha << 0.7, -0.4, 0.9, 0.2;
    double f = meta_estimator::estimation_fn(e, omega, params);
    std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
    Matrix ep(4, 5), op(5, 5);
    for (Eigen::Index i = 0; i < 5; ++i) {
      ep.col(i) = e.col(perm[static_cast<std::size_t>(i)]);
      for (Eigen::Index j = 0; j < 5; ++j)
        op(i, j) = omega(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    double fp = meta_estimator::estimation_fn(ep, op, params);
    ok = ok && std::abs(f - fp) <= 1e-10;
    check("link range and estimator permutation invariance", ok);
  }

  return all_ok;
}

}  // namespace l2mt::harness
