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
#include <numeric>
#include <vector>

#include "l2mt/linalg.hpp"
#include "l2mt/meta_estimator.hpp"
#include "l2mt/types.hpp"

// Test-time recovery of the task covariance: minimize
//
//   rho tr(Omega^2) + tr(Phi Omega)   s.t.  Omega PSD, tr(Omega) = 1
//
// which reduces, on the eigenbasis of Phi, to a simplex-constrained QP over
// the eigenvalues when rho > 0 and to extreme points of the smallest-
// eigenvalue eigenspace otherwise.
namespace l2mt::omega_solver {

struct SpectralProblem {
  Matrix phi;  // symmetric
  double rho = 0.0;
};

struct SimplexQp {
  Vector kappa;  // eigenvalues, expected descending; sorted internally if not
  double rho = 0.0;
};

struct QpScanStats {
  std::size_t kappa_reads = 0;  // element reads by the dual region scan
  std::size_t regions_evaluated = 0;
};

struct QpSolution {
  Vector mu;  // aligned with the input kappa order
  double tau = 0.0;
  QpScanStats stats;
};

/// Regime boundary for rho: values within this of zero use the convex-hull
/// selection instead of the QP.
inline constexpr double kRhoTol = 1e-12;

/// Eigenvalues within 1e-8 * max(1, |kappa_min|) of the smallest count toward
/// its multiplicity.
inline constexpr double kMultiplicityTol = 1e-8;

namespace detail {

struct Kahan {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    double y = x - carry;
    double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

}  // namespace detail

/// Minimizes rho ||mu||^2 + mu.kappa over the probability simplex via the
/// dual min_tau 4 rho tau + sum_{tau <= -kappa_i} (tau + kappa_i)^2. The dual
/// objective is piecewise quadratic over the regions cut by {-kappa_i}; each
/// region's coefficients come from an incremental downdate, so the scan reads
/// each kappa_i at most twice (once for the initial sums, once while
/// scanning). Zero-width regions from duplicate kappa values are skipped.
/// Primal recovery: mu_i = max(0, -(kappa_i + tau)/(2 rho)).
inline QpSolution simplex_qp(const SimplexQp& qp) {
  if (!(qp.rho > 0.0)) throw ValidationError("simplex QP requires rho > 0");
  const Eigen::Index n = qp.kappa.size();
  if (n < 1) throw ValidationError("simplex QP requires at least one eigenvalue");

  // Sort descending if needed, remembering the permutation.
  bool sorted = true;
  for (Eigen::Index i = 0; i + 1 < n; ++i)
    if (qp.kappa[i] < qp.kappa[i + 1]) {
      sorted = false;
      break;
    }
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Vector kappa = qp.kappa;
  if (!sorted) {
    std::sort(perm.begin(), perm.end(),
              [&](Eigen::Index a, Eigen::Index b) { return qp.kappa[a] > qp.kappa[b]; });
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = qp.kappa[perm[static_cast<std::size_t>(i)]];
  }

  QpSolution out;
  auto read = [&](Eigen::Index i) {
    ++out.stats.kappa_reads;
    return kappa[i];
  };

  // Coefficients of the dual over (-inf, -kappa_1]: c2 t^2 + c1 t + c0 with
  // c2 = n, c1 = 2(sum kappa + 2 rho), c0 = sum kappa^2.
  detail::Kahan c0, c1;
  for (Eigen::Index i = 0; i < n; ++i) {
    double kv = read(i);
    c0.add(kv * kv);
    c1.add(2.0 * kv);
  }
  c1.add(4.0 * qp.rho);
  double c2 = static_cast<double>(n);

  double prev = read(0);
  double tau = std::min(-prev, -c1.sum / (2.0 * c2));
  double best = c0.sum + c1.sum * tau + c2 * tau * tau;
  ++out.stats.regions_evaluated;

  for (Eigen::Index i = 1; i < n; ++i) {
    double cur = read(i);
    // Move to region (-kappa_{i-1}, -kappa_i]: element i-1 leaves the active set.
    c0.add(-prev * prev);
    c1.add(-2.0 * prev);
    c2 -= 1.0;
    if (cur != prev) {
      double t0 = std::min(-cur, std::max(-prev, -c1.sum / (2.0 * c2)));
      double v0 = c0.sum + c1.sum * t0 + c2 * t0 * t0;
      ++out.stats.regions_evaluated;
      if (v0 < best) {
        best = v0;
        tau = t0;
      }
    }
    prev = cur;
  }

  out.tau = tau;
  out.mu.resize(n);
  double inv = 1.0 / (2.0 * qp.rho);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index src = perm[static_cast<std::size_t>(i)];
    out.mu[src] = std::max(0.0, -(qp.kappa[src] + tau) * inv);
  }
  return out;
}

/// Objective of the spectral problem at a candidate covariance.
inline double objective(const SpectralProblem& problem, const Matrix& omega) {
  return problem.rho * omega.cwiseProduct(omega.transpose()).sum() +
         problem.phi.cwiseProduct(omega.transpose()).sum();
}

/// Solves the spectral problem across the three rho regimes. rho > tol:
/// simplex QP on the descending spectrum. |rho| <= tol: uniform average of
/// the outer products of the smallest-eigenvalue eigenvectors. rho < -tol:
/// the single minimizing eigenvector of lowest index (descending convention).
inline TaskCovariance solve_omega(const SpectralProblem& problem,
                                  QpScanStats* stats = nullptr) {
  const Eigen::Index n = problem.phi.rows();
  if (problem.phi.cols() != n) throw ValidationError("phi is not square");
  double scale = std::max(1.0, problem.phi.cwiseAbs().maxCoeff());
  if ((problem.phi - problem.phi.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw ValidationError("phi is not symmetric");

  linalg::SymEig eig = linalg::sym_eig(problem.phi);  // ascending

  Matrix omega;
  if (problem.rho > kRhoTol) {
    Vector kappa(n);  // descending
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = eig.values[n - 1 - i];
    QpSolution sol = simplex_qp(SimplexQp{kappa, problem.rho});
    if (stats) *stats = sol.stats;
    Vector mu_ascending(n);
    for (Eigen::Index i = 0; i < n; ++i) mu_ascending[i] = sol.mu[n - 1 - i];
    omega = eig.vectors * mu_ascending.asDiagonal() * eig.vectors.transpose();
  } else {
    double kappa_min = eig.values[0];
    double tol = kMultiplicityTol * std::max(1.0, std::abs(kappa_min));
    Eigen::Index t = 1;
    while (t < n && std::abs(eig.values[t] - kappa_min) <= tol) ++t;
    if (problem.rho < -kRhoTol) {
      // Lowest descending index within the tied block is ascending index t-1.
      Vector u = eig.vectors.col(t - 1);
      omega = u * u.transpose();
    } else {
      omega = Matrix::Zero(n, n);
      for (Eigen::Index i = 0; i < t; ++i)
        omega += eig.vectors.col(i) * eig.vectors.col(i).transpose();
      omega /= static_cast<double>(t);
    }
  }
  return TaskCovariance{linalg::symmetrize(omega)};
}

/// Assembles (Phi, rho) from the task embedding matrix and learned estimator
/// parameters: Phi = gamma_1 (alpha_1 E^T E + alpha_2 K), rho = gamma_1 alpha_4.
inline SpectralProblem build_phi(const Matrix& embeddings,
                                 const meta_estimator::EstimatorParams& params) {
  double gamma1 = params.gamma[0];
  if (gamma1 == 0.0)
    throw ValidationError("gamma_1 = 0: estimation function approximates a constant");
  Matrix gram = embeddings.transpose() * embeddings;
  Matrix k = meta_estimator::rbf_kernel(embeddings, params.alpha[2]);
  SpectralProblem out;
  out.phi = linalg::symmetrize(gamma1 * (params.alpha[0] * gram + params.alpha[1] * k));
  out.rho = gamma1 * params.alpha[3];
  return out;
}

/// Spectral problem for the alternative estimation head. Its link function is
/// increasing for every gamma, so the estimate is minimized directly:
/// Phi = alpha_1 ReLU(Ehat^T Ehat), rho = alpha_2.
inline SpectralProblem build_phi_alt(const Matrix& embeddings,
                                     const meta_estimator::EstimatorParams& params,
                                     const meta_estimator::AltEstimatorParams& alt) {
  Matrix ehat = alt.l * embeddings;
  ehat.colwise() += alt.beta;
  Matrix s = ehat.transpose() * ehat;
  SpectralProblem out;
  out.phi = linalg::symmetrize(params.alpha[0] * s.cwiseMax(0.0));
  out.rho = params.alpha[1];
  return out;
}

}  // namespace l2mt::omega_solver
