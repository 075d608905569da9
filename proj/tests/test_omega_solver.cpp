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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "l2mt/omega_solver.hpp"
#include "support/oracles.hpp"

using namespace l2mt;
using omega_solver::SimplexQp;
using omega_solver::SpectralProblem;

TEST_CASE("simplex qp hand-solved instances") {
  SECTION("equal eigenvalues give the uniform point") {
    for (double rho : {0.01, 1.0, 50.0}) {
      auto sol = omega_solver::simplex_qp({Vector::Constant(5, 2.5), rho});
      REQUIRE((sol.mu - Vector::Constant(5, 0.2)).lpNorm<Eigen::Infinity>() <= 1e-12);
    }
  }

  SECTION("interior stationary point") {
    auto sol = omega_solver::simplex_qp({(Vector(2) << 2.0, 1.0).finished(), 1.0});
    REQUIRE(sol.mu[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(sol.mu[1] == Catch::Approx(0.75).margin(1e-12));
  }

  SECTION("clamping to a vertex") {
    auto sol = omega_solver::simplex_qp({(Vector(2) << 3.0, 1.0).finished(), 0.1});
    REQUIRE(sol.mu[0] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(sol.mu[1] == Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("single eigenvalue") {
    auto sol = omega_solver::simplex_qp({Vector::Constant(1, -4.2), 0.7});
    REQUIRE(sol.mu[0] == Catch::Approx(1.0).margin(1e-14));
  }

  SECTION("rho <= 0 is rejected") {
    REQUIRE_THROWS_AS(omega_solver::simplex_qp({Vector::Constant(3, 1.0), 0.0}),
                      ValidationError);
    REQUIRE_THROWS_AS(omega_solver::simplex_qp({Vector::Constant(3, 1.0), -1.0}),
                      ValidationError);
  }
}

TEST_CASE("simplex qp equals the projected-gradient oracle") {
  Rng rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(50));
    Vector kappa(n);
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = rng.normal();
    double rho = rng.uniform(1e-3, 10.0);
    auto sol = omega_solver::simplex_qp({kappa, rho});
    Vector oracle = oracles::projected_gradient_qp(kappa, rho);
    REQUIRE((sol.mu - oracle).lpNorm<Eigen::Infinity>() <= 1e-6);
  }
}

TEST_CASE("simplex qp certificates and scan accounting") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(40));
    Vector kappa(n);
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = rng.normal();
    if (trial % 3 == 0)  // force duplicates so zero-width regions get hit
      for (Eigen::Index i = 1; i < n; i += 2) kappa[i] = kappa[i - 1];
    double rho = rng.uniform(1e-3, 10.0);
    auto sol = omega_solver::simplex_qp({kappa, rho});

    REQUIRE(sol.mu.minCoeff() >= 0.0);
    REQUIRE(std::abs(sol.mu.sum() - 1.0) <= 1e-10);
    // KKT: mu is exactly the clamped affine map of tau, and inactive
    // coordinates have nonnegative reduced gradient.
    for (Eigen::Index i = 0; i < n; ++i) {
      double reconstructed = std::max(0.0, -(kappa[i] + sol.tau) / (2.0 * rho));
      REQUIRE(std::abs(sol.mu[i] - reconstructed) <= 1e-8);
      if (sol.mu[i] > 0.0)
        REQUIRE(std::abs(2.0 * rho * sol.mu[i] + kappa[i] + sol.tau) <= 1e-8);
      else
        REQUIRE(kappa[i] + sol.tau >= -1e-8);
    }
    REQUIRE(sol.stats.kappa_reads <= 2 * static_cast<std::size_t>(n));
  }
}

TEST_CASE("simplex qp accepts unsorted input") {
  Rng rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Index n = 3 + static_cast<Eigen::Index>(rng.index(20));
    Vector kappa(n);
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = rng.normal();
    double rho = rng.uniform(1e-2, 5.0);
    auto unsorted = omega_solver::simplex_qp({kappa, rho});

    std::vector<double> sorted(kappa.data(), kappa.data() + n);
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    Vector kappa_sorted = Eigen::Map<Vector>(sorted.data(), n);
    auto reference = omega_solver::simplex_qp({kappa_sorted, rho});

    // Solutions agree as multisets through the value map mu(kappa).
    REQUIRE(std::abs(unsorted.tau - reference.tau) <= 1e-10);
    for (Eigen::Index i = 0; i < n; ++i) {
      double expected = std::max(0.0, -(kappa[i] + reference.tau) / (2.0 * rho));
      REQUIRE(std::abs(unsorted.mu[i] - expected) <= 1e-10);
    }
  }
}

TEST_CASE("large rho pushes the solution toward uniform") {
  Rng rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(30));
    Vector kappa(n);
    for (Eigen::Index i = 0; i < n; ++i) kappa[i] = rng.normal();
    auto sol = omega_solver::simplex_qp({kappa, 1e6});
    REQUIRE((sol.mu - Vector::Constant(n, 1.0 / static_cast<double>(n)))
                .lpNorm<Eigen::Infinity>() <= 1e-3);
  }
}

TEST_CASE("spectral solve regimes") {
  Matrix phi = Matrix::Zero(3, 3);
  phi.diagonal() << 3.0, 2.0, 1.0;

  SECTION("rho = 0 picks the unique smallest eigenvalue") {
    TaskCovariance omega = omega_solver::solve_omega({phi, 0.0});
    Matrix expected = Matrix::Zero(3, 3);
    expected(2, 2) = 1.0;
    REQUIRE((omega.omega - expected).cwiseAbs().maxCoeff() <= 1e-12);
    REQUIRE(omega_solver::objective({phi, 0.0}, omega.omega) == Catch::Approx(1.0));
  }

  SECTION("fully degenerate spectrum returns the uniform hull point") {
    TaskCovariance omega = omega_solver::solve_omega({Matrix::Identity(4, 4), 0.0});
    REQUIRE((omega.omega - Matrix::Identity(4, 4) / 4.0).cwiseAbs().maxCoeff() <= 1e-12);
  }

  SECTION("negative rho returns a rank-one point that beats random samples") {
    Rng rng(45);
    SpectralProblem problem{phi, -0.5};
    TaskCovariance omega = omega_solver::solve_omega(problem);
    Matrix expected = Matrix::Zero(3, 3);
    expected(2, 2) = 1.0;
    REQUIRE((omega.omega - expected).cwiseAbs().maxCoeff() <= 1e-12);
    double ours = omega_solver::objective(problem, omega.omega);
    for (int s = 0; s < 10000; ++s) {
      Matrix candidate = oracles::random_psd_trace_one(rng, 3);
      REQUIRE(ours <= omega_solver::objective(problem, candidate) + 1e-9);
    }
  }

  SECTION("positive rho beats random samples on random instances") {
    Rng rng(46);
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(7));
      Matrix a = oracles::random_matrix(rng, n, n);
      SpectralProblem problem{0.5 * (a + a.transpose()), rng.uniform(1e-2, 2.0)};
      TaskCovariance omega = omega_solver::solve_omega(problem);
      omega.validate();
      REQUIRE(std::abs(omega.trace() - 1.0) <= 1e-8);
      double ours = omega_solver::objective(problem, omega.omega);
      for (int s = 0; s < 2000; ++s) {
        Matrix candidate = oracles::random_psd_trace_one(rng, n);
        REQUIRE(ours <= omega_solver::objective(problem, candidate) + 1e-9);
      }
    }
  }

  SECTION("asymmetric phi is rejected") {
    Matrix bad = Matrix::Zero(2, 2);
    bad(0, 1) = 1.0;
    REQUIRE_THROWS_AS(omega_solver::solve_omega({bad, 1.0}), ValidationError);
  }
}

TEST_CASE("rho = 0 attains the smallest eigenvalue on random instances") {
  Rng rng(47);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(19));
    Matrix a = oracles::random_matrix(rng, n, n);
    SpectralProblem problem{0.5 * (a + a.transpose()), 0.0};
    TaskCovariance omega = omega_solver::solve_omega(problem);
    double kappa_min = linalg::sym_eig(problem.phi).values.minCoeff();
    REQUIRE(std::abs(omega_solver::objective(problem, omega.omega) - kappa_min) <=
            1e-8 * std::max(1.0, std::abs(kappa_min)));
  }
}

TEST_CASE("build_phi") {
  Rng rng(48);
  Matrix e = oracles::random_matrix(rng, 4, 5);
  meta_estimator::EstimatorParams params;

  SECTION("vanishing kernel weights leave only rho") {
    params.alpha << 0.0, 0.0, 1.0, 0.3;
    params.gamma << 2.0, 0.1;
    SpectralProblem problem = omega_solver::build_phi(e, params);
    REQUIRE(problem.phi.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(problem.rho == Catch::Approx(2.0 * 0.3));
  }

  SECTION("matches direct evaluation, including identical embeddings") {
    Matrix same = e;
    same.col(1) = same.col(0);
    params.alpha << 0.8, 0.5, 0.9, 0.1;
    params.gamma << 1.3, -0.2;
    SpectralProblem problem = omega_solver::build_phi(same, params);
    Matrix expected = 1.3 * (0.8 * same.transpose() * same +
                             0.5 * meta_estimator::rbf_kernel(same, 0.9));
    REQUIRE((problem.phi - expected).cwiseAbs().maxCoeff() <= 1e-12);
    REQUIRE(problem.phi(0, 1) == Catch::Approx(1.3 * (0.8 * same.col(0).squaredNorm() + 0.5)));
    // Identical embeddings make the antisymmetric direction a null vector.
    Vector anti = Vector::Zero(5);
    anti[0] = 1.0;
    anti[1] = -1.0;
    REQUIRE((problem.phi * anti).lpNorm<Eigen::Infinity>() <= 1e-10);
  }

  SECTION("negative gamma_1 flips the sign of phi and rho") {
    params.alpha << 0.8, 0.5, 0.9, 0.1;
    params.gamma << 1.3, 0.0;
    SpectralProblem plus = omega_solver::build_phi(e, params);
    params.gamma[0] = -1.3;
    SpectralProblem minus = omega_solver::build_phi(e, params);
    REQUIRE((plus.phi + minus.phi).cwiseAbs().maxCoeff() <= 1e-12);
    REQUIRE(plus.rho == Catch::Approx(-minus.rho));
  }

  SECTION("gamma_1 = 0 is the excluded trivial case") {
    params.gamma << 0.0, 1.0;
    REQUIRE_THROWS_AS(omega_solver::build_phi(e, params), ValidationError);
  }
}
