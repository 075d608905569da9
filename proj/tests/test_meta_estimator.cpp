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

#include "l2mt/meta_estimator.hpp"
#include "support/oracles.hpp"

using namespace l2mt;
namespace me = meta_estimator;

namespace {

me::MetaParams random_meta_params(Rng& rng, Eigen::Index d, int d_hat, int layers) {
  me::TrainConfig cfg;
  cfg.d_hat = d_hat;
  cfg.layers = layers;
  me::MetaParams p = me::init_meta_params(d, cfg, rng);
  p.est.alpha << rng.normal(), rng.normal(), rng.normal(), rng.normal();
  p.est.gamma << rng.normal(0.0, 1.0) + 1.0, rng.normal(0.0, 0.5);
  return p;
}

me::TrainingTuple make_tuple(Rng& rng, const me::BoundProblem& bound, std::size_t m) {
  Matrix omega = oracles::random_psd_trace_one(rng, static_cast<Eigen::Index>(m));
  return me::TrainingTuple{&bound, omega, rng.uniform(0.3, 1.5)};
}

}  // namespace

TEST_CASE("rbf kernel") {
  SECTION("identical columns give the all-ones matrix") {
    Matrix e(3, 4);
    e.colwise() = (Vector(3) << 1.0, -2.0, 0.5).finished();
    Matrix k = me::rbf_kernel(e, 0.7);
    REQUIRE((k - Matrix::Ones(4, 4)).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("alpha3 = 0 gives the all-ones matrix") {
    Rng rng(51);
    Matrix e = oracles::random_matrix(rng, 3, 5);
    Matrix k = me::rbf_kernel(e, 0.0);
    REQUIRE((k - Matrix::Ones(5, 5)).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("unit basis columns give exp(-2) off-diagonal") {
    Matrix e = Matrix::Identity(2, 2);
    Matrix k = me::rbf_kernel(e, 1.0);
    REQUIRE(k(0, 1) == Catch::Approx(std::exp(-2.0)).epsilon(1e-12));
    REQUIRE(k(0, 1) == Catch::Approx(0.13534).margin(1e-5));
    REQUIRE(k(0, 0) == 1.0);
  }
}

TEST_CASE("estimation function") {
  SECTION("hand-computed two-task value") {
    Matrix e = Matrix::Identity(2, 2);
    Matrix omega = Matrix::Identity(2, 2) / 2.0;
    me::EstimatorParams params;  // alpha = (1, 1, 1, 0.1)
    // tr(E^T E Omega) = 1, tr(K Omega) = 1 (unit diagonal), tr(Omega^2) = 0.5.
    REQUIRE(me::estimation_fn(e, omega, params) == Catch::Approx(2.05).epsilon(1e-12));
  }

  SECTION("zero alpha vanishes") {
    Rng rng(52);
    Matrix e = oracles::random_matrix(rng, 3, 4);
    Matrix omega = oracles::random_psd_trace_one(rng, 4);
    me::EstimatorParams params;
    params.alpha.setZero();
    REQUIRE(me::estimation_fn(e, omega, params) == 0.0);
  }

  SECTION("simultaneous task permutation leaves the value unchanged") {
    Rng rng(53);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::Index m = 3 + static_cast<Eigen::Index>(rng.index(5));
      Matrix e = oracles::random_matrix(rng, 4, m);
      Matrix omega = oracles::random_psd_trace_one(rng, m);
      me::EstimatorParams params;
      params.alpha << rng.normal(), rng.normal(), rng.normal(), rng.normal();
      double f = me::estimation_fn(e, omega, params);

      std::vector<Eigen::Index> perm(static_cast<std::size_t>(m));
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      rng.shuffle(perm.begin(), perm.end());
      Matrix ep(4, m), op(m, m);
      for (Eigen::Index i = 0; i < m; ++i) {
        ep.col(i) = e.col(perm[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < m; ++j)
          op(i, j) = omega(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
      }
      REQUIRE(std::abs(me::estimation_fn(ep, op, params) - f) <= 1e-10);
    }
  }

  SECTION("dimension mismatch is rejected") {
    Matrix e = Matrix::Identity(2, 3);
    Matrix omega = Matrix::Identity(2, 2);
    REQUIRE_THROWS_AS(me::estimation_fn(e, omega, me::EstimatorParams{}), ValidationError);
  }
}

TEST_CASE("link functions") {
  SECTION("tanh link basics") {
    REQUIRE(me::link(0.0, {1.0, 0.0}) == 0.0);
    REQUIRE(me::link(0.5, {2.0, -1.0}) == Catch::Approx(0.0).margin(1e-15));
    double prev = -1.0;
    for (double o = 0.0; o < 60.0; o += 1.0) {
      double v = me::link(o, {1.0, 0.0});
      REQUIRE(v >= prev);
      REQUIRE(v > -1.0);
      REQUIRE(v < 1.0);
      prev = v;
    }
    REQUIRE(me::link(50.0, {1.0, 0.0}) == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("log link basics") {
    REQUIRE(me::link_alt(1.0, {0.0, 0.0}) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    Rng rng(54);
    for (int trial = 0; trial < 20; ++trial) {
      Eigen::Vector2d gamma(rng.normal(), rng.normal());
      double o = rng.uniform(0.01, 5.0);
      double h = 1e-6;
      REQUIRE(me::link_alt(o + h, gamma) > me::link_alt(o, gamma));
    }
  }
}

TEST_CASE("alternative estimation head") {
  SECTION("identity transform on orthonormal embeddings") {
    for (Eigen::Index m : {1L, 3L}) {
      Matrix e = Matrix::Identity(m, m);  // orthonormal columns
      Matrix omega = Matrix::Identity(m, m) / static_cast<double>(m);
      me::EstimatorParams params;
      params.alpha << 0.7, 0.4, 0.0, 0.0;
      me::AltEstimatorParams alt{Matrix::Identity(m, m), Vector::Zero(m)};
      // ReLU(E^T E) = I, so f = a1 tr(I Omega) + a2 tr(Omega^2) = a1 + a2/m.
      double expected = 0.7 + 0.4 / static_cast<double>(m);
      REQUIRE(me::estimation_fn_alt(e, omega, params, alt) ==
              Catch::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("meta loss") {
  Rng rng(55);
  MultitaskProblem problem = oracles::random_problem(rng, 3, 4, 8);
  me::BoundProblem bound = me::bind_problem(problem, 2);
  std::vector<me::TrainingTuple> tuples{make_tuple(rng, bound, 3), make_tuple(rng, bound, 3)};

  SECTION("bounded below by the regularizer") {
    for (int trial = 0; trial < 10; ++trial) {
      me::MetaParams params = random_meta_params(rng, 4, 3, 2);
      double lambda = rng.uniform(0.0, 2.0);
      double reg = lambda * (params.lgnn.l1.squaredNorm() + params.lgnn.l_shared.squaredNorm());
      REQUIRE(me::meta_loss(tuples, params, lambda) >= reg - 1e-12);
    }
  }

  SECTION("single tuple with a known overshoot") {
    me::MetaParams params = random_meta_params(rng, 4, 3, 2);
    std::vector<me::TrainingTuple> single{tuples[0]};
    Matrix e = lgnn::embed_with_graphs(bound.train, bound.graphs, params.lgnn);
    double f = me::estimation_fn(e, single[0].omega, params.est);
    double target = me::link(single[0].o, params.est.gamma);
    double data = me::meta_loss(single, params, 0.0);
    REQUIRE(data == Catch::Approx(std::abs(f - target)).margin(1e-14));
  }

  SECTION("matches a scalar-loop recomputation") {
    for (int trial = 0; trial < 5; ++trial) {
      me::MetaParams params = random_meta_params(rng, 4, 3, 2);
      double lambda = 0.3;
      double loss = me::meta_loss(tuples, params, lambda);

      // Straight-line recomputation using only scalar loops.
      oracles::ScalarLgnnParams sp;
      sp.layers = params.lgnn.layers;
      sp.l1.assign(4, std::vector<double>(3));
      sp.l_shared.assign(4, std::vector<double>(3));
      sp.beta1.assign(3, 0.0);
      sp.beta_shared.assign(3, 0.0);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          sp.l1[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = params.lgnn.l1(i, j);
          sp.l_shared[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
              params.lgnn.l_shared(i, j);
        }
      for (int j = 0; j < 3; ++j) {
        sp.beta1[static_cast<std::size_t>(j)] = params.lgnn.beta1[j];
        sp.beta_shared[static_cast<std::size_t>(j)] = params.lgnn.beta_shared[j];
      }

      double acc = 0.0;
      for (const me::TrainingTuple& tuple : tuples) {
        std::vector<std::vector<double>> embeddings;
        for (std::size_t t = 0; t < 3; ++t) {
          const LabeledDataset& ds = bound.train[t].get();
          std::vector<std::vector<double>> x(
              4, std::vector<double>(static_cast<std::size_t>(ds.size())));
          std::vector<std::vector<double>> gm(
              static_cast<std::size_t>(ds.size()),
              std::vector<double>(static_cast<std::size_t>(ds.size())));
          for (Eigen::Index i = 0; i < 4; ++i)
            for (Eigen::Index j = 0; j < ds.size(); ++j)
              x[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = ds.features(i, j);
          for (Eigen::Index i = 0; i < ds.size(); ++i)
            for (Eigen::Index j = 0; j < ds.size(); ++j)
              gm[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                  bound.graphs[t].entries(i, j);
          embeddings.push_back(oracles::scalar_lgnn_forward(x, gm, sp));
        }
        double a1 = params.est.alpha[0], a2 = params.est.alpha[1];
        double a3 = params.est.alpha[2], a4 = params.est.alpha[3];
        double term1 = 0.0, term2 = 0.0, term3 = 0.0;
        for (std::size_t j = 0; j < 3; ++j)
          for (std::size_t k = 0; k < 3; ++k) {
            double dot = 0.0, dist = 0.0;
            for (std::size_t a = 0; a < 3; ++a) {
              dot += embeddings[j][a] * embeddings[k][a];
              double diff = embeddings[j][a] - embeddings[k][a];
              dist += diff * diff;
            }
            term1 += dot * tuple.omega(static_cast<Eigen::Index>(k),
                                       static_cast<Eigen::Index>(j));
            term2 += std::exp(-a3 * a3 * dist) * tuple.omega(static_cast<Eigen::Index>(k),
                                                             static_cast<Eigen::Index>(j));
          }
        for (Eigen::Index j = 0; j < 3; ++j)
          for (Eigen::Index k = 0; k < 3; ++k) term3 += tuple.omega(j, k) * tuple.omega(k, j);
        double f = a1 * term1 + a2 * term2 + a4 * term3;
        double target = std::tanh(params.est.gamma[0] * tuple.o + params.est.gamma[1]);
        acc += std::abs(f - target);
      }
      double reg = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          reg += params.lgnn.l1(i, j) * params.lgnn.l1(i, j);
          reg += params.lgnn.l_shared(i, j) * params.lgnn.l_shared(i, j);
        }
      double expected = acc / 2.0 + lambda * reg;
      REQUIRE(std::abs(loss - expected) <= 1e-10);
    }
  }

  SECTION("empty tuple set is rejected") {
    REQUIRE_THROWS_AS(me::meta_loss({}, random_meta_params(rng, 4, 3, 2), 0.1),
                      ValidationError);
  }
}

TEST_CASE("meta gradient") {
  Rng rng(56);
  MultitaskProblem problem = oracles::random_problem(rng, 3, 4, 8);
  me::BoundProblem bound = me::bind_problem(problem, 2);

  SECTION("alpha_4 component is exactly sign * tr(Omega^2)") {
    me::TrainingTuple tuple = make_tuple(rng, bound, 3);
    me::MetaParams params = random_meta_params(rng, 4, 3, 2);
    Matrix e = lgnn::embed_with_graphs(bound.train, bound.graphs, params.lgnn);
    double f = me::estimation_fn(e, tuple.omega, params.est);
    double target = me::link(tuple.o, params.est.gamma);
    double sign = f > target ? 1.0 : (f < target ? -1.0 : 0.0);
    me::MetaGrad g = me::meta_grad(tuple, params, 0.0);
    double tr2 = tuple.omega.cwiseProduct(tuple.omega.transpose()).sum();
    REQUIRE(g.alpha[3] == Catch::Approx(sign * tr2).margin(1e-14));
  }

  SECTION("full gradient matches central finite differences at non-kink points") {
    int accepted = 0;
    for (int attempt = 0; attempt < 400 && accepted < 15; ++attempt) {
      bool use_alt = attempt % 3 == 2;  // exercise the alternative head too
      me::TrainingTuple tuple = make_tuple(rng, bound, 3);
      me::TrainConfig cfg;
      cfg.d_hat = 3;
      cfg.layers = 2;
      cfg.use_alt_estimation = use_alt;
      cfg.use_alt_link = use_alt;
      Rng init_rng(rng.next_u64());
      me::MetaParams params = me::init_meta_params(4, cfg, init_rng);
      params.est.alpha << init_rng.normal(), init_rng.normal(), init_rng.normal(),
          init_rng.normal();
      params.est.gamma << init_rng.normal() + 1.0, init_rng.normal(0.0, 0.5);
      if (use_alt)
        for (Eigen::Index i = 0; i < params.alt.l.size(); ++i)
          params.alt.l.data()[i] += 0.2 * init_rng.normal();

      // Reject draws near the ReLU or absolute-loss kinks.
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
      double f = use_alt ? me::estimation_fn_alt(e, tuple.omega, params.est, params.alt)
                         : me::estimation_fn(e, tuple.omega, params.est);
      double target = use_alt ? me::link_alt(tuple.o, params.est.gamma)
                              : me::link(tuple.o, params.est.gamma);
      if (min_pre < 1e-3 || std::abs(f - target) < 1e-3) continue;
      if (use_alt) {
        Matrix ehat = params.alt.l * e;
        ehat.colwise() += params.alt.beta;
        Matrix s = ehat.transpose() * ehat;
        if (s.cwiseAbs().minCoeff() < 1e-3) continue;
      }
      ++accepted;

      double lambda = 0.2;
      Vector analytic = me::pack_grad(me::meta_grad(tuple, params, lambda), params);
      Vector x = me::pack(params);
      const double h = 1e-5;
      std::vector<me::TrainingTuple> single{tuple};
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        me::MetaParams plus = params, minus = params;
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        me::unpack(xp, plus);
        me::unpack(xm, minus);
        double fd =
            (me::meta_loss(single, plus, lambda) - me::meta_loss(single, minus, lambda)) /
            (2.0 * h);
        double rel =
            std::abs(analytic[i] - fd) / std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
        INFO("component " << i << " alt=" << use_alt);
        REQUIRE(rel < 1e-5);
      }
    }
    REQUIRE(accepted == 15);
  }
}

TEST_CASE("meta training") {
  Rng rng(57);
  MultitaskProblem problem = oracles::random_problem(rng, 3, 4, 8);
  me::BoundProblem bound = me::bind_problem(problem, 2);

  SECTION("a single tuple is overfit within 2000 steps") {
    std::vector<me::TrainingTuple> tuples{make_tuple(rng, bound, 3)};
    me::TrainConfig cfg;
    cfg.epochs = 2000;  // one tuple per epoch
    cfg.seed = 7;
    cfg.d_hat = 3;
    cfg.lambda = 0.01;
    me::TrainResult result = me::train_meta(tuples, 4, cfg);
    REQUIRE(result.best_loss < 0.01);
  }

  SECTION("fixed seed reproduces the parameters bit for bit") {
    std::vector<me::TrainingTuple> tuples{make_tuple(rng, bound, 3),
                                          make_tuple(rng, bound, 3)};
    me::TrainConfig cfg;
    cfg.epochs = 20;
    cfg.seed = 99;
    cfg.d_hat = 3;
    me::TrainResult a = me::train_meta(tuples, 4, cfg);
    me::TrainResult b = me::train_meta(tuples, 4, cfg);
    REQUIRE(me::pack(a.params) == me::pack(b.params));
    REQUIRE(a.best_loss == b.best_loss);
  }

  SECTION("a huge regularizer drives the transforms toward zero") {
    std::vector<me::TrainingTuple> tuples{make_tuple(rng, bound, 3)};
    me::TrainConfig cfg;
    cfg.epochs = 200;
    cfg.seed = 3;
    cfg.d_hat = 3;
    cfg.lambda = 1e6;
    Rng init_rng(cfg.seed);
    me::MetaParams init = me::init_meta_params(4, cfg, init_rng);
    me::TrainResult result = me::train_meta(tuples, 4, cfg);
    REQUIRE(result.params.lgnn.l1.norm() < init.lgnn.l1.norm());
  }
}

TEST_CASE("experience tuple validation") {
  me::ExperienceTuple tuple;
  tuple.problem_ref = "p";
  tuple.o = 0.8;
  tuple.omega.omega = Matrix::Identity(3, 3) / 3.0;
  REQUIRE_NOTHROW(tuple.validate());

  SECTION("trace must be one") {
    tuple.omega.omega = Matrix::Identity(3, 3);
    REQUIRE_THROWS_AS(tuple.validate(), ValidationError);
  }
  SECTION("o must be positive") {
    tuple.o = 0.0;
    REQUIRE_THROWS_AS(tuple.validate(), ValidationError);
  }
  SECTION("degenerate tuples skip the checks") {
    tuple.o = 0.0;
    tuple.degenerate = true;
    REQUIRE_NOTHROW(tuple.validate());
  }
}
