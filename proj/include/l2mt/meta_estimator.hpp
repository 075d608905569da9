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

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "l2mt/lgnn.hpp"
#include "l2mt/rng.hpp"
#include "l2mt/types.hpp"

// The estimator maps (task embedding matrix, task covariance) to the
// link-transformed relative test error:
//
//   f(E, Omega) = a1 tr(E^T E Omega) + a2 tr(K Omega) + a4 tr(Omega^2)
//   K_jk        = exp(-||a3 (e_j - e_k)||^2)
//   link(o)     = tanh(g1 o + g2)
//
// trained end-to-end with the LGNN under a mean absolute loss plus a
// Frobenius penalty on the LGNN transforms. Hand-derived reverse-mode
// gradients throughout; ReLU and absolute-loss kinks take subgradient 0.
namespace l2mt::meta_estimator {

struct EstimatorParams {
  Eigen::Vector4d alpha{1.0, 1.0, 1.0, 0.1};
  Eigen::Vector2d gamma{1.0, 0.0};
};

/// Parameters of the alternative estimation head
/// f = a1 tr(ReLU(Ehat^T Ehat) Omega) + a2 tr(Omega^2), Ehat = l E + beta 1^T.
/// alpha[0] and alpha[1] of EstimatorParams supply a1, a2.
struct AltEstimatorParams {
  Matrix l;     // d_hat x d_hat
  Vector beta;  // d_hat
};

struct MetaParams {
  lgnn::LgnnParams lgnn;
  EstimatorParams est;
  AltEstimatorParams alt;
  bool use_alt_estimation = false;
  bool use_alt_link = false;
};

/// One unit of multitask experience: which problem, which task covariance
/// (trace-normalized), and the relative test error it achieved.
struct ExperienceTuple {
  std::string problem_ref;
  Matrix embedding;  // refreshed from current LGNN parameters during training
  TaskCovariance omega;
  double o = 0.0;
  bool degenerate = false;  // flagged (zero STL error or failed solve); excluded from training
  std::string generator;    // zoo tag that produced omega
  std::string error;

  void validate() const {
    if (degenerate) return;
    omega.validate();
    if (std::abs(omega.trace() - 1.0) > 1e-8)
      throw ValidationError("tuple omega is not trace-normalized");
    if (!(o > 0.0)) throw ValidationError("tuple relative error must be positive");
  }
};

inline Matrix rbf_kernel(const Matrix& e, double alpha3) {
  const Eigen::Index m = e.cols();
  Matrix k(m, m);
  double a2 = alpha3 * alpha3;
  for (Eigen::Index i = 0; i < m; ++i) {
    k(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < m; ++j) {
      double v = std::exp(-a2 * (e.col(i) - e.col(j)).squaredNorm());
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

inline void check_dims(const Matrix& e, const Matrix& omega) {
  if (omega.rows() != omega.cols()) throw ValidationError("omega is not square");
  if (e.cols() != omega.rows())
    throw ValidationError("embedding column count does not match omega size");
}

inline double trace_product(const Matrix& a, const Matrix& b) {
  return a.cwiseProduct(b.transpose()).sum();
}

inline double estimation_fn(const Matrix& e, const Matrix& omega, const EstimatorParams& p) {
  check_dims(e, omega);
  Matrix gram = e.transpose() * e;
  Matrix k = rbf_kernel(e, p.alpha[2]);
  return p.alpha[0] * trace_product(gram, omega) + p.alpha[1] * trace_product(k, omega) +
         p.alpha[3] * trace_product(omega, omega);
}

inline double estimation_fn_alt(const Matrix& e, const Matrix& omega, const EstimatorParams& p,
                                const AltEstimatorParams& alt) {
  check_dims(e, omega);
  Matrix ehat = alt.l * e;
  ehat.colwise() += alt.beta;
  Matrix s = ehat.transpose() * ehat;
  return p.alpha[0] * trace_product(s.cwiseMax(0.0), omega) +
         p.alpha[1] * trace_product(omega, omega);
}

inline double link(double o, const Eigen::Vector2d& gamma) {
  return std::tanh(gamma[0] * o + gamma[1]);
}

inline double link_alt(double o, const Eigen::Vector2d& gamma) {
  return std::log(std::exp(gamma[0]) * o + std::exp(gamma[1]));
}

/// A problem with its per-task training graphs prebuilt; the graphs do not
/// depend on the learnable parameters, so they are shared by every tuple that
/// references the problem.
struct BoundProblem {
  const MultitaskProblem* problem = nullptr;
  std::vector<lgnn::GraphAdjacency> graphs;
  DatasetRefs train;
};

inline BoundProblem bind_problem(const MultitaskProblem& problem, int k) {
  BoundProblem bound;
  bound.problem = &problem;
  bound.train = problem.train_splits();
  bound.graphs = lgnn::build_graphs(bound.train, k);
  return bound;
}

struct TrainingTuple {
  const BoundProblem* bound = nullptr;
  Matrix omega;
  double o = 0.0;
};

struct MetaGrad {
  Matrix l1;
  Vector beta1;
  Matrix l_shared;
  Vector beta_shared;
  Eigen::Vector4d alpha = Eigen::Vector4d::Zero();
  Eigen::Vector2d gamma = Eigen::Vector2d::Zero();
  Matrix alt_l;
  Vector alt_beta;
};

namespace detail {

inline double lgnn_weight_norms(const MetaParams& p) {
  double acc = p.lgnn.l1.squaredNorm();
  if (p.lgnn.layers >= 2)
    acc += static_cast<double>(p.lgnn.layers - 1) * p.lgnn.l_shared.squaredNorm();
  return acc;
}

inline double tuple_target(const TrainingTuple& t, const MetaParams& p) {
  return p.use_alt_link ? link_alt(t.o, p.est.gamma) : link(t.o, p.est.gamma);
}

inline double tuple_estimate(const Matrix& e, const TrainingTuple& t, const MetaParams& p) {
  return p.use_alt_estimation ? estimation_fn_alt(e, t.omega, p.est, p.alt)
                              : estimation_fn(e, t.omega, p.est);
}

}  // namespace detail

/// Mean absolute deviation between estimates and link-transformed targets,
/// plus lambda * sum of squared Frobenius norms of the LGNN transforms.
/// Embeddings are recomputed from the current parameters on every call.
inline double meta_loss(const std::vector<TrainingTuple>& tuples, const MetaParams& params,
                        double lambda) {
  if (tuples.empty()) throw ValidationError("empty tuple set");
  std::map<const BoundProblem*, Matrix> embeddings;
  double acc = 0.0;
  for (const TrainingTuple& t : tuples) {
    auto it = embeddings.find(t.bound);
    if (it == embeddings.end())
      it = embeddings
               .emplace(t.bound,
                        lgnn::embed_with_graphs(t.bound->train, t.bound->graphs, params.lgnn))
               .first;
    acc += std::abs(detail::tuple_estimate(it->second, t, params) -
                    detail::tuple_target(t, params));
  }
  return acc / static_cast<double>(tuples.size()) + lambda * detail::lgnn_weight_norms(params);
}

/// Per-tuple stochastic gradient of the training objective (absolute data
/// term plus the full regularizer) over every learnable component.
inline MetaGrad meta_grad(const TrainingTuple& tuple, const MetaParams& params, double lambda) {
  const lgnn::LgnnParams& lg = params.lgnn;
  const MultitaskProblem& problem = *tuple.bound->problem;
  const Eigen::Index m = static_cast<Eigen::Index>(problem.task_count());
  const int s = lg.layers;

  // Forward with caches.
  std::vector<lgnn::ForwardCache> caches(problem.task_count());
  Matrix e(lg.d_hat(), m);
  for (Eigen::Index t = 0; t < m; ++t)
    e.col(t) = lgnn::lgnn_forward(tuple.bound->train[static_cast<std::size_t>(t)].get(),
                                  tuple.bound->graphs[static_cast<std::size_t>(t)], lg,
                                  &caches[static_cast<std::size_t>(t)]);

  const Matrix& omega = tuple.omega;
  check_dims(e, omega);

  MetaGrad g;
  g.l1 = Matrix::Zero(lg.l1.rows(), lg.l1.cols());
  g.beta1 = Vector::Zero(lg.beta1.size());
  g.l_shared = Matrix::Zero(lg.l_shared.rows(), lg.l_shared.cols());
  g.beta_shared = Vector::Zero(lg.beta_shared.size());
  if (params.use_alt_estimation) {
    g.alt_l = Matrix::Zero(params.alt.l.rows(), params.alt.l.cols());
    g.alt_beta = Vector::Zero(params.alt.beta.size());
  }

  double f = 0.0;
  double target = detail::tuple_target(tuple, params);
  Matrix de;  // d loss / d E, before the sign factor

  if (!params.use_alt_estimation) {
    const double a1 = params.est.alpha[0], a2 = params.est.alpha[1];
    const double a3 = params.est.alpha[2], a4 = params.est.alpha[3];
    Matrix gram = e.transpose() * e;
    Matrix dist(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      dist(i, i) = 0.0;
      for (Eigen::Index j = i + 1; j < m; ++j) {
        double v = (e.col(i) - e.col(j)).squaredNorm();
        dist(i, j) = v;
        dist(j, i) = v;
      }
    }
    Matrix k = (-a3 * a3 * dist).array().exp();
    double term1 = trace_product(gram, omega);
    double term2 = trace_product(k, omega);
    double term3 = trace_product(omega, omega);
    f = a1 * term1 + a2 * term2 + a4 * term3;

    double sign = f > target ? 1.0 : (f < target ? -1.0 : 0.0);
    g.alpha[0] = sign * term1;
    g.alpha[1] = sign * term2;
    g.alpha[2] = sign * a2 * (omega.cwiseProduct(k).cwiseProduct(dist)).sum() * (-2.0 * a3);
    g.alpha[3] = sign * term3;

    // d tr(E^T E Omega)/dE = 2 E Omega; the kernel term contributes
    // -4 a3^2 E (diag(rowsum(C)) - C) with C = Omega .* K.
    Matrix c = omega.cwiseProduct(k);
    Vector row_sums = c.rowwise().sum();
    de = sign * (2.0 * a1 * e * omega -
                 4.0 * a3 * a3 * a2 * (e * row_sums.asDiagonal() - e * c));

    // Link gradients.
    if (!params.use_alt_link) {
      double u = params.est.gamma[0] * tuple.o + params.est.gamma[1];
      double sech2 = 1.0 - std::tanh(u) * std::tanh(u);
      g.gamma[0] = -sign * sech2 * tuple.o;
      g.gamma[1] = -sign * sech2;
    } else {
      double eg1 = std::exp(params.est.gamma[0]), eg2 = std::exp(params.est.gamma[1]);
      double denom = eg1 * tuple.o + eg2;
      g.gamma[0] = -sign * eg1 * tuple.o / denom;
      g.gamma[1] = -sign * eg2 / denom;
    }
  } else {
    const double a1 = params.est.alpha[0], a2 = params.est.alpha[1];
    Matrix ehat = params.alt.l * e;
    ehat.colwise() += params.alt.beta;
    Matrix sgram = ehat.transpose() * ehat;
    Matrix relu = sgram.cwiseMax(0.0);
    double term1 = trace_product(relu, omega);
    double term2 = trace_product(omega, omega);
    f = a1 * term1 + a2 * term2;

    double sign = f > target ? 1.0 : (f < target ? -1.0 : 0.0);
    g.alpha[0] = sign * term1;
    g.alpha[1] = sign * term2;

    Matrix mask = (sgram.array() > 0.0).cast<double>();
    Matrix gs = a1 * mask.cwiseProduct(omega);  // symmetric
    Matrix dehat = sign * 2.0 * ehat * gs;
    g.alt_l = dehat * e.transpose();
    g.alt_beta = dehat.rowwise().sum();
    de = params.alt.l.transpose() * dehat;

    if (!params.use_alt_link) {
      double u = params.est.gamma[0] * tuple.o + params.est.gamma[1];
      double sech2 = 1.0 - std::tanh(u) * std::tanh(u);
      g.gamma[0] = -sign * sech2 * tuple.o;
      g.gamma[1] = -sign * sech2;
    } else {
      double eg1 = std::exp(params.est.gamma[0]), eg2 = std::exp(params.est.gamma[1]);
      double denom = eg1 * tuple.o + eg2;
      g.gamma[0] = -sign * eg1 * tuple.o / denom;
      g.gamma[1] = -sign * eg2 / denom;
    }
  }

  // Backpropagate dE through mean pooling and the layer stack of each task.
  for (Eigen::Index t = 0; t < m; ++t) {
    const lgnn::ForwardCache& cache = caches[static_cast<std::size_t>(t)];
    const LabeledDataset& ds = tuple.bound->train[static_cast<std::size_t>(t)].get();
    const Matrix& graph = tuple.bound->graphs[static_cast<std::size_t>(t)].entries;
    const Eigen::Index n = ds.size();

    Matrix dh = (de.col(t) / static_cast<double>(n)).replicate(1, n);
    for (int layer = s; layer >= 2; --layer) {
      const Matrix& pre = cache.pre[static_cast<std::size_t>(layer - 1)];
      Matrix dpre = dh.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
      g.l_shared += ds.features * dpre.transpose();
      g.beta_shared += dpre.rowwise().sum();
      dh = dpre * graph.transpose();
    }
    Matrix dpre1 = dh.cwiseProduct((cache.pre[0].array() > 0.0).cast<double>().matrix());
    g.l1 += ds.features * dpre1.transpose();
    g.beta1 += dpre1.rowwise().sum();
  }

  g.l1 += 2.0 * lambda * lg.l1;
  if (s >= 2) g.l_shared += 2.0 * lambda * static_cast<double>(s - 1) * lg.l_shared;
  return g;
}

// ---------------------------------------------------------------------------
// Flat parameter packing (row-major matrices) shared by the optimizer, the
// finite-difference checks, and serialization.

inline Eigen::Index packed_size(const MetaParams& p) {
  Eigen::Index n = 2 * (p.lgnn.l1.size() + p.lgnn.beta1.size()) + 6;
  if (p.use_alt_estimation) n += p.alt.l.size() + p.alt.beta.size();
  return n;
}

namespace detail {

inline void write_matrix(Vector& out, Eigen::Index& at, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[at++] = m(i, j);
}

inline void read_matrix(const Vector& in, Eigen::Index& at, Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = in[at++];
}

}  // namespace detail

inline Vector pack(const MetaParams& p) {
  Vector out(packed_size(p));
  Eigen::Index at = 0;
  detail::write_matrix(out, at, p.lgnn.l1);
  out.segment(at, p.lgnn.beta1.size()) = p.lgnn.beta1;
  at += p.lgnn.beta1.size();
  detail::write_matrix(out, at, p.lgnn.l_shared);
  out.segment(at, p.lgnn.beta_shared.size()) = p.lgnn.beta_shared;
  at += p.lgnn.beta_shared.size();
  out.segment<4>(at) = p.est.alpha;
  at += 4;
  out.segment<2>(at) = p.est.gamma;
  at += 2;
  if (p.use_alt_estimation) {
    detail::write_matrix(out, at, p.alt.l);
    out.segment(at, p.alt.beta.size()) = p.alt.beta;
    at += p.alt.beta.size();
  }
  return out;
}

inline Vector pack_grad(const MetaGrad& g, const MetaParams& shape) {
  Vector out = Vector::Zero(packed_size(shape));
  Eigen::Index at = 0;
  detail::write_matrix(out, at, g.l1);
  out.segment(at, g.beta1.size()) = g.beta1;
  at += g.beta1.size();
  detail::write_matrix(out, at, g.l_shared);
  out.segment(at, g.beta_shared.size()) = g.beta_shared;
  at += g.beta_shared.size();
  out.segment<4>(at) = g.alpha;
  at += 4;
  out.segment<2>(at) = g.gamma;
  at += 2;
  if (shape.use_alt_estimation) {
    detail::write_matrix(out, at, g.alt_l);
    out.segment(at, g.alt_beta.size()) = g.alt_beta;
    at += g.alt_beta.size();
  }
  return out;
}

inline void unpack(const Vector& x, MetaParams& p) {
  Eigen::Index at = 0;
  detail::read_matrix(x, at, p.lgnn.l1);
  p.lgnn.beta1 = x.segment(at, p.lgnn.beta1.size());
  at += p.lgnn.beta1.size();
  detail::read_matrix(x, at, p.lgnn.l_shared);
  p.lgnn.beta_shared = x.segment(at, p.lgnn.beta_shared.size());
  at += p.lgnn.beta_shared.size();
  p.est.alpha = x.segment<4>(at);
  at += 4;
  p.est.gamma = x.segment<2>(at);
  at += 2;
  if (p.use_alt_estimation) {
    detail::read_matrix(x, at, p.alt.l);
    p.alt.beta = x.segment(at, p.alt.beta.size());
    at += p.alt.beta.size();
  }
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  int epochs = 100;
  std::uint64_t seed = 0;
  double learning_rate = 0.01;  // decays linearly to 0 over all steps
  double lambda = 0.1;
  int d_hat = 50;
  int layers = 2;
  bool use_alt_estimation = false;
  bool use_alt_link = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainResult {
  MetaParams params;
  double best_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
  int steps = 0;
};

inline MetaParams init_meta_params(Eigen::Index input_dim, const TrainConfig& cfg, Rng& rng) {
  MetaParams p;
  p.lgnn = lgnn::zero_params(input_dim, cfg.d_hat, cfg.layers);
  for (Eigen::Index i = 0; i < p.lgnn.l1.rows(); ++i)
    for (Eigen::Index j = 0; j < p.lgnn.l1.cols(); ++j) p.lgnn.l1(i, j) = rng.normal(0.0, 0.1);
  for (Eigen::Index i = 0; i < p.lgnn.l_shared.rows(); ++i)
    for (Eigen::Index j = 0; j < p.lgnn.l_shared.cols(); ++j)
      p.lgnn.l_shared(i, j) = rng.normal(0.0, 0.1);
  p.est = EstimatorParams{};
  p.use_alt_estimation = cfg.use_alt_estimation;
  p.use_alt_link = cfg.use_alt_link;
  if (cfg.use_alt_estimation) {
    p.alt.l = Matrix::Identity(cfg.d_hat, cfg.d_hat);
    p.alt.beta = Vector::Zero(cfg.d_hat);
  }
  return p;
}

/// Adam over per-tuple stochastic gradients with a linearly decaying learning
/// rate. One epoch is q steps. Returns the parameters with the best full
/// training loss seen at epoch boundaries.
inline TrainResult train_meta(const std::vector<TrainingTuple>& tuples, Eigen::Index input_dim,
                              const TrainConfig& cfg) {
  if (tuples.empty()) throw ValidationError("training requires at least one tuple");
  if (cfg.epochs < 1) throw ValidationError("epochs must be >= 1");

  Rng rng(cfg.seed);
  MetaParams params = init_meta_params(input_dim, cfg, rng);
  const std::size_t q = tuples.size();
  const long total_steps = static_cast<long>(cfg.epochs) * static_cast<long>(q);

  Vector x = pack(params);
  Vector m = Vector::Zero(x.size());
  Vector v = Vector::Zero(x.size());

  TrainResult out;
  out.best_loss = meta_loss(tuples, params, cfg.lambda);
  out.params = params;

  for (long step = 0; step < total_steps; ++step) {
    double lr = cfg.learning_rate *
                (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
    std::size_t idx = rng.index(q);
    Vector g = pack_grad(meta_grad(tuples[idx], params, cfg.lambda), params);
    if (!g.allFinite()) {
      std::ostringstream msg;
      msg << "meta training diverged at step " << step;
      throw SolverError(msg.str());
    }
    double t = static_cast<double>(step + 1);
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v.array().matrix() + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
    double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    x -= (lr / bc1) * m.cwiseQuotient((v / bc2).cwiseSqrt().array().matrix() +
                                      Vector::Constant(x.size(), cfg.adam_eps));
    unpack(x, params);

    if ((step + 1) % static_cast<long>(q) == 0) {
      double loss = meta_loss(tuples, params, cfg.lambda);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "meta training diverged at step " << step;
        throw SolverError(msg.str());
      }
      out.epoch_losses.push_back(loss);
      if (loss < out.best_loss) {
        out.best_loss = loss;
        out.params = params;
      }
    }
  }

  out.final_loss = meta_loss(tuples, params, cfg.lambda);
  if (out.final_loss < out.best_loss) {
    out.best_loss = out.final_loss;
    out.params = params;
  }
  out.steps = static_cast<int>(total_steps);
  return out;
}

}  // namespace l2mt::meta_estimator
