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
#include <deque>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "l2mt/linalg.hpp"
#include "l2mt/types.hpp"

// Solvers for the unified task-covariance-regularized multitask objective
//
//   sum_i (1/n_i) sum_j l(w_i.x_ij + b_i, y_ij)
//     + (lambda1/2) tr(W Omega^{-1} W^T) + lambda2 g(Omega)
//
// with Omega fixed, and by alternating closed-form Omega updates for the
// (squared) Schatten regularizer families.
namespace l2mt::mtl_core {

enum class LossKind { Logistic, Squared };

inline LossKind loss_from_string(const std::string& s) {
  if (s == "logistic") return LossKind::Logistic;
  if (s == "squared") return LossKind::Squared;
  throw ValidationError("unknown loss kind: " + s);
}

namespace detail {

// log(1 + exp(a)) without overflow.
inline double softplus(double a) {
  if (a > 35.0) return a;
  if (a < -35.0) return std::exp(a);
  return std::log1p(std::exp(a));
}

// 1 / (1 + exp(a)) without overflow.
inline double inv_logit_neg(double a) {
  if (a > 35.0) return std::exp(-a);
  if (a < -35.0) return 1.0;
  return 1.0 / (1.0 + std::exp(a));
}

inline double loss_value(LossKind kind, double f, double y) {
  switch (kind) {
    case LossKind::Logistic:
      return softplus(-y * f);
    case LossKind::Squared:
      return (f - y) * (f - y);
  }
  return 0.0;
}

inline double loss_slope(LossKind kind, double f, double y) {
  switch (kind) {
    case LossKind::Logistic:
      return -y * inv_logit_neg(y * f);
    case LossKind::Squared:
      return 2.0 * (f - y);
  }
  return 0.0;
}

}  // namespace detail

struct SolveOptions {
  int max_iterations = 5000;
  double tolerance = 1e-6;  // on the gradient norm, relative to max(1, initial)
  double armijo_c = 1e-4;
  double backtrack = 0.5;
  int lbfgs_memory = 10;
};

struct SolveInfo {
  double objective = 0.0;
  double grad_norm = 0.0;
  double initial_grad_norm = 0.0;
  int iterations = 0;
};

struct GivenOmegaResult {
  TaskModel model;
  SolveInfo info;
};

/// Ridge added to the spectrum of Omega before inversion: 1e-6 * tr(Omega)/m.
inline double omega_ridge(const Matrix& omega) {
  return 1e-6 * omega.trace() / static_cast<double>(omega.rows());
}

/// Mean per-task empirical loss term of the unified objective.
inline double empirical_loss(const DatasetRefs& train, const TaskModel& model, LossKind loss) {
  double total = 0.0;
  for (std::size_t t = 0; t < train.size(); ++t) {
    const LabeledDataset& ds = train[t].get();
    Vector z = ds.features.transpose() * model.weights.col(static_cast<Eigen::Index>(t));
    z.array() += model.biases[static_cast<Eigen::Index>(t)];
    double acc = 0.0;
    for (Eigen::Index j = 0; j < z.size(); ++j)
      acc += detail::loss_value(loss, z[j], ds.labels[j]);
    total += acc / static_cast<double>(ds.size());
  }
  return total;
}

/// Covariance-coupled ridge term (lambda1/2) tr(W Omega^{-1} W^T). With
/// ridge == 0 the exact pseudoinverse is used; the solver path passes
/// omega_ridge(omega).
inline double coupling_penalty(const Matrix& weights, const Matrix& omega, double lambda1,
                               double ridge) {
  Matrix m = linalg::psd_pinv(omega, ridge);
  return 0.5 * lambda1 * (weights * m).cwiseProduct(weights).sum();
}

inline double objective_given_omega(const DatasetRefs& train, const TaskModel& model,
                                    const Matrix& omega, double lambda1, LossKind loss,
                                    double ridge) {
  return empirical_loss(train, model, loss) +
         coupling_penalty(model.weights, omega, lambda1, ridge);
}

namespace detail {

struct Preconditioner {
  Matrix q;      // Omega_ridged^{1/2}
  Matrix q_inv;  // Omega_ridged^{-1/2}
};

inline Preconditioner make_preconditioner(const Matrix& omega) {
  linalg::SymEig eig = linalg::sym_eig(omega);
  double ridge = omega_ridge(omega);
  Eigen::Index m = omega.rows();
  Vector sq(m), sq_inv(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    double v = std::max(eig.values[i], 0.0) + ridge;
    sq[i] = std::sqrt(v);
    sq_inv[i] = 1.0 / sq[i];
  }
  return Preconditioner{eig.vectors * sq.asDiagonal() * eig.vectors.transpose(),
                        eig.vectors * sq_inv.asDiagonal() * eig.vectors.transpose()};
}

// Objective in the spectrally preconditioned variable Wt = W Q^{-1}, in which
// the coupling penalty becomes (lambda1/2) ||Wt||_F^2 and its curvature is
// independent of Omega's conditioning.
class GivenOmegaObjective {
 public:
  GivenOmegaObjective(const DatasetRefs& train, const Preconditioner& pre, double lambda1,
                      LossKind loss)
      : train_(train), pre_(pre), lambda1_(lambda1), loss_(loss) {
    d_ = train.front().get().dim();
    m_ = static_cast<Eigen::Index>(train.size());
  }

  Eigen::Index dim() const { return d_ * m_ + m_; }
  Eigen::Index d() const { return d_; }
  Eigen::Index m() const { return m_; }

  // Returns the objective; fills the preconditioned gradient and the
  // gradient norm in the original (W, b) variables, which drives the
  // stationarity test.
  double eval(const Vector& x, Vector* grad, double* true_grad_norm) const {
    Eigen::Map<const Matrix> wt(x.data(), d_, m_);
    Eigen::Map<const Vector> b(x.data() + d_ * m_, m_);

    Matrix data_grad_w(d_, m_);  // gradient of the data term in W space
    Vector grad_b(m_);
    double data_obj = 0.0;
    for (Eigen::Index t = 0; t < m_; ++t) {
      const LabeledDataset& ds = train_[static_cast<std::size_t>(t)].get();
      Vector w_t = wt * pre_.q.col(t);
      Vector z = ds.features.transpose() * w_t;
      z.array() += b[t];
      double inv_n = 1.0 / static_cast<double>(ds.size());
      Vector slope(z.size());
      double acc = 0.0;
      for (Eigen::Index j = 0; j < z.size(); ++j) {
        acc += loss_value(loss_, z[j], ds.labels[j]);
        slope[j] = loss_slope(loss_, z[j], ds.labels[j]) * inv_n;
      }
      data_obj += acc * inv_n;
      data_grad_w.col(t) = ds.features * slope;
      grad_b[t] = slope.sum();
    }

    double obj = data_obj + 0.5 * lambda1_ * wt.squaredNorm();
    if (grad) {
      grad->resize(dim());
      Eigen::Map<Matrix> gw(grad->data(), d_, m_);
      gw = data_grad_w * pre_.q + lambda1_ * wt;
      grad->tail(m_) = grad_b;
    }
    if (true_grad_norm) {
      Matrix gw_true = data_grad_w + lambda1_ * wt * pre_.q_inv;
      *true_grad_norm = std::sqrt(gw_true.squaredNorm() + grad_b.squaredNorm());
    }
    return obj;
  }

 private:
  const DatasetRefs& train_;
  const Preconditioner& pre_;
  double lambda1_;
  LossKind loss_;
  Eigen::Index d_;
  Eigen::Index m_;
};

// L-BFGS two-loop recursion; falls back to steepest descent when no curvature
// pairs are stored.
class LbfgsDirection {
 public:
  explicit LbfgsDirection(int memory) : memory_(memory) {}

  void clear() { pairs_.clear(); }

  void push(const Vector& s, const Vector& y) {
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      pairs_.push_back({s, y, sy});
      if (static_cast<int>(pairs_.size()) > memory_) pairs_.pop_front();
    }
  }

  Vector compute(const Vector& grad) const {
    Vector q = -grad;
    if (pairs_.empty()) return q;
    std::vector<double> alpha(pairs_.size());
    for (std::size_t i = pairs_.size(); i-- > 0;) {
      alpha[i] = pairs_[i].s.dot(q) / pairs_[i].sy;
      q -= alpha[i] * pairs_[i].y;
    }
    const auto& last = pairs_.back();
    q *= last.sy / last.y.squaredNorm();
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      double beta = pairs_[i].y.dot(q) / pairs_[i].sy;
      q += (alpha[i] - beta) * pairs_[i].s;
    }
    return q;
  }

 private:
  struct Pair {
    Vector s, y;
    double sy;
  };
  int memory_;
  std::deque<Pair> pairs_;
};

}  // namespace detail

/// Solves the unified objective for fixed Omega by full-batch first-order
/// descent with Armijo backtracking. The descent direction is L-BFGS in a
/// spectrally preconditioned variable; plain steepest descent cannot reach
/// the stationarity tolerance within the iteration budget once Omega is
/// rank-deficient and its pseudoinverse carries 1e6-scale eigenvalues.
inline GivenOmegaResult solve_given_omega(const DatasetRefs& train, const TaskCovariance& omega,
                                          double lambda1, LossKind loss,
                                          const SolveOptions& options = {},
                                          const TaskModel* warm_start = nullptr) {
  if (train.empty()) throw ValidationError("no training datasets");
  if (!(lambda1 > 0.0)) throw ValidationError("lambda1 must be positive");
  const Eigen::Index m = static_cast<Eigen::Index>(train.size());
  const Eigen::Index d = train.front().get().dim();
  for (const auto& ref : train) {
    ref.get().validate();
    if (ref.get().dim() != d) throw ValidationError("tasks disagree on feature dimension");
  }
  if (omega.omega.rows() != m)
    throw ValidationError("omega dimension does not match task count");
  omega.validate();

  detail::Preconditioner pre = detail::make_preconditioner(omega.omega);
  detail::GivenOmegaObjective objective(train, pre, lambda1, loss);

  Vector x = Vector::Zero(objective.dim());
  if (warm_start != nullptr) {
    Eigen::Map<Matrix> wt(x.data(), d, m);
    wt = warm_start->weights * pre.q_inv;
    x.tail(m) = warm_start->biases;
  }

  Vector grad;
  double true_norm = 0.0;
  double f = objective.eval(x, &grad, &true_norm);
  const double initial_norm = true_norm;
  const double target = options.tolerance * std::max(1.0, initial_norm);

  detail::LbfgsDirection lbfgs(options.lbfgs_memory);
  int iter = 0;
  bool converged = true_norm <= target;
  while (!converged && iter < options.max_iterations) {
    Vector dir = lbfgs.compute(grad);
    double slope = dir.dot(grad);
    if (!(slope < -1e-14 * dir.norm() * grad.norm())) {
      dir = -grad;
      slope = dir.dot(grad);
    }

    double alpha = 1.0;
    Vector x_new;
    double f_new = f;
    bool accepted = false;
    while (alpha > 1e-20) {
      x_new = x + alpha * dir;
      f_new = objective.eval(x_new, nullptr, nullptr);
      if (f_new <= f + options.armijo_c * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= options.backtrack;
    }
    if (!accepted) {
      // The quadratic model has gone stale; restart from steepest descent.
      lbfgs.clear();
      dir = -grad;
      slope = dir.dot(grad);
      alpha = 1.0;
      while (alpha > 1e-20) {
        x_new = x + alpha * dir;
        f_new = objective.eval(x_new, nullptr, nullptr);
        if (f_new <= f + options.armijo_c * alpha * slope) {
          accepted = true;
          break;
        }
        alpha *= options.backtrack;
      }
      if (!accepted) break;  // at numerical floor
    }

    Vector grad_new;
    double norm_new = 0.0;
    objective.eval(x_new, &grad_new, &norm_new);
    lbfgs.push(x_new - x, grad_new - grad);
    x = std::move(x_new);
    grad = std::move(grad_new);
    f = f_new;
    true_norm = norm_new;
    ++iter;
    converged = true_norm <= target;
  }

  if (!converged) {
    std::ostringstream msg;
    msg << "solver did not converge after " << iter
        << " iterations; final gradient norm " << true_norm << " (target " << target << ")";
    throw SolverError(msg.str());
  }

  TaskModel model;
  Eigen::Map<const Matrix> wt(x.data(), d, m);
  model.weights = wt * pre.q;
  model.biases = x.tail(m);

  return GivenOmegaResult{std::move(model),
                          SolveInfo{f, true_norm, initial_norm, iter}};
}

/// Closed-form Omega minimizer for g(Omega) = tr(Omega^r):
/// (lambda1/(2 lambda2 r))^{1/(r+1)} (W^T W)^{1/(r+1)}. Unnormalized.
inline TaskCovariance schatten_omega_update(const Matrix& weights, double lambda1,
                                            double lambda2, double r) {
  if (!(r > 0.0)) throw ValidationError("r must be positive");
  if (!(lambda1 > 0.0) || !(lambda2 > 0.0))
    throw ValidationError("lambda1 and lambda2 must be positive");
  double scale = std::pow(lambda1 / (2.0 * lambda2 * r), 1.0 / (r + 1.0));
  Matrix omega = scale * linalg::psd_power(weights.transpose() * weights, 1.0 / (r + 1.0));
  return TaskCovariance{linalg::symmetrize(omega)};
}

/// Closed-form Omega minimizer under the constraint tr(Omega^r) <= 1:
/// eigenvalues mu_i(W)^{2/(r+1)} / (sum_j mu_j(W)^{2r/(r+1)})^{1/r} on the
/// right singular vectors of W. Satisfies tr(Omega^r) = 1.
inline TaskCovariance squared_schatten_omega_update(const Matrix& weights, double r) {
  if (!(r > 0.0)) throw ValidationError("r must be positive");
  if (weights.norm() == 0.0)
    throw ValidationError("zero weight matrix: squared Schatten update undefined");
  linalg::SymEig eig = linalg::sym_eig(weights.transpose() * weights);
  Eigen::Index m = eig.values.size();
  double denom = 0.0;  // sum_j sigma_j^{2r/(r+1)}
  for (Eigen::Index i = 0; i < m; ++i)
    denom += std::pow(std::max(eig.values[i], 0.0), r / (r + 1.0));
  double denom_root = std::pow(denom, 1.0 / r);
  Vector mu(m);
  for (Eigen::Index i = 0; i < m; ++i)
    mu[i] = std::pow(std::max(eig.values[i], 0.0), 1.0 / (r + 1.0)) / denom_root;
  Matrix omega = eig.vectors * mu.asDiagonal() * eig.vectors.transpose();
  return TaskCovariance{linalg::symmetrize(omega)};
}

struct UnifiedResult {
  TaskModel model;
  TaskCovariance omega;      // trace-normalized, for tuple storage
  TaskCovariance omega_raw;  // as produced by the final update
  std::vector<double> round_objectives;
  int rounds = 0;
};

/// Full objective value tracked across alternating rounds, with the same
/// ridged pseudoinverse the inner solver minimizes.
inline double unified_objective(const DatasetRefs& train, const TaskModel& model,
                                const TaskCovariance& omega, const RegularizerSpec& spec,
                                LossKind loss) {
  double value = empirical_loss(train, model, loss) +
                 coupling_penalty(model.weights, omega.omega, spec.lambda1,
                                  omega_ridge(omega.omega));
  if (spec.kind == RegularizerSpec::Kind::Schatten) {
    linalg::SymEig eig = linalg::sym_eig(omega.omega);
    double tr_r = 0.0;
    for (Eigen::Index i = 0; i < eig.values.size(); ++i)
      tr_r += std::pow(std::max(eig.values[i], 0.0), spec.r);
    value += spec.lambda2 * tr_r;
  }
  // FixedOmega and SquaredSchatten carry indicator g(.): zero on feasible input.
  return value;
}

/// Alternating minimization of the unified objective. FixedOmega delegates to
/// a single solve; Schatten families alternate the inner solve with the
/// matching closed-form Omega update until the relative objective change
/// drops below 1e-6 or 50 rounds.
inline UnifiedResult solve_unified(const DatasetRefs& train, const RegularizerSpec& spec,
                                   LossKind loss = LossKind::Logistic,
                                   const SolveOptions& options = {}) {
  spec.validate();
  const Eigen::Index m = static_cast<Eigen::Index>(train.size());

  if (spec.kind == RegularizerSpec::Kind::FixedOmega) {
    TaskCovariance omega{spec.materialize_fixed_omega(m)};
    GivenOmegaResult res = solve_given_omega(train, omega, spec.lambda1, loss, options);
    UnifiedResult out;
    out.model = std::move(res.model);
    out.omega_raw = omega;
    out.omega = omega.normalized();
    out.round_objectives = {res.info.objective};
    out.rounds = 1;
    return out;
  }

  constexpr int kMaxRounds = 50;
  constexpr double kRelTol = 1e-6;

  TaskCovariance omega{Matrix::Identity(m, m) / static_cast<double>(m)};
  TaskModel model;
  UnifiedResult out;
  double prev = 0.0;
  for (int round = 0; round < kMaxRounds; ++round) {
    GivenOmegaResult res = solve_given_omega(train, omega, spec.lambda1, loss, options,
                                             round == 0 ? nullptr : &model);
    model = std::move(res.model);
    omega = spec.kind == RegularizerSpec::Kind::Schatten
                ? schatten_omega_update(model.weights, spec.lambda1, spec.lambda2, spec.r)
                : squared_schatten_omega_update(model.weights, spec.r);

    double objective = unified_objective(train, model, omega, spec, loss);
    if (round > 0 && objective > prev + 1e-7 * std::max(1.0, std::abs(prev)))
      throw SolverError("alternating objective increased");
    out.round_objectives.push_back(objective);
    out.rounds = round + 1;
    bool done = round > 0 && std::abs(objective - prev) < kRelTol * std::max(1.0, std::abs(prev));
    prev = objective;
    if (done) break;
  }

  out.model = std::move(model);
  out.omega_raw = omega;
  out.omega = omega.normalized();
  return out;
}

/// Misclassification rate of task column t on one split; the decision rule is
/// sign(w.x + b) with 0 counted as +1.
inline double misclassification_rate(const TaskModel& model, Eigen::Index t,
                                     const LabeledDataset& ds) {
  if (ds.size() == 0) throw ValidationError("empty split");
  Vector z = ds.features.transpose() * model.weights.col(t);
  z.array() += model.biases[t];
  Eigen::Index wrong = 0;
  for (Eigen::Index j = 0; j < z.size(); ++j) {
    double pred = z[j] >= 0.0 ? 1.0 : -1.0;
    if (pred != ds.labels[j]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

inline std::vector<double> test_errors(const TaskModel& model, const MultitaskProblem& problem) {
  std::vector<double> errors(problem.task_count());
  for (std::size_t t = 0; t < problem.task_count(); ++t)
    errors[t] = misclassification_rate(model, static_cast<Eigen::Index>(t),
                                       problem.tasks[t].test);
  return errors;
}

inline const std::vector<double>& stl_ridge_grid() {
  static const std::vector<double> grid{1e-3, 1e-2, 1e-1, 1.0, 10.0};
  return grid;
}

struct StlResult {
  TaskModel model;
  std::vector<double> ridge;  // per-task coefficient picked on validation
};

/// Single-task baseline: per-task logistic + ridge solve, ridge coefficient
/// selected per task from a fixed logarithmic grid by validation error (ties
/// to the smaller coefficient).
inline StlResult stl_train(const MultitaskProblem& problem, const SolveOptions& options = {}) {
  problem.validate();
  const Eigen::Index d = problem.feature_dim();
  const Eigen::Index m = static_cast<Eigen::Index>(problem.task_count());
  StlResult out;
  out.model.weights.resize(d, m);
  out.model.biases.resize(m);
  out.ridge.resize(problem.task_count());

  TaskCovariance unit{Matrix::Identity(1, 1)};
  for (Eigen::Index t = 0; t < m; ++t) {
    const Task& task = problem.tasks[static_cast<std::size_t>(t)];
    DatasetRefs single{std::cref(task.train)};
    double best_err = std::numeric_limits<double>::infinity();
    for (double c : stl_ridge_grid()) {
      GivenOmegaResult res = solve_given_omega(single, unit, c, LossKind::Logistic, options);
      TaskModel candidate{res.model.weights, res.model.biases};
      double err = misclassification_rate(candidate, 0, task.validation);
      if (err < best_err) {
        best_err = err;
        out.model.weights.col(t) = candidate.weights.col(0);
        out.model.biases[t] = candidate.biases[0];
        out.ridge[static_cast<std::size_t>(t)] = c;
      }
    }
  }
  return out;
}

struct RelativeTestError {
  double value = 0.0;
  double mtl_mean = 0.0;
  double stl_mean = 0.0;
  // When the STL baseline has zero test error the ratio is reported against
  // a floor of 1/(total test points) instead, and flagged.
  bool stl_floored = false;
};

inline RelativeTestError relative_test_error(const TaskModel& mtl, const TaskModel& stl,
                                             const MultitaskProblem& problem) {
  const Eigen::Index d = problem.feature_dim();
  if (mtl.weights.rows() != d || stl.weights.rows() != d ||
      mtl.weights.cols() != static_cast<Eigen::Index>(problem.task_count()) ||
      stl.weights.cols() != static_cast<Eigen::Index>(problem.task_count()))
    throw ValidationError("model dimensions do not match problem");

  std::vector<double> mtl_err = test_errors(mtl, problem);
  std::vector<double> stl_err = test_errors(stl, problem);
  RelativeTestError out;
  Eigen::Index total_test = 0;
  for (std::size_t t = 0; t < problem.task_count(); ++t) {
    out.mtl_mean += mtl_err[t];
    out.stl_mean += stl_err[t];
    total_test += problem.tasks[t].test.size();
  }
  out.mtl_mean /= static_cast<double>(problem.task_count());
  out.stl_mean /= static_cast<double>(problem.task_count());
  if (out.stl_mean == 0.0) {
    out.stl_floored = true;
    out.value = out.mtl_mean * static_cast<double>(total_test);
  } else {
    out.value = out.mtl_mean / out.stl_mean;
  }
  return out;
}

}  // namespace l2mt::mtl_core
