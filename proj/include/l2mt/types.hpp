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

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace l2mt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Bad inputs or malformed files; maps to CLI exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical routine failed to meet its contract; maps to CLI exit code 2.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One split of one task. Columns of `features` are data points; labels are
/// +1/-1 for binary tasks.
struct LabeledDataset {
  Matrix features;  // d x n
  Vector labels;    // n

  Eigen::Index dim() const { return features.rows(); }
  Eigen::Index size() const { return features.cols(); }

  void validate() const {
    if (features.cols() < 1) throw ValidationError("dataset must contain at least one point");
    if (labels.size() != features.cols())
      throw ValidationError("label count does not match data point count");
    if (!features.allFinite() || !labels.allFinite())
      throw ValidationError("dataset contains non-finite entries");
    double lo = labels.minCoeff(), hi = labels.maxCoeff();
    for (Eigen::Index j = 0; j < labels.size(); ++j) {
      double y = labels[j];
      if (y != lo && y != hi) throw ValidationError("labels contain more than two distinct values");
    }
  }
};

struct Task {
  LabeledDataset train;
  LabeledDataset validation;
  LabeledDataset test;

  void validate() const {
    train.validate();
    validation.validate();
    test.validate();
    if (validation.dim() != train.dim() || test.dim() != train.dim())
      throw ValidationError("task splits disagree on feature dimension");
  }
};

using DatasetRefs = std::vector<std::reference_wrapper<const LabeledDataset>>;

struct MultitaskProblem {
  std::string id;
  std::vector<Task> tasks;

  std::size_t task_count() const { return tasks.size(); }
  Eigen::Index feature_dim() const { return tasks.empty() ? 0 : tasks.front().train.dim(); }

  DatasetRefs train_splits() const {
    DatasetRefs out;
    out.reserve(tasks.size());
    for (const Task& t : tasks) out.emplace_back(t.train);
    return out;
  }

  void validate() const {
    if (tasks.size() < 1) throw ValidationError("problem has no tasks");
    for (const Task& t : tasks) {
      t.validate();
      if (t.train.dim() != feature_dim())
        throw ValidationError("tasks disagree on feature dimension");
    }
  }
};

/// Linear models for all tasks of a problem: f_i(x) = weights.col(i).dot(x) + biases[i].
struct TaskModel {
  Matrix weights;  // d x m
  Vector biases;   // m

  void validate() const {
    if (biases.size() != weights.cols()) throw ValidationError("bias count != task count");
    if (!weights.allFinite() || !biases.allFinite())
      throw ValidationError("model contains non-finite entries");
  }
};

/// Symmetric PSD task covariance. Off-diagonal entries encode pairwise task
/// relations; trace-normalized copies are what tuple stores persist.
struct TaskCovariance {
  Matrix omega;  // m x m

  Eigen::Index tasks() const { return omega.rows(); }
  double trace() const { return omega.trace(); }

  TaskCovariance normalized() const {
    double tr = omega.trace();
    if (!(tr > 0.0)) throw ValidationError("task covariance has non-positive trace");
    return TaskCovariance{omega / tr};
  }

  /// Symmetry within 1e-10 and eigenvalues >= -1e-10, both scaled by the
  /// matrix magnitude so unnormalized covariances validate too.
  void validate() const {
    if (omega.rows() != omega.cols()) throw ValidationError("task covariance is not square");
    if (!omega.allFinite()) throw ValidationError("task covariance has non-finite entries");
    double scale = std::max(1.0, omega.cwiseAbs().maxCoeff());
    double asym = (omega - omega.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * scale) throw ValidationError("task covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (omega + omega.transpose()),
                                              Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-10 * scale)
      throw ValidationError("task covariance is not positive semidefinite");
  }
};

/// Which regularizer g(.) governs the task covariance in the unified
/// multitask objective.
struct RegularizerSpec {
  enum class Kind { FixedOmega, Schatten, SquaredSchatten };

  Kind kind = Kind::Schatten;
  double r = 1.0;        // Schatten exponent, > 0
  double lambda1 = 0.1;  // weight of the covariance-coupled ridge term
  double lambda2 = 1.0;  // weight of g(omega); unused by FixedOmega/SquaredSchatten
  // For FixedOmega: the covariance to hold fixed. An empty matrix stands for
  // I/m, sized when the task count is known.
  Matrix fixed_omega;
  std::string name;  // optional label from config

  std::string tag() const {
    if (!name.empty()) return name;
    auto fmt = [](double v) {
      std::string s = std::to_string(v);
      s.erase(s.find_last_not_of('0') + 1);
      if (!s.empty() && s.back() == '.') s.pop_back();
      return s;
    };
    switch (kind) {
      case Kind::FixedOmega:
        return "fixed_omega_l" + fmt(lambda1);
      case Kind::Schatten:
        return "schatten_r" + fmt(r) + "_l" + fmt(lambda1);
      case Kind::SquaredSchatten:
        return "squared_schatten_r" + fmt(r) + "_l" + fmt(lambda1);
    }
    return "unknown";
  }

  Matrix materialize_fixed_omega(Eigen::Index m) const {
    if (fixed_omega.size() == 0) return Matrix::Identity(m, m) / static_cast<double>(m);
    if (fixed_omega.rows() != m || fixed_omega.cols() != m)
      throw ValidationError("fixed omega dimension does not match task count");
    return fixed_omega;
  }

  void validate() const {
    if (!(lambda1 > 0.0)) throw ValidationError("lambda1 must be positive");
    if (kind == Kind::Schatten && !(lambda2 > 0.0))
      throw ValidationError("lambda2 must be positive");
    if (kind != Kind::FixedOmega && !(r > 0.0)) throw ValidationError("r must be positive");
  }
};

}  // namespace l2mt
