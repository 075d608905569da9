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

#include "l2mt/types.hpp"

namespace l2mt::linalg {

inline Matrix symmetrize(const Matrix& s) { return 0.5 * (s + s.transpose()); }

struct SymEig {
  Vector values;   // ascending
  Matrix vectors;  // columns aligned with values
};

inline SymEig sym_eig(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrize(s));
  if (eig.info() != Eigen::Success) throw SolverError("eigendecomposition failed");
  return SymEig{eig.eigenvalues(), eig.eigenvectors()};
}

/// Spectral function of a symmetric matrix: V f(diag) V^T with eigenvalues
/// clamped at zero first.
template <typename F>
Matrix psd_spectral_apply(const Matrix& s, F&& f) {
  SymEig eig = sym_eig(s);
  Vector d(eig.values.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = f(std::max(eig.values[i], 0.0));
  return eig.vectors * d.asDiagonal() * eig.vectors.transpose();
}

inline Matrix psd_power(const Matrix& s, double p) {
  return psd_spectral_apply(s, [p](double v) { return v > 0.0 ? std::pow(v, p) : 0.0; });
}

/// Pseudoinverse of a PSD matrix. With ridge > 0 every clamped eigenvalue
/// gets the ridge added before inversion; with ridge == 0 eigenvalues below
/// a relative cutoff are dropped (exact pseudoinverse).
inline Matrix psd_pinv(const Matrix& s, double ridge = 0.0) {
  SymEig eig = sym_eig(s);
  double top = eig.values.size() ? std::max(eig.values.maxCoeff(), 0.0) : 0.0;
  double cutoff = 1e-12 * std::max(top, 1e-300);
  Vector d(eig.values.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    double v = std::max(eig.values[i], 0.0);
    if (ridge > 0.0)
      d[i] = 1.0 / (v + ridge);
    else
      d[i] = v > cutoff ? 1.0 / v : 0.0;
  }
  return eig.vectors * d.asDiagonal() * eig.vectors.transpose();
}

/// Singular values of W computed from the spectrum of W^T W.
inline Vector singular_values(const Matrix& w) {
  SymEig eig = sym_eig(w.transpose() * w);
  Vector sv(eig.values.size());
  for (Eigen::Index i = 0; i < sv.size(); ++i) sv[i] = std::sqrt(std::max(eig.values[i], 0.0));
  return sv;
}

/// Schatten a-norm: l_a norm of the singular values (a = 1 is the trace norm).
inline double schatten_norm(const Matrix& w, double a) {
  Vector sv = singular_values(w);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) acc += std::pow(sv[i], a);
  return std::pow(acc, 1.0 / a);
}

}  // namespace l2mt::linalg
