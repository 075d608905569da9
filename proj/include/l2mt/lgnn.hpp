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
#include <iostream>
#include <numeric>
#include <vector>

#include "l2mt/types.hpp"

// Layerwise graph neural network producing fixed-length task embeddings from
// a labeled dataset:
//
//   H_1 = ReLU(L_1^T X + beta_1 1^T)
//   H_i = ReLU(L_i^T X + H_{i-1} G + beta_i 1^T)   for 2 <= i <= s
//   e   = H_s 1 / n
//
// where G is the label-driven adjacency built from k-nearest neighborhoods.
// Layers 2..s share one (L, beta) pair.
namespace l2mt::lgnn {

/// n x n matrix with entries in {-1, 0, +1}: +1 for same-label pairs
/// (including the diagonal), -1 for differently labeled points where either
/// lies in the other's k-neighborhood, 0 otherwise.
struct GraphAdjacency {
  Matrix entries;
};

struct LgnnParams {
  Matrix l1;           // d x d_hat
  Vector beta1;        // d_hat
  Matrix l_shared;     // d x d_hat, layers 2..s
  Vector beta_shared;  // d_hat
  int layers = 2;      // s

  Eigen::Index d_hat() const { return l1.cols(); }
  Eigen::Index input_dim() const { return l1.rows(); }

  void validate() const {
    if (layers < 1) throw ValidationError("layer count must be >= 1");
    if (beta1.size() != l1.cols()) throw ValidationError("beta1 size != d_hat");
    if (layers >= 2) {
      if (l_shared.rows() != l1.rows() || l_shared.cols() != l1.cols())
        throw ValidationError("shared layer shape differs from layer 1");
      if (beta_shared.size() != l1.cols()) throw ValidationError("beta_shared size != d_hat");
    }
    if (!l1.allFinite() || !beta1.allFinite() ||
        (layers >= 2 && (!l_shared.allFinite() || !beta_shared.allFinite())))
      throw ValidationError("LGNN parameters contain non-finite entries");
  }
};

inline LgnnParams zero_params(Eigen::Index d, Eigen::Index d_hat, int layers) {
  LgnnParams p;
  p.l1 = Matrix::Zero(d, d_hat);
  p.beta1 = Vector::Zero(d_hat);
  p.l_shared = Matrix::Zero(d, d_hat);
  p.beta_shared = Vector::Zero(d_hat);
  p.layers = layers;
  return p;
}

/// Builds the label-driven adjacency. Neighborhoods use Euclidean distance,
/// exclude the point itself, and break distance ties by lower index. k >= n
/// is clamped to n-1 with a warning.
inline GraphAdjacency build_graph(const LabeledDataset& data, int k) {
  data.validate();
  if (k < 1) throw ValidationError("neighbor count must be >= 1");
  const Eigen::Index n = data.size();
  if (k >= n) {
    std::cerr << "l2mt: clamping k=" << k << " to " << (n - 1) << " (dataset has " << n
              << " points)\n";
    k = static_cast<int>(n) - 1;
  }

  // Pairwise squared distances.
  Vector sq = data.features.colwise().squaredNorm();
  Matrix dist2 = sq.replicate(1, n) + sq.transpose().replicate(n, 1) -
                 2.0 * data.features.transpose() * data.features;

  // neighbor(i, j) == true iff j is one of the k nearest neighbors of i.
  std::vector<std::vector<bool>> neighbor(static_cast<std::size_t>(n),
                                          std::vector<bool>(static_cast<std::size_t>(n), false));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      if (dist2(i, a) != dist2(i, b)) return dist2(i, a) < dist2(i, b);
      return a < b;
    });
    int taken = 0;
    for (Eigen::Index j : order) {
      if (j == i) continue;
      neighbor[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = true;
      if (++taken == k) break;
    }
  }

  GraphAdjacency graph;
  graph.entries = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (data.labels[i] == data.labels[j]) {
        graph.entries(i, j) = 1.0;
      } else if (neighbor[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ||
                 neighbor[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]) {
        graph.entries(i, j) = -1.0;
      }
    }
  }
  return graph;
}

/// Per-layer preactivations and activations kept for the backward pass.
struct ForwardCache {
  std::vector<Matrix> pre;  // s entries, each d_hat x n
  std::vector<Matrix> h;
};

inline Vector lgnn_forward(const LabeledDataset& data, const GraphAdjacency& graph,
                           const LgnnParams& params, ForwardCache* cache = nullptr) {
  params.validate();
  const Eigen::Index n = data.size();
  if (data.dim() != params.input_dim())
    throw ValidationError("dataset dimension does not match LGNN input dimension");
  if (graph.entries.rows() != n || graph.entries.cols() != n)
    throw ValidationError("graph size does not match dataset size");

  if (cache) {
    cache->pre.clear();
    cache->h.clear();
  }
  Matrix base1 = params.l1.transpose() * data.features;
  base1.colwise() += params.beta1;
  Matrix h = base1.cwiseMax(0.0);
  if (cache) {
    cache->pre.push_back(base1);
    cache->h.push_back(h);
  }
  if (params.layers >= 2) {
    Matrix base_shared = params.l_shared.transpose() * data.features;
    base_shared.colwise() += params.beta_shared;
    for (int layer = 2; layer <= params.layers; ++layer) {
      Matrix pre = base_shared + h * graph.entries;
      h = pre.cwiseMax(0.0);
      if (cache) {
        cache->pre.push_back(std::move(pre));
        cache->h.push_back(h);
      }
    }
  }
  return h.rowwise().mean();
}

/// Task embedding matrix: column j is the forward pass on task j's training
/// split with the shared parameters. Graphs are passed in so callers that
/// re-embed under changing parameters build them once.
inline Matrix embed_with_graphs(const DatasetRefs& train,
                                const std::vector<GraphAdjacency>& graphs,
                                const LgnnParams& params) {
  if (train.size() != graphs.size()) throw ValidationError("graph count != task count");
  Matrix e(params.d_hat(), static_cast<Eigen::Index>(train.size()));
  for (std::size_t t = 0; t < train.size(); ++t)
    e.col(static_cast<Eigen::Index>(t)) = lgnn_forward(train[t].get(), graphs[t], params);
  return e;
}

inline std::vector<GraphAdjacency> build_graphs(const DatasetRefs& train, int k) {
  std::vector<GraphAdjacency> graphs;
  graphs.reserve(train.size());
  for (const auto& ref : train) graphs.push_back(build_graph(ref.get(), k));
  return graphs;
}

inline Matrix embed_problem(const MultitaskProblem& problem, const LgnnParams& params, int k) {
  problem.validate();
  DatasetRefs train = problem.train_splits();
  return embed_with_graphs(train, build_graphs(train, k), params);
}

}  // namespace l2mt::lgnn
