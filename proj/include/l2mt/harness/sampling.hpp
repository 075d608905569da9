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
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "l2mt/harness/config.hpp"
#include "l2mt/harness/ingest.hpp"
#include "l2mt/rng.hpp"
#include "l2mt/types.hpp"

// Multitask-problem sampling. Problems are described by compact manifests
// (class pairs for file datasets, cluster/sign descriptors for the synthetic
// generator) plus per-problem seeds, and materialized deterministically from
// the manifest alone, so a stored problem file reproduces byte-identical
// downstream artifacts.
namespace l2mt::harness {

struct TaskSpec {
  // File-backed: binary task distinguishing class_a (+1) from class_b (-1).
  int class_a = 0;
  int class_b = 0;
  // Synthetic: weight vector drawn around one of two cluster directions.
  int cluster = 0;
  bool negated = false;
};

struct ProblemManifest {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<TaskSpec> tasks;
};

struct ProblemSet {
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.3, 0.3, 0.4};
  std::string kind;  // dataset kind the manifests were sampled from
  std::vector<ProblemManifest> train;
  std::vector<ProblemManifest> test;
};

using ClassPair = std::pair<int, int>;

// ---------------------------------------------------------------------------
// File-backed sampling.

namespace detail {

inline ClassPair ordered(int a, int b) { return a < b ? ClassPair{a, b} : ClassPair{b, a}; }

inline std::vector<ProblemManifest> sample_file_manifests(
    const MulticlassDataset& dataset, int q, const ProblemsConfig& cfg, Rng& rng,
    const std::string& id_prefix, const std::set<ClassPair>* excluded,
    std::set<ClassPair>* used) {
  std::vector<int> classes = dataset.class_ids();
  if (classes.size() < 2) throw ValidationError("need at least 2 classes to sample tasks");
  const std::size_t max_pairs = classes.size() * (classes.size() - 1) / 2;

  std::vector<ProblemManifest> out;
  for (int p = 0; p < q; ++p) {
    ProblemManifest manifest;
    manifest.id = id_prefix + std::to_string(p);
    manifest.seed = mix_seed(rng.next_u64(), static_cast<std::uint64_t>(p));
    int m = rng.uniform_int(cfg.m_min, cfg.m_max);
    std::set<ClassPair> in_problem;
    int attempts = 0;
    while (static_cast<int>(manifest.tasks.size()) < m) {
      if (++attempts > 1000 * m)
        throw ValidationError("could not sample enough distinct class pairs; dataset has " +
                              std::to_string(max_pairs) + " pairs");
      int a = classes[rng.index(classes.size())];
      int b = classes[rng.index(classes.size())];
      if (a == b) continue;
      ClassPair pair = ordered(a, b);
      if (in_problem.count(pair)) continue;
      if (excluded && excluded->count(pair)) continue;
      in_problem.insert(pair);
      manifest.tasks.push_back(TaskSpec{pair.first, pair.second, 0, false});
    }
    if (used)
      for (const TaskSpec& t : manifest.tasks) used->insert(ordered(t.class_a, t.class_b));
    out.push_back(std::move(manifest));
  }
  return out;
}

inline void split_counts(Eigen::Index n, const std::array<double, 3>& fractions,
                         Eigen::Index& n_train, Eigen::Index& n_val) {
  n_train = static_cast<Eigen::Index>(std::floor(fractions[0] * static_cast<double>(n)));
  n_val = static_cast<Eigen::Index>(std::floor(fractions[1] * static_cast<double>(n)));
  if (n_train < 1 || n_val < 1 || n - n_train - n_val < 1)
    throw ValidationError("not enough data points for the configured split fractions");
}

inline LabeledDataset take_columns(const MulticlassDataset& dataset,
                                   const std::vector<Eigen::Index>& idx, std::size_t from,
                                   std::size_t to, int positive_class) {
  LabeledDataset out;
  out.features.resize(dataset.dim(), static_cast<Eigen::Index>(to - from));
  out.labels.resize(static_cast<Eigen::Index>(to - from));
  for (std::size_t i = from; i < to; ++i) {
    out.features.col(static_cast<Eigen::Index>(i - from)) = dataset.features.col(idx[i]);
    out.labels[static_cast<Eigen::Index>(i - from)] =
        dataset.labels[static_cast<std::size_t>(idx[i])] == positive_class ? 1.0 : -1.0;
  }
  return out;
}

}  // namespace detail

/// Materializes one binary task per class pair: pooled points of both classes
/// are shuffled with the task's derived seed and split by the fractions.
inline MultitaskProblem materialize_file_problem(const MulticlassDataset& dataset,
                                                 const ProblemManifest& manifest,
                                                 const std::array<double, 3>& fractions) {
  MultitaskProblem problem;
  problem.id = manifest.id;
  for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
    const TaskSpec& spec = manifest.tasks[t];
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < dataset.size(); ++j) {
      int label = dataset.labels[static_cast<std::size_t>(j)];
      if (label == spec.class_a || label == spec.class_b) idx.push_back(j);
    }
    if (idx.size() < 3)
      throw ValidationError("not enough data for class pair (" + std::to_string(spec.class_a) +
                            "," + std::to_string(spec.class_b) + ")");
    Rng rng(mix_seed(manifest.seed, static_cast<std::uint64_t>(t)));
    rng.shuffle(idx.begin(), idx.end());

    Eigen::Index n = static_cast<Eigen::Index>(idx.size());
    Eigen::Index n_train = 0, n_val = 0;
    detail::split_counts(n, fractions, n_train, n_val);
    Task task;
    task.train = detail::take_columns(dataset, idx, 0, static_cast<std::size_t>(n_train),
                                      spec.class_a);
    task.validation = detail::take_columns(dataset, idx, static_cast<std::size_t>(n_train),
                                           static_cast<std::size_t>(n_train + n_val),
                                           spec.class_a);
    task.test = detail::take_columns(dataset, idx, static_cast<std::size_t>(n_train + n_val),
                                     idx.size(), spec.class_a);
    problem.tasks.push_back(std::move(task));
  }
  problem.validate();
  return problem;
}

/// Samples train and test problem collections from a file-backed dataset.
/// The collections are exclusively different: no class pair appears in both.
inline ProblemSet sample_file_problem_set(const MulticlassDataset& dataset,
                                          const ProblemsConfig& cfg, std::uint64_t seed) {
  ProblemSet out;
  out.seed = seed;
  out.fractions = cfg.fractions;
  Rng rng(mix_seed(seed, 0x70726f62));
  std::set<ClassPair> train_pairs;
  out.train = detail::sample_file_manifests(dataset, cfg.q_train, cfg, rng, "train-", nullptr,
                                            &train_pairs);
  out.test = detail::sample_file_manifests(dataset, cfg.q_test, cfg, rng, "test-", &train_pairs,
                                           nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator: two clusters of related tasks.

/// Cluster directions shared by every problem generated from one seed.
struct SyntheticWorld {
  Matrix cluster_dirs;  // d x 2
  DatasetConfig cfg;
};

inline SyntheticWorld make_synthetic_world(const DatasetConfig& cfg, std::uint64_t seed) {
  SyntheticWorld world;
  world.cfg = cfg;
  Rng rng(mix_seed(seed, 0x776f726c));
  world.cluster_dirs.resize(cfg.dim, 2);
  for (int c = 0; c < 2; ++c) {
    Vector v(cfg.dim);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
    world.cluster_dirs.col(c) = cfg.cluster_scale * v / v.norm();
  }
  return world;
}

inline std::vector<ProblemManifest> sample_synthetic_manifests(int q, const ProblemsConfig& cfg,
                                                               Rng& rng,
                                                               const std::string& id_prefix,
                                                               const DatasetConfig& dataset) {
  std::vector<ProblemManifest> out;
  for (int p = 0; p < q; ++p) {
    ProblemManifest manifest;
    manifest.id = id_prefix + std::to_string(p);
    manifest.seed = mix_seed(rng.next_u64(), static_cast<std::uint64_t>(p));
    int m = rng.uniform_int(cfg.m_min, cfg.m_max);
    for (int t = 0; t < m; ++t) {
      TaskSpec spec;
      spec.cluster = static_cast<int>(rng.index(2));
      spec.negated = rng.uniform() < dataset.negate_prob;
      manifest.tasks.push_back(spec);
    }
    out.push_back(std::move(manifest));
  }
  return out;
}

namespace detail {

inline LabeledDataset synthetic_split(const Vector& w, int n, double label_noise, Rng& rng) {
  LabeledDataset out;
  out.features.resize(w.size(), n);
  out.labels.resize(n);
  for (int j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < w.size(); ++i) out.features(i, j) = rng.normal();
    double margin = w.dot(out.features.col(j));
    double label = margin >= 0.0 ? 1.0 : -1.0;
    if (rng.uniform() < label_noise) label = -label;
    out.labels[j] = label;
  }
  return out;
}

}  // namespace detail

inline MultitaskProblem materialize_synthetic_problem(const SyntheticWorld& world,
                                                      const ProblemManifest& manifest) {
  const DatasetConfig& cfg = world.cfg;
  MultitaskProblem problem;
  problem.id = manifest.id;
  for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
    const TaskSpec& spec = manifest.tasks[t];
    Rng rng(mix_seed(manifest.seed, static_cast<std::uint64_t>(t)));
    Vector w = world.cluster_dirs.col(spec.cluster);
    Vector noise(w.size());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
    w += cfg.weight_noise * noise;
    if (spec.negated) w = -w;

    Task task;
    task.train = detail::synthetic_split(w, cfg.train_per_task, cfg.label_noise, rng);
    task.validation = detail::synthetic_split(w, cfg.validation_per_task, cfg.label_noise, rng);
    task.test = detail::synthetic_split(w, cfg.test_per_task, cfg.label_noise, rng);
    problem.tasks.push_back(std::move(task));
  }
  problem.validate();
  return problem;
}

inline ProblemSet sample_synthetic_problem_set(const DatasetConfig& dataset,
                                               const ProblemsConfig& cfg, std::uint64_t seed) {
  ProblemSet out;
  out.seed = seed;
  out.fractions = cfg.fractions;
  out.kind = "synthetic_clusters";
  Rng rng(mix_seed(seed, 0x70726f62));
  out.train = sample_synthetic_manifests(cfg.q_train, cfg, rng, "train-", dataset);
  out.test = sample_synthetic_manifests(cfg.q_test, cfg, rng, "test-", dataset);
  return out;
}

/// Three-task probe problem: tasks 1 and 2 come from the two clusters, task 3
/// reuses task 2's features with every label negated. Its embedding equals
/// task 2's exactly, which is what drives the negative learned correlation.
inline MultitaskProblem make_mirrored_problem(const SyntheticWorld& world, std::uint64_t seed) {
  ProblemManifest manifest;
  manifest.id = "mirrored";
  manifest.seed = mix_seed(seed, 0x6d697272);
  manifest.tasks = {TaskSpec{0, 0, 0, false}, TaskSpec{0, 0, 1, false},
                    TaskSpec{0, 0, 1, false}};
  MultitaskProblem problem = materialize_synthetic_problem(world, manifest);
  Task mirrored = problem.tasks[1];
  mirrored.train.labels = -mirrored.train.labels;
  mirrored.validation.labels = -mirrored.validation.labels;
  mirrored.test.labels = -mirrored.test.labels;
  problem.tasks[2] = mirrored;
  return problem;
}

// ---------------------------------------------------------------------------
// Problem-set persistence ("l2mt-problems-v1") and materialization dispatch.

inline json problem_set_to_json(const ProblemSet& set) {
  auto manifest_to_json = [&](const ProblemManifest& m) {
    json jm;
    jm["id"] = m.id;
    jm["seed"] = m.seed;
    json tasks = json::array();
    for (const TaskSpec& t : m.tasks) {
      if (set.kind == "synthetic_clusters")
        tasks.push_back({{"cluster", t.cluster}, {"negated", t.negated}});
      else
        tasks.push_back({{"class_a", t.class_a}, {"class_b", t.class_b}});
    }
    jm["tasks"] = tasks;
    return jm;
  };
  json j;
  j["schema"] = "l2mt-problems-v1";
  j["seed"] = set.seed;
  j["kind"] = set.kind;
  j["fractions"] = set.fractions;
  json train = json::array(), test = json::array();
  for (const ProblemManifest& m : set.train) train.push_back(manifest_to_json(m));
  for (const ProblemManifest& m : set.test) test.push_back(manifest_to_json(m));
  j["train"] = train;
  j["test"] = test;
  return j;
}

inline ProblemSet problem_set_from_json(const json& j) {
  if (!j.contains("schema") || j.at("schema") != "l2mt-problems-v1")
    throw ValidationError("problem set: unknown schema");
  ProblemSet set;
  set.seed = j.at("seed").get<std::uint64_t>();
  set.kind = j.at("kind").get<std::string>();
  auto f = j.at("fractions").get<std::vector<double>>();
  if (f.size() != 3) throw ValidationError("problem set: fractions must have 3 entries");
  set.fractions = {f[0], f[1], f[2]};
  auto manifest_from_json = [&](const json& jm) {
    ProblemManifest m;
    m.id = jm.at("id").get<std::string>();
    m.seed = jm.at("seed").get<std::uint64_t>();
    for (const json& jt : jm.at("tasks")) {
      TaskSpec t;
      if (set.kind == "synthetic_clusters") {
        t.cluster = jt.at("cluster").get<int>();
        t.negated = jt.at("negated").get<bool>();
      } else {
        t.class_a = jt.at("class_a").get<int>();
        t.class_b = jt.at("class_b").get<int>();
      }
      m.tasks.push_back(t);
    }
    return m;
  };
  for (const json& jm : j.at("train")) set.train.push_back(manifest_from_json(jm));
  for (const json& jm : j.at("test")) set.test.push_back(manifest_from_json(jm));
  return set;
}

inline void save_problem_set(const ProblemSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << problem_set_to_json(set).dump(2) << '\n';
}

inline ProblemSet load_problem_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("problem set: ") + e.what());
  }
  return problem_set_from_json(j);
}

/// Holds whichever backing data the manifests need and materializes problems.
struct DatasetHandle {
  DatasetConfig cfg;
  MulticlassDataset file_data;  // csv / svmlight
  SyntheticWorld world;         // synthetic_clusters

  bool synthetic() const { return cfg.kind == "synthetic_clusters"; }
};

inline DatasetHandle open_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  DatasetHandle handle;
  handle.cfg = cfg;
  if (cfg.kind == "synthetic_clusters") {
    handle.world = make_synthetic_world(cfg, seed);
  } else {
    handle.file_data = ingest(cfg.path, format_from_string(cfg.kind));
  }
  return handle;
}

inline ProblemSet sample_problem_set(const DatasetHandle& handle, const ProblemsConfig& cfg,
                                     std::uint64_t seed) {
  if (handle.synthetic()) return sample_synthetic_problem_set(handle.cfg, cfg, seed);
  ProblemSet set = sample_file_problem_set(handle.file_data, cfg, seed);
  set.kind = handle.cfg.kind;
  return set;
}

inline MultitaskProblem materialize(const DatasetHandle& handle, const ProblemManifest& manifest,
                                    const std::array<double, 3>& fractions) {
  if (handle.synthetic()) return materialize_synthetic_problem(handle.world, manifest);
  return materialize_file_problem(handle.file_data, manifest, fractions);
}

inline std::vector<MultitaskProblem> materialize_all(const DatasetHandle& handle,
                                                     const std::vector<ProblemManifest>& manifests,
                                                     const std::array<double, 3>& fractions) {
  std::vector<MultitaskProblem> out;
  out.reserve(manifests.size());
  for (const ProblemManifest& m : manifests) out.push_back(materialize(handle, m, fractions));
  return out;
}

}  // namespace l2mt::harness
