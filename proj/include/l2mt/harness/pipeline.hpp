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

#include <map>
#include <string>
#include <vector>

#include "l2mt/harness/config.hpp"
#include "l2mt/harness/meta_io.hpp"
#include "l2mt/harness/run.hpp"
#include "l2mt/harness/sampling.hpp"
#include "l2mt/harness/tuple_store.hpp"
#include "l2mt/rng.hpp"

// End-to-end pipeline stages shared by the CLI subcommands and the test
// suites. Every stage reads and writes the standard artifact files under the
// config's artifacts_dir:
//
//   problems.json  ->  tuples.jsonl  ->  meta.json  ->  report.json  ->  report.csv
namespace l2mt::harness {

struct PipelinePaths {
  std::string problems;
  std::string tuples;
  std::string meta;
  std::string report_json;
  std::string report_csv;
};

inline PipelinePaths default_paths(const RunConfig& cfg) {
  return PipelinePaths{cfg.artifact("problems.json"), cfg.artifact("tuples.jsonl"),
                       cfg.artifact("meta.json"), cfg.artifact("report.json"),
                       cfg.artifact("report.csv")};
}

inline ProblemSet cmd_gen_problems(const RunConfig& cfg, const std::string& out_path) {
  DatasetHandle handle = open_dataset(cfg.dataset, cfg.seed);
  ProblemSet set = sample_problem_set(handle, cfg.problems, cfg.seed);
  save_problem_set(set, out_path);
  return set;
}

inline TupleStore cmd_gen_tuples(const RunConfig& cfg, const std::string& problems_path,
                                 const std::string& out_path) {
  if (cfg.zoo.empty()) throw ValidationError("config zoo is empty");
  DatasetHandle handle = open_dataset(cfg.dataset, cfg.seed);
  ProblemSet set = load_problem_set(problems_path);
  std::vector<MultitaskProblem> problems = materialize_all(handle, set.train, set.fractions);
  GenTuplesOptions options;
  options.loss = cfg.loss_kind();
  options.threads = cfg.solver.threads;
  TupleStore store = gen_tuples(problems, cfg.zoo, options);
  store.generation_config = config_to_json(cfg);
  save_tuples(store, out_path);
  return store;
}

/// Materialized training problems with tuples bound to them. The problems and
/// bindings own the memory the tuples point into.
struct TrainingSetup {
  std::vector<MultitaskProblem> problems;
  std::vector<meta_estimator::BoundProblem> bindings;
  std::vector<meta_estimator::TrainingTuple> tuples;
  std::size_t excluded = 0;  // degenerate or failed tuples left out of training
};

inline TrainingSetup build_training_setup(const DatasetHandle& handle, const ProblemSet& set,
                                          const TupleStore& store, int k) {
  TrainingSetup setup;
  setup.problems = materialize_all(handle, set.train, set.fractions);
  setup.bindings.reserve(setup.problems.size());
  std::map<std::string, std::size_t> binding_index;
  for (std::size_t i = 0; i < setup.problems.size(); ++i) {
    setup.bindings.push_back(meta_estimator::bind_problem(setup.problems[i], k));
    binding_index[setup.problems[i].id] = i;
  }
  for (const meta_estimator::ExperienceTuple& tuple : store.tuples) {
    if (tuple.degenerate || !tuple.error.empty()) {
      ++setup.excluded;
      continue;
    }
    auto it = binding_index.find(tuple.problem_ref);
    if (it == binding_index.end())
      throw ValidationError("tuple references unknown problem " + tuple.problem_ref);
    setup.tuples.push_back(meta_estimator::TrainingTuple{&setup.bindings[it->second],
                                                         tuple.omega.omega, tuple.o});
  }
  return setup;
}

inline meta_estimator::TrainConfig train_config_from(const RunConfig& cfg) {
  meta_estimator::TrainConfig tc;
  tc.epochs = cfg.training.epochs;
  tc.seed = mix_seed(cfg.seed, 0x6d657461);  // dedicated training stream
  tc.learning_rate = cfg.training.learning_rate;
  tc.lambda = cfg.lgnn.lambda;
  tc.d_hat = cfg.lgnn.d_hat;
  tc.layers = cfg.lgnn.layers;
  tc.use_alt_estimation = cfg.training.use_alt_estimation;
  tc.use_alt_link = cfg.training.use_alt_link;
  return tc;
}

inline meta_estimator::TrainResult cmd_train_meta(const RunConfig& cfg,
                                                  const std::string& problems_path,
                                                  const std::string& tuples_path,
                                                  const std::string& out_path) {
  DatasetHandle handle = open_dataset(cfg.dataset, cfg.seed);
  ProblemSet set = load_problem_set(problems_path);
  TupleStore store = load_tuples(tuples_path);
  TrainingSetup setup = build_training_setup(handle, set, store, cfg.lgnn.k);
  if (setup.tuples.empty()) throw ValidationError("no usable tuples for training");

  meta_estimator::TrainConfig tc = train_config_from(cfg);
  meta_estimator::TrainResult result =
      meta_estimator::train_meta(setup.tuples, setup.problems.front().feature_dim(), tc);

  json training_echo;
  training_echo["epochs"] = tc.epochs;
  training_echo["seed"] = tc.seed;
  training_echo["learning_rate"] = tc.learning_rate;
  training_echo["lambda"] = tc.lambda;
  training_echo["k"] = cfg.lgnn.k;
  training_echo["tuples_used"] = setup.tuples.size();
  training_echo["tuples_excluded"] = setup.excluded;
  training_echo["best_loss"] = result.best_loss;
  training_echo["final_loss"] = result.final_loss;
  save_meta_params(result.params, out_path, training_echo);
  return result;
}

inline SolveReport cmd_solve(const RunConfig& cfg, const std::string& problems_path,
                             const std::string& meta_path, const std::string& out_path) {
  DatasetHandle handle = open_dataset(cfg.dataset, cfg.seed);
  ProblemSet set = load_problem_set(problems_path);
  meta_estimator::MetaParams meta = load_meta_params(meta_path);
  std::vector<MultitaskProblem> problems = materialize_all(handle, set.test, set.fractions);
  SolveReport report = evaluate_methods(problems, meta, cfg);
  save_solve_report(report, out_path);
  return report;
}

inline void cmd_report(const std::string& report_json_path, const std::string& out_path) {
  SolveReport report = load_solve_report(report_json_path);
  write_report_csv(report, out_path);
}

}  // namespace l2mt::harness
