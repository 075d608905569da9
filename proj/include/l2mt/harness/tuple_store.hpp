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

#include <atomic>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "l2mt/harness/config.hpp"
#include "l2mt/meta_estimator.hpp"
#include "l2mt/mtl_core.hpp"
#include "l2mt/types.hpp"

// Experience-tuple generation: every (problem, zoo spec) unit trains the
// multitask model, scores it against a freshly trained single-task baseline,
// and records the trace-normalized task covariance with the relative test
// error. Units run in parallel but results merge in manifest order, so the
// store is independent of the worker count.
namespace l2mt::harness {

struct TupleStore {
  json generation_config;
  std::vector<meta_estimator::ExperienceTuple> tuples;
};

namespace detail {

inline json matrix_to_json(const Matrix& m) {
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) values.push_back(m(i, j));
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"values", values}};
}

inline Matrix matrix_from_json(const json& j) {
  Eigen::Index rows = j.at("rows").get<Eigen::Index>();
  Eigen::Index cols = j.at("cols").get<Eigen::Index>();
  auto values = j.at("values").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(values.size()) != rows * cols)
    throw ValidationError("matrix value count does not match shape");
  Matrix m(rows, cols);
  std::size_t at = 0;
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = values[at++];
  return m;
}

}  // namespace detail

struct GenTuplesOptions {
  mtl_core::LossKind loss = mtl_core::LossKind::Logistic;
  int threads = 0;  // 0: hardware concurrency
};

inline TupleStore gen_tuples(const std::vector<MultitaskProblem>& problems,
                             const std::vector<RegularizerSpec>& zoo,
                             const GenTuplesOptions& options = {}) {
  if (zoo.empty()) throw ValidationError("zoo must not be empty");

  const std::size_t n_problems = problems.size();
  const std::size_t n_units = n_problems * zoo.size();
  std::vector<mtl_core::StlResult> stl(n_problems);
  std::vector<meta_estimator::ExperienceTuple> tuples(n_units);

  unsigned hw = std::thread::hardware_concurrency();
  std::size_t n_threads = options.threads > 0 ? static_cast<std::size_t>(options.threads)
                                              : std::max(1u, hw);
  n_threads = std::min(n_threads, std::max<std::size_t>(1, n_units));

  // Baselines first; they are shared by every spec of the same problem.
  {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < n_problems; i = next.fetch_add(1))
        stl[i] = mtl_core::stl_train(problems[i]);
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
  }

  {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t u = next.fetch_add(1); u < n_units; u = next.fetch_add(1)) {
        std::size_t p = u / zoo.size();
        const RegularizerSpec& spec = zoo[u % zoo.size()];
        const MultitaskProblem& problem = problems[p];
        meta_estimator::ExperienceTuple& tuple = tuples[u];
        tuple.problem_ref = problem.id;
        tuple.generator = spec.tag();
        try {
          DatasetRefs train = problem.train_splits();
          mtl_core::UnifiedResult fit = mtl_core::solve_unified(train, spec, options.loss);
          mtl_core::RelativeTestError rel =
              mtl_core::relative_test_error(fit.model, stl[p].model, problem);
          tuple.omega = fit.omega;
          tuple.o = rel.value;
          tuple.degenerate = rel.stl_floored || !(rel.value > 0.0);
        } catch (const std::exception& e) {
          tuple.error = e.what();
          tuple.degenerate = true;
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
  }

  TupleStore store;
  store.tuples = std::move(tuples);
  for (const auto& tuple : store.tuples) tuple.validate();
  return store;
}

// JSON-lines persistence: a header line with the schema tag and generation
// config, then one tuple per line.
inline void save_tuples(const TupleStore& store, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  json header{{"schema", "l2mt-tuples-v1"}, {"config", store.generation_config}};
  out << header.dump() << '\n';
  for (const auto& tuple : store.tuples) {
    json j;
    j["problem"] = tuple.problem_ref;
    j["generator"] = tuple.generator;
    j["o"] = tuple.o;
    j["degenerate"] = tuple.degenerate;
    if (!tuple.error.empty()) j["error"] = tuple.error;
    if (tuple.omega.omega.size() > 0) j["omega"] = detail::matrix_to_json(tuple.omega.omega);
    out << j.dump() << '\n';
  }
}

inline TupleStore load_tuples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path + ": empty tuple store");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": bad header: " + e.what());
  }
  if (!header.contains("schema") || header.at("schema") != "l2mt-tuples-v1")
    throw ValidationError(path + ": unknown tuple schema");

  TupleStore store;
  if (header.contains("config")) store.generation_config = header.at("config");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(path + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    meta_estimator::ExperienceTuple tuple;
    tuple.problem_ref = j.at("problem").get<std::string>();
    tuple.generator = j.value("generator", std::string{});
    tuple.o = j.at("o").get<double>();
    tuple.degenerate = j.value("degenerate", false);
    tuple.error = j.value("error", std::string{});
    if (j.contains("omega")) tuple.omega.omega = detail::matrix_from_json(j.at("omega"));
    tuple.validate();
    store.tuples.push_back(std::move(tuple));
  }
  return store;
}

}  // namespace l2mt::harness
