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
#include <charconv>
#include <cmath>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "l2mt/harness/config.hpp"
#include "l2mt/harness/tuple_store.hpp"
#include "l2mt/lgnn.hpp"
#include "l2mt/meta_estimator.hpp"
#include "l2mt/mtl_core.hpp"
#include "l2mt/omega_solver.hpp"
#include "l2mt/types.hpp"

// Test-time pipeline: embed the problem, recover the task covariance from the
// learned estimator, tune lambda1 on validation, solve the downstream
// multitask problem, and score against a freshly trained single-task
// baseline. Also evaluates the fixed zoo models on the same problems for the
// comparison report.
namespace l2mt::harness {

struct TestReport {
  std::string problem_id;
  Matrix omega;        // recovered task covariance
  Matrix correlation;  // derived from omega
  double rho = 0.0;
  double chosen_lambda1 = 0.0;
  std::vector<double> mtl_task_errors;
  std::vector<double> stl_task_errors;
  double relative_error = 0.0;
  bool stl_floored = false;
  std::string failed_stage;  // empty on success
};

inline Matrix correlation_from_covariance(const Matrix& omega) {
  Matrix corr = Matrix::Zero(omega.rows(), omega.cols());
  for (Eigen::Index i = 0; i < omega.rows(); ++i) {
    for (Eigen::Index j = 0; j < omega.cols(); ++j) {
      double denom = std::sqrt(std::max(omega(i, i), 0.0) * std::max(omega(j, j), 0.0));
      corr(i, j) = denom > 1e-300 ? omega(i, j) / denom : 0.0;
    }
  }
  return corr;
}

/// Full pipeline on one test problem. Stages that throw are recorded in
/// `failed_stage` and leave the remaining fields at their defaults.
inline TestReport run_test(const MultitaskProblem& problem,
                           const meta_estimator::MetaParams& meta, const RunConfig& config,
                           const mtl_core::StlResult* stl_baseline = nullptr) {
  TestReport report;
  report.problem_id = problem.id;
  std::string stage = "embed";
  try {
    Matrix embeddings = lgnn::embed_problem(problem, meta.lgnn, config.lgnn.k);

    stage = "build_phi";
    omega_solver::SpectralProblem spectral =
        meta.use_alt_estimation
            ? omega_solver::build_phi_alt(embeddings, meta.est, meta.alt)
            : omega_solver::build_phi(embeddings, meta.est);
    report.rho = spectral.rho;

    stage = "solve_omega";
    TaskCovariance omega = omega_solver::solve_omega(spectral);
    report.omega = omega.omega;
    report.correlation = correlation_from_covariance(omega.omega);

    stage = "lambda1_grid";
    DatasetRefs train = problem.train_splits();
    mtl_core::LossKind loss = config.loss_kind();
    TaskModel best_model;
    double best_val = std::numeric_limits<double>::infinity();
    for (double lambda1 : config.solver.lambda1_grid) {
      mtl_core::GivenOmegaResult fit =
          mtl_core::solve_given_omega(train, omega, lambda1, loss);
      double val_err = 0.0;
      for (std::size_t t = 0; t < problem.task_count(); ++t)
        val_err += mtl_core::misclassification_rate(fit.model, static_cast<Eigen::Index>(t),
                                                    problem.tasks[t].validation);
      val_err /= static_cast<double>(problem.task_count());
      if (val_err < best_val) {
        best_val = val_err;
        best_model = fit.model;
        report.chosen_lambda1 = lambda1;
      }
    }

    stage = "test_eval";
    mtl_core::StlResult stl_local;
    if (!stl_baseline) {
      stl_local = mtl_core::stl_train(problem);
      stl_baseline = &stl_local;
    }
    mtl_core::RelativeTestError rel =
        mtl_core::relative_test_error(best_model, stl_baseline->model, problem);
    report.mtl_task_errors = mtl_core::test_errors(best_model, problem);
    report.stl_task_errors = mtl_core::test_errors(stl_baseline->model, problem);
    report.relative_error = rel.value;
    report.stl_floored = rel.stl_floored;
  } catch (const std::exception& e) {
    report.failed_stage = stage + ": " + e.what();
  }
  return report;
}

/// Scores of one method on one problem.
struct MethodScore {
  std::string problem_id;
  std::vector<double> mtl_task_errors;
  double relative_error = 0.0;
  bool stl_floored = false;
  std::string error;
};

struct SolveReport {
  std::vector<std::string> methods;     // "l2mt" first, then zoo tags in config order
  std::vector<std::string> problem_ids;
  std::vector<TestReport> l2mt;                      // per problem
  std::vector<std::vector<MethodScore>> zoo_scores;  // [zoo index][problem]
  std::vector<std::vector<double>> stl_task_errors;  // per problem
};

/// Average relative test error of a method: the ratio of its mean test error
/// over all tasks of all problems to the single-task baseline's.
inline double aggregate_relative_error(const std::vector<std::vector<double>>& mtl_errors,
                                       const std::vector<std::vector<double>>& stl_errors) {
  double mtl_mean = 0.0, stl_mean = 0.0;
  std::size_t problems = mtl_errors.size();
  std::size_t total_tasks = 0;
  for (std::size_t p = 0; p < problems; ++p) {
    double mtl_p = 0.0, stl_p = 0.0;
    for (double e : mtl_errors[p]) mtl_p += e;
    for (double e : stl_errors[p]) stl_p += e;
    total_tasks += stl_errors[p].size();
    mtl_mean += mtl_p / static_cast<double>(mtl_errors[p].size());
    stl_mean += stl_p / static_cast<double>(stl_errors[p].size());
  }
  mtl_mean /= static_cast<double>(problems);
  stl_mean /= static_cast<double>(problems);
  if (stl_mean == 0.0) return mtl_mean * static_cast<double>(total_tasks);
  return mtl_mean / stl_mean;
}

/// Evaluates the learned pipeline and every zoo model on the test problems.
/// Problems are processed in parallel; outputs are merged in problem order.
inline SolveReport evaluate_methods(const std::vector<MultitaskProblem>& problems,
                                    const meta_estimator::MetaParams& meta,
                                    const RunConfig& config) {
  SolveReport report;
  report.methods.push_back("l2mt");
  for (const RegularizerSpec& spec : config.zoo) report.methods.push_back(spec.tag());
  report.l2mt.resize(problems.size());
  report.zoo_scores.assign(config.zoo.size(), std::vector<MethodScore>(problems.size()));
  report.stl_task_errors.resize(problems.size());
  for (const MultitaskProblem& p : problems) report.problem_ids.push_back(p.id);

  mtl_core::LossKind loss = config.loss_kind();
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t n_threads = config.solver.threads > 0
                              ? static_cast<std::size_t>(config.solver.threads)
                              : std::max(1u, hw);
  n_threads = std::min(n_threads, std::max<std::size_t>(1, problems.size()));

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t p = next.fetch_add(1); p < problems.size(); p = next.fetch_add(1)) {
      const MultitaskProblem& problem = problems[p];
      mtl_core::StlResult stl = mtl_core::stl_train(problem);
      report.stl_task_errors[p] = mtl_core::test_errors(stl.model, problem);
      report.l2mt[p] = run_test(problem, meta, config, &stl);
      for (std::size_t z = 0; z < config.zoo.size(); ++z) {
        MethodScore& score = report.zoo_scores[z][p];
        score.problem_id = problem.id;
        try {
          mtl_core::UnifiedResult fit =
              mtl_core::solve_unified(problem.train_splits(), config.zoo[z], loss);
          mtl_core::RelativeTestError rel =
              mtl_core::relative_test_error(fit.model, stl.model, problem);
          score.mtl_task_errors = mtl_core::test_errors(fit.model, problem);
          score.relative_error = rel.value;
          score.stl_floored = rel.stl_floored;
        } catch (const std::exception& e) {
          score.error = e.what();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  return report;
}

inline double method_aggregate(const SolveReport& report, const std::string& method) {
  std::vector<std::vector<double>> mtl;
  std::vector<std::vector<double>> stl;
  for (std::size_t p = 0; p < report.problem_ids.size(); ++p) {
    const std::vector<double>* errors = nullptr;
    if (method == "l2mt") {
      if (report.l2mt[p].failed_stage.empty()) errors = &report.l2mt[p].mtl_task_errors;
    } else {
      for (std::size_t z = 0; z < report.zoo_scores.size(); ++z)
        if (report.methods[z + 1] == method && report.zoo_scores[z][p].error.empty())
          errors = &report.zoo_scores[z][p].mtl_task_errors;
    }
    if (!errors || errors->empty()) continue;
    mtl.push_back(*errors);
    stl.push_back(report.stl_task_errors[p]);
  }
  if (mtl.empty()) return std::numeric_limits<double>::quiet_NaN();
  return aggregate_relative_error(mtl, stl);
}

// ---------------------------------------------------------------------------
// Persistence.

inline json test_report_to_json(const TestReport& r) {
  json j;
  j["problem"] = r.problem_id;
  if (!r.failed_stage.empty()) {
    j["failed_stage"] = r.failed_stage;
    return j;
  }
  j["omega"] = detail::matrix_to_json(r.omega);
  j["correlation"] = detail::matrix_to_json(r.correlation);
  j["rho"] = r.rho;
  j["lambda1"] = r.chosen_lambda1;
  j["mtl_task_errors"] = r.mtl_task_errors;
  j["stl_task_errors"] = r.stl_task_errors;
  j["relative_error"] = r.relative_error;
  j["stl_floored"] = r.stl_floored;
  return j;
}

inline TestReport test_report_from_json(const json& j) {
  TestReport r;
  r.problem_id = j.at("problem").get<std::string>();
  if (j.contains("failed_stage")) {
    r.failed_stage = j.at("failed_stage").get<std::string>();
    return r;
  }
  r.omega = detail::matrix_from_json(j.at("omega"));
  r.correlation = detail::matrix_from_json(j.at("correlation"));
  r.rho = j.at("rho").get<double>();
  r.chosen_lambda1 = j.at("lambda1").get<double>();
  r.mtl_task_errors = j.at("mtl_task_errors").get<std::vector<double>>();
  r.stl_task_errors = j.at("stl_task_errors").get<std::vector<double>>();
  r.relative_error = j.at("relative_error").get<double>();
  r.stl_floored = j.at("stl_floored").get<bool>();
  return r;
}

inline json solve_report_to_json(const SolveReport& report) {
  json j;
  j["schema"] = "l2mt-report-v1";
  j["methods"] = report.methods;
  j["problems"] = report.problem_ids;
  json l2mt = json::array();
  for (const TestReport& r : report.l2mt) l2mt.push_back(test_report_to_json(r));
  j["l2mt"] = l2mt;
  json zoo = json::array();
  for (const auto& scores : report.zoo_scores) {
    json per_problem = json::array();
    for (const MethodScore& s : scores) {
      json js;
      js["problem"] = s.problem_id;
      if (!s.error.empty()) {
        js["error"] = s.error;
      } else {
        js["mtl_task_errors"] = s.mtl_task_errors;
        js["relative_error"] = s.relative_error;
        js["stl_floored"] = s.stl_floored;
      }
      per_problem.push_back(js);
    }
    zoo.push_back(per_problem);
  }
  j["zoo"] = zoo;
  json stl = json::array();
  for (const auto& errors : report.stl_task_errors) stl.push_back(errors);
  j["stl_task_errors"] = stl;
  return j;
}

inline SolveReport solve_report_from_json(const json& j) {
  if (!j.contains("schema") || j.at("schema") != "l2mt-report-v1")
    throw ValidationError("solve report: unknown schema");
  SolveReport report;
  report.methods = j.at("methods").get<std::vector<std::string>>();
  report.problem_ids = j.at("problems").get<std::vector<std::string>>();
  for (const json& r : j.at("l2mt")) report.l2mt.push_back(test_report_from_json(r));
  for (const json& per_problem : j.at("zoo")) {
    std::vector<MethodScore> scores;
    for (const json& js : per_problem) {
      MethodScore s;
      s.problem_id = js.at("problem").get<std::string>();
      if (js.contains("error")) {
        s.error = js.at("error").get<std::string>();
      } else {
        s.mtl_task_errors = js.at("mtl_task_errors").get<std::vector<double>>();
        s.relative_error = js.at("relative_error").get<double>();
        s.stl_floored = js.at("stl_floored").get<bool>();
      }
      scores.push_back(std::move(s));
    }
    report.zoo_scores.push_back(std::move(scores));
  }
  for (const json& errors : j.at("stl_task_errors"))
    report.stl_task_errors.push_back(errors.get<std::vector<double>>());
  return report;
}

inline void save_solve_report(const SolveReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << solve_report_to_json(report).dump(2) << '\n';
}

inline SolveReport load_solve_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("solve report: ") + e.what());
  }
  return solve_report_from_json(j);
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

/// CSV with one (problem_id, method, relative_error) row per evaluation plus
/// summary rows (problem_id "mean") carrying each method's average relative
/// test error.
inline void write_report_csv(const SolveReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << "problem_id,method,relative_error\n";
  for (std::size_t p = 0; p < report.problem_ids.size(); ++p) {
    if (report.l2mt[p].failed_stage.empty())
      out << report.problem_ids[p] << ",l2mt," << format_double(report.l2mt[p].relative_error)
          << '\n';
    for (std::size_t z = 0; z < report.zoo_scores.size(); ++z) {
      const MethodScore& s = report.zoo_scores[z][p];
      if (s.error.empty())
        out << report.problem_ids[p] << ',' << report.methods[z + 1] << ','
            << format_double(s.relative_error) << '\n';
    }
  }
  for (const std::string& method : report.methods)
    out << "mean," << method << ',' << format_double(method_aggregate(report, method)) << '\n';
}

}  // namespace l2mt::harness
