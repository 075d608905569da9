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

#include <array>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "l2mt/mtl_core.hpp"
#include "l2mt/types.hpp"

namespace l2mt::harness {

using nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known) throw ValidationError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

struct DatasetConfig {
  std::string kind = "synthetic_clusters";  // csv | svmlight | synthetic_clusters
  std::string path;
  // Synthetic generator: tasks draw weight vectors from one of two cluster
  // directions (optionally sign-flipped) and label standard normal features.
  int dim = 12;
  int train_per_task = 30;
  int validation_per_task = 30;
  int test_per_task = 60;
  double cluster_scale = 2.5;
  double weight_noise = 0.3;
  double label_noise = 0.05;
  double negate_prob = 0.3;
};

struct ProblemsConfig {
  int q_train = 100;
  int q_test = 20;
  int m_min = 4;
  int m_max = 8;
  std::array<double, 3> fractions{0.3, 0.3, 0.4};  // train/validation/test
};

struct LgnnConfig {
  int layers = 2;
  int d_hat = 50;
  int k = 6;
  double lambda = 0.1;
};

struct TrainingConfig {
  int epochs = 100;
  double learning_rate = 0.01;
  bool use_alt_estimation = false;
  bool use_alt_link = false;
};

struct SolverConfig {
  std::string loss = "logistic";
  std::vector<double> lambda1_grid{1e-3, 1e-2, 1e-1, 1.0, 10.0};
  int threads = 0;  // 0: hardware concurrency
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string artifacts_dir = ".";
  DatasetConfig dataset;
  ProblemsConfig problems;
  std::vector<RegularizerSpec> zoo;
  LgnnConfig lgnn;
  TrainingConfig training;
  SolverConfig solver;

  mtl_core::LossKind loss_kind() const { return mtl_core::loss_from_string(solver.loss); }

  std::string artifact(const std::string& name) const {
    return artifacts_dir.empty() ? name : artifacts_dir + "/" + name;
  }
};

inline RegularizerSpec parse_zoo_entry(const json& j) {
  detail::reject_unknown_keys(j, {"variant", "r", "lambda1", "lambda2", "omega", "name"},
                              "zoo entry");
  RegularizerSpec spec;
  std::string variant = j.at("variant").get<std::string>();
  if (variant == "fixed_omega")
    spec.kind = RegularizerSpec::Kind::FixedOmega;
  else if (variant == "schatten")
    spec.kind = RegularizerSpec::Kind::Schatten;
  else if (variant == "squared_schatten")
    spec.kind = RegularizerSpec::Kind::SquaredSchatten;
  else
    throw ValidationError("unknown zoo variant: " + variant);
  if (j.contains("r")) spec.r = j.at("r").get<double>();
  if (j.contains("lambda1")) spec.lambda1 = j.at("lambda1").get<double>();
  if (j.contains("lambda2")) spec.lambda2 = j.at("lambda2").get<double>();
  if (j.contains("name")) spec.name = j.at("name").get<std::string>();
  if (j.contains("omega")) {
    const json& om = j.at("omega");
    if (om.is_string()) {
      if (om.get<std::string>() != "identity_over_m")
        throw ValidationError("unknown symbolic omega: " + om.get<std::string>());
      // Empty matrix stands for I/m sized at solve time.
    } else {
      auto rows = om.get<std::vector<std::vector<double>>>();
      Eigen::Index n = static_cast<Eigen::Index>(rows.size());
      spec.fixed_omega.resize(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != n)
          throw ValidationError("fixed omega matrix is not square");
        for (Eigen::Index c = 0; c < n; ++c)
          spec.fixed_omega(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
      }
    }
  }
  spec.validate();
  return spec;
}

inline json zoo_entry_to_json(const RegularizerSpec& spec) {
  json j;
  switch (spec.kind) {
    case RegularizerSpec::Kind::FixedOmega:
      j["variant"] = "fixed_omega";
      break;
    case RegularizerSpec::Kind::Schatten:
      j["variant"] = "schatten";
      break;
    case RegularizerSpec::Kind::SquaredSchatten:
      j["variant"] = "squared_schatten";
      break;
  }
  j["r"] = spec.r;
  j["lambda1"] = spec.lambda1;
  j["lambda2"] = spec.lambda2;
  if (!spec.name.empty()) j["name"] = spec.name;
  if (spec.kind == RegularizerSpec::Kind::FixedOmega) {
    if (spec.fixed_omega.size() == 0) {
      j["omega"] = "identity_over_m";
    } else {
      std::vector<std::vector<double>> rows;
      for (Eigen::Index i = 0; i < spec.fixed_omega.rows(); ++i) {
        std::vector<double> row;
        for (Eigen::Index c = 0; c < spec.fixed_omega.cols(); ++c)
          row.push_back(spec.fixed_omega(i, c));
        rows.push_back(std::move(row));
      }
      j["omega"] = rows;
    }
  }
  return j;
}

inline RunConfig parse_config(const json& j) {
  detail::reject_unknown_keys(
      j, {"seed", "artifacts_dir", "dataset", "problems", "zoo", "lgnn", "training", "solver"},
      "config");
  RunConfig cfg;
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("artifacts_dir")) cfg.artifacts_dir = j.at("artifacts_dir").get<std::string>();

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    detail::reject_unknown_keys(
        d,
        {"kind", "path", "dim", "train_per_task", "validation_per_task", "test_per_task",
         "cluster_scale", "weight_noise", "label_noise", "negate_prob"},
        "dataset");
    DatasetConfig& out = cfg.dataset;
    if (d.contains("kind")) out.kind = d.at("kind").get<std::string>();
    if (d.contains("path")) out.path = d.at("path").get<std::string>();
    if (d.contains("dim")) out.dim = d.at("dim").get<int>();
    if (d.contains("train_per_task")) out.train_per_task = d.at("train_per_task").get<int>();
    if (d.contains("validation_per_task"))
      out.validation_per_task = d.at("validation_per_task").get<int>();
    if (d.contains("test_per_task")) out.test_per_task = d.at("test_per_task").get<int>();
    if (d.contains("cluster_scale")) out.cluster_scale = d.at("cluster_scale").get<double>();
    if (d.contains("weight_noise")) out.weight_noise = d.at("weight_noise").get<double>();
    if (d.contains("label_noise")) out.label_noise = d.at("label_noise").get<double>();
    if (d.contains("negate_prob")) out.negate_prob = d.at("negate_prob").get<double>();
    if (out.kind != "csv" && out.kind != "svmlight" && out.kind != "synthetic_clusters")
      throw ValidationError("unknown dataset kind: " + out.kind);
    if ((out.kind == "csv" || out.kind == "svmlight") && out.path.empty())
      throw ValidationError("dataset path required for file-backed datasets");
  }

  if (j.contains("problems")) {
    const json& p = j.at("problems");
    detail::reject_unknown_keys(p, {"q_train", "q_test", "m_min", "m_max", "fractions"},
                                "problems");
    if (p.contains("q_train")) cfg.problems.q_train = p.at("q_train").get<int>();
    if (p.contains("q_test")) cfg.problems.q_test = p.at("q_test").get<int>();
    if (p.contains("m_min")) cfg.problems.m_min = p.at("m_min").get<int>();
    if (p.contains("m_max")) cfg.problems.m_max = p.at("m_max").get<int>();
    if (p.contains("fractions")) {
      auto f = p.at("fractions").get<std::vector<double>>();
      if (f.size() != 3) throw ValidationError("fractions must have 3 entries");
      cfg.problems.fractions = {f[0], f[1], f[2]};
    }
    double total = cfg.problems.fractions[0] + cfg.problems.fractions[1] +
                   cfg.problems.fractions[2];
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("fractions must sum to 1");
    if (cfg.problems.m_min < 1 || cfg.problems.m_max < cfg.problems.m_min)
      throw ValidationError("invalid task-count range");
  }

  if (j.contains("zoo"))
    for (const json& entry : j.at("zoo")) cfg.zoo.push_back(parse_zoo_entry(entry));

  if (j.contains("lgnn")) {
    const json& g = j.at("lgnn");
    detail::reject_unknown_keys(g, {"layers", "d_hat", "k", "lambda"}, "lgnn");
    if (g.contains("layers")) cfg.lgnn.layers = g.at("layers").get<int>();
    if (g.contains("d_hat")) cfg.lgnn.d_hat = g.at("d_hat").get<int>();
    if (g.contains("k")) cfg.lgnn.k = g.at("k").get<int>();
    if (g.contains("lambda")) cfg.lgnn.lambda = g.at("lambda").get<double>();
    if (cfg.lgnn.layers < 1 || cfg.lgnn.d_hat < 1 || cfg.lgnn.k < 1)
      throw ValidationError("invalid lgnn hyperparameters");
  }

  if (j.contains("training")) {
    const json& t = j.at("training");
    detail::reject_unknown_keys(
        t, {"epochs", "learning_rate", "use_alt_estimation", "use_alt_link"}, "training");
    if (t.contains("epochs")) cfg.training.epochs = t.at("epochs").get<int>();
    if (t.contains("learning_rate"))
      cfg.training.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("use_alt_estimation"))
      cfg.training.use_alt_estimation = t.at("use_alt_estimation").get<bool>();
    if (t.contains("use_alt_link")) cfg.training.use_alt_link = t.at("use_alt_link").get<bool>();
  }

  if (j.contains("solver")) {
    const json& s = j.at("solver");
    detail::reject_unknown_keys(s, {"loss", "lambda1_grid", "threads"}, "solver");
    if (s.contains("loss")) cfg.solver.loss = s.at("loss").get<std::string>();
    if (s.contains("lambda1_grid"))
      cfg.solver.lambda1_grid = s.at("lambda1_grid").get<std::vector<double>>();
    if (s.contains("threads")) cfg.solver.threads = s.at("threads").get<int>();
    mtl_core::loss_from_string(cfg.solver.loss);
    if (cfg.solver.lambda1_grid.empty())
      throw ValidationError("lambda1_grid must not be empty");
  }

  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  return parse_config(j);
}

// Semantic config echo stored inside artifacts; deliberately omits
// artifacts_dir so identical runs in different directories produce
// byte-identical files.
inline json config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  json d;
  d["kind"] = cfg.dataset.kind;
  if (!cfg.dataset.path.empty()) d["path"] = cfg.dataset.path;
  if (cfg.dataset.kind == "synthetic_clusters") {
    d["dim"] = cfg.dataset.dim;
    d["train_per_task"] = cfg.dataset.train_per_task;
    d["validation_per_task"] = cfg.dataset.validation_per_task;
    d["test_per_task"] = cfg.dataset.test_per_task;
    d["cluster_scale"] = cfg.dataset.cluster_scale;
    d["weight_noise"] = cfg.dataset.weight_noise;
    d["label_noise"] = cfg.dataset.label_noise;
    d["negate_prob"] = cfg.dataset.negate_prob;
  }
  j["dataset"] = d;
  j["problems"] = {{"q_train", cfg.problems.q_train},
                   {"q_test", cfg.problems.q_test},
                   {"m_min", cfg.problems.m_min},
                   {"m_max", cfg.problems.m_max},
                   {"fractions", cfg.problems.fractions}};
  json zoo = json::array();
  for (const RegularizerSpec& spec : cfg.zoo) zoo.push_back(zoo_entry_to_json(spec));
  j["zoo"] = zoo;
  j["lgnn"] = {{"layers", cfg.lgnn.layers},
               {"d_hat", cfg.lgnn.d_hat},
               {"k", cfg.lgnn.k},
               {"lambda", cfg.lgnn.lambda}};
  j["training"] = {{"epochs", cfg.training.epochs},
                   {"learning_rate", cfg.training.learning_rate},
                   {"use_alt_estimation", cfg.training.use_alt_estimation},
                   {"use_alt_link", cfg.training.use_alt_link}};
  j["solver"] = {{"loss", cfg.solver.loss},
                 {"lambda1_grid", cfg.solver.lambda1_grid},
                 {"threads", cfg.solver.threads}};
  return j;
}

}  // namespace l2mt::harness
