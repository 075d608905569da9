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

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "l2mt/harness/tuple_store.hpp"
#include "l2mt/meta_estimator.hpp"
#include "l2mt/types.hpp"

// Versioned JSON serialization of the learned meta-parameters
// ("l2mt-meta-v1"): shapes plus flattened row-major values, variant flags,
// and the training config that produced them.
namespace l2mt::harness {

inline json meta_params_to_json(const meta_estimator::MetaParams& params,
                                const json& training_config = json::object()) {
  json j;
  j["schema"] = "l2mt-meta-v1";
  j["variant"] = {{"estimation", params.use_alt_estimation ? "alt" : "primary"},
                  {"link", params.use_alt_link ? "alt" : "primary"}};
  json lg;
  lg["layers"] = params.lgnn.layers;
  lg["l1"] = detail::matrix_to_json(params.lgnn.l1);
  lg["beta1"] = std::vector<double>(params.lgnn.beta1.data(),
                                    params.lgnn.beta1.data() + params.lgnn.beta1.size());
  lg["l_shared"] = detail::matrix_to_json(params.lgnn.l_shared);
  lg["beta_shared"] =
      std::vector<double>(params.lgnn.beta_shared.data(),
                          params.lgnn.beta_shared.data() + params.lgnn.beta_shared.size());
  j["lgnn"] = lg;
  j["estimator"] = {
      {"alpha", std::vector<double>{params.est.alpha[0], params.est.alpha[1],
                                    params.est.alpha[2], params.est.alpha[3]}},
      {"gamma", std::vector<double>{params.est.gamma[0], params.est.gamma[1]}}};
  if (params.use_alt_estimation) {
    j["alt"] = {{"l", detail::matrix_to_json(params.alt.l)},
                {"beta", std::vector<double>(params.alt.beta.data(),
                                             params.alt.beta.data() + params.alt.beta.size())}};
  }
  j["training"] = training_config;
  return j;
}

inline meta_estimator::MetaParams meta_params_from_json(const json& j) {
  if (!j.contains("schema") || j.at("schema") != "l2mt-meta-v1")
    throw ValidationError("meta params: unknown schema");
  meta_estimator::MetaParams params;
  params.use_alt_estimation = j.at("variant").at("estimation").get<std::string>() == "alt";
  params.use_alt_link = j.at("variant").at("link").get<std::string>() == "alt";
  const json& lg = j.at("lgnn");
  params.lgnn.layers = lg.at("layers").get<int>();
  params.lgnn.l1 = detail::matrix_from_json(lg.at("l1"));
  auto b1 = lg.at("beta1").get<std::vector<double>>();
  params.lgnn.beta1 = Eigen::Map<const Vector>(b1.data(), static_cast<Eigen::Index>(b1.size()));
  params.lgnn.l_shared = detail::matrix_from_json(lg.at("l_shared"));
  auto bs = lg.at("beta_shared").get<std::vector<double>>();
  params.lgnn.beta_shared =
      Eigen::Map<const Vector>(bs.data(), static_cast<Eigen::Index>(bs.size()));
  auto alpha = j.at("estimator").at("alpha").get<std::vector<double>>();
  auto gamma = j.at("estimator").at("gamma").get<std::vector<double>>();
  if (alpha.size() != 4 || gamma.size() != 2)
    throw ValidationError("meta params: alpha/gamma have wrong sizes");
  params.est.alpha = Eigen::Vector4d(alpha[0], alpha[1], alpha[2], alpha[3]);
  params.est.gamma = Eigen::Vector2d(gamma[0], gamma[1]);
  if (params.use_alt_estimation) {
    params.alt.l = detail::matrix_from_json(j.at("alt").at("l"));
    auto ab = j.at("alt").at("beta").get<std::vector<double>>();
    params.alt.beta = Eigen::Map<const Vector>(ab.data(), static_cast<Eigen::Index>(ab.size()));
  }
  params.lgnn.validate();
  return params;
}

inline void save_meta_params(const meta_estimator::MetaParams& params, const std::string& path,
                             const json& training_config = json::object()) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path);
  out << meta_params_to_json(params, training_config).dump(2) << '\n';
}

inline meta_estimator::MetaParams load_meta_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("meta params: ") + e.what());
  }
  return meta_params_from_json(j);
}

}  // namespace l2mt::harness
