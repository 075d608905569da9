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

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "l2mt/harness/pipeline.hpp"
#include "l2mt/harness/selfcheck.hpp"

namespace {

// Seed precedence: --seed flag > L2MT_SEED environment variable > config.
void apply_seed(l2mt::harness::RunConfig& cfg, const std::optional<std::uint64_t>& flag_seed) {
  if (flag_seed) {
    cfg.seed = *flag_seed;
    return;
  }
  if (const char* env = std::getenv("L2MT_SEED")) {
    try {
      cfg.seed = std::stoull(env);
    } catch (...) {
      throw l2mt::ValidationError("L2MT_SEED is not an unsigned integer");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"l2mt: learn task covariances from multitask experience"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", config_path, "JSON run config");
    if (config_required) opt->required();
    sub->add_option("--seed", seed, "overrides L2MT_SEED and the config seed");
    sub->add_option("--out", out, "output path override");
  };

  CLI::App* gen_problems =
      app.add_subcommand("gen-problems", "sample train/test multitask problems");
  add_common(gen_problems, true);
  CLI::App* gen_tuples =
      app.add_subcommand("gen-tuples", "train the model zoo and record experience tuples");
  add_common(gen_tuples, true);
  CLI::App* train_meta =
      app.add_subcommand("train-meta", "fit the estimator and embeddings on the tuple store");
  add_common(train_meta, true);
  CLI::App* solve = app.add_subcommand(
      "solve", "run the test-time pipeline and the zoo baselines on the test problems");
  add_common(solve, true);
  CLI::App* report = app.add_subcommand("report", "write the relative-error CSV");
  add_common(report, true);
  CLI::App* selfcheck = app.add_subcommand("selfcheck", "run the oracle and invariant battery");
  add_common(selfcheck, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n\n" << app.help() << '\n';
    return 1;
  }

  try {
    if (selfcheck->parsed()) return l2mt::harness::selfcheck() ? 0 : 2;

    l2mt::harness::RunConfig cfg = l2mt::harness::load_config(config_path);
    apply_seed(cfg, seed);
    l2mt::harness::PipelinePaths paths = l2mt::harness::default_paths(cfg);

    if (gen_problems->parsed()) {
      std::string target = out.empty() ? paths.problems : out;
      l2mt::harness::ProblemSet set = l2mt::harness::cmd_gen_problems(cfg, target);
      std::cout << "wrote " << set.train.size() << " train and " << set.test.size()
                << " test problems to " << target << '\n';
    } else if (gen_tuples->parsed()) {
      std::string target = out.empty() ? paths.tuples : out;
      l2mt::harness::TupleStore store =
          l2mt::harness::cmd_gen_tuples(cfg, paths.problems, target);
      std::size_t usable = 0;
      for (const auto& t : store.tuples)
        if (!t.degenerate && t.error.empty()) ++usable;
      std::cout << "wrote " << store.tuples.size() << " tuples (" << usable << " usable) to "
                << target << '\n';
    } else if (train_meta->parsed()) {
      std::string target = out.empty() ? paths.meta : out;
      l2mt::meta_estimator::TrainResult result =
          l2mt::harness::cmd_train_meta(cfg, paths.problems, paths.tuples, target);
      std::cout << "trained for " << result.steps << " steps; best loss " << result.best_loss
                << "; wrote " << target << '\n';
    } else if (solve->parsed()) {
      std::string target = out.empty() ? paths.report_json : out;
      l2mt::harness::SolveReport rep =
          l2mt::harness::cmd_solve(cfg, paths.problems, paths.meta, target);
      for (const std::string& method : rep.methods)
        std::cout << method << " mean relative error: "
                  << l2mt::harness::method_aggregate(rep, method) << '\n';
      std::cout << "wrote " << target << '\n';
    } else if (report->parsed()) {
      std::string target = out.empty() ? paths.report_csv : out;
      l2mt::harness::cmd_report(paths.report_json, target);
      std::cout << "wrote " << target << '\n';
    }
  } catch (const l2mt::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
