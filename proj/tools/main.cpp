// Copyright 2026 The HetAttr Authors. All Rights Reserved.
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

#include <chrono>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

using namespace hetattr;
using namespace hetattr::cli;

const std::vector<std::string> kModes = {"pos", "full", "abs"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-corrected attention attribution for two-source transformers"};
  app.set_version_flag("--version", HETATTR_VERSION);
  app.require_subcommand(1);

  ExplainOptions explain;
  std::string explain_mode = "pos";
  std::string explain_out;
  auto* explain_cmd = app.add_subcommand("explain", "Saliency maps and heatmaps for one trace");
  explain_cmd->add_option("trace", explain.trace, "trace file (.xatr)")->required();
  explain_cmd->add_option("--mode", explain_mode, "gradient correction: pos, full or abs")
      ->check(CLI::IsMember(kModes));
  explain_cmd->add_flag("--noise-link", explain.noise_link, "renormalize the flagged encoder stream");
  explain_cmd->add_option("--out", explain_out, "output directory");
  explain_cmd->add_option("--upsample", explain.upsample, "heatmap pixels per patch side");

  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-fixtures", "Write the planted fixture suite");
  gen_cmd->add_option("--seed", gen_seed, "seed for every random draw");
  gen_cmd->add_option("--out", gen_out, "output directory");

  EvalSegOptions seg;
  std::string seg_mode = "pos";
  std::string seg_out;
  auto* seg_cmd = app.add_subcommand("eval-seg", "Mask AP/AR on the planted segmentation suite");
  seg_cmd->add_option("fixtures", seg.fixtures, "fixture directory from gen-fixtures")->required();
  seg_cmd->add_option("--mode", seg_mode, "gradient correction: pos, full or abs")
      ->check(CLI::IsMember(kModes));
  seg_cmd->add_flag("--noise-link,--noised", seg.noise_link, "apply the noise link");
  seg_cmd->add_option("-k,--scale", seg.scales, "Otsu threshold multipliers (default 1.0 and 0.3)");
  seg_cmd->add_option("--iou", seg.iou_min, "minimum IoU for a match");
  seg_cmd->add_option("--out", seg_out, "write seg_report.json and a manifest here");

  EvalPerturbOptions perturb;
  std::string perturb_mode = "pos";
  std::string perturb_out;
  auto* perturb_cmd = app.add_subcommand("eval-perturb", "Positive/negative perturbation curves");
  perturb_cmd->add_option("fixtures", perturb.fixtures, "fixture directory from gen-fixtures")->required();
  perturb_cmd->add_option("--mode", perturb_mode, "gradient correction: pos, full or abs")
      ->check(CLI::IsMember(kModes));
  perturb_cmd->add_option("--seed", perturb.seed, "seed of the random-score baseline");
  perturb_cmd->add_option("--out", perturb_out, "write perturb_report.json and a manifest here");

  std::string selftest_fixtures;
  auto* selftest_cmd = app.add_subcommand("selftest", "Numerical self-checks");
  selftest_cmd->add_option("--fixtures", selftest_fixtures, "also verify every trace under this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*explain_cmd) {
      explain.mode = parse_correction_mode(explain_mode);
      explain.out = explain_out.empty() ? default_out_dir("explain") : fs::path(explain_out);
      const auto result = cmd_explain(explain);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
      for (const auto& f : result.files) std::cout << (explain.out / f).string() << "\n";
    } else if (*gen_cmd) {
      const fs::path out = gen_out.empty() ? default_out_dir("fixtures") : fs::path(gen_out);
      const auto result = cmd_gen_fixtures(gen_seed, out);
      std::cout << "wrote " << result.files.size() << " files to " << out.string() << "\n";
    } else if (*seg_cmd) {
      seg.mode = parse_correction_mode(seg_mode);
      seg.out = seg_out;
      print_seg_table(std::cout, cmd_eval_seg(seg));
    } else if (*perturb_cmd) {
      perturb.mode = parse_correction_mode(perturb_mode);
      perturb.out = perturb_out;
      print_perturb_report(std::cout, cmd_eval_perturb(perturb));
    } else if (*selftest_cmd) {
      const auto start = std::chrono::steady_clock::now();
      std::optional<fs::path> fixtures;
      if (!selftest_fixtures.empty()) fixtures = selftest_fixtures;
      bool ok = true;
      for (const auto& c : cmd_selftest(fixtures)) {
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
        ok = ok && c.passed;
      }
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << "selftest " << (ok ? "passed" : "failed") << " in " << seconds << " s\n";
      return ok ? kExitOk : kExitCheckFailed;
    }
  } catch (const hetattr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
