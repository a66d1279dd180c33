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

// Subcommands of the hetattr tool. Each returns its result instead of
// printing so the tests can call them directly; main.cpp does the printing.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hetattr/correction.hpp"
#include "hetattr/error.hpp"
#include "hetattr/evaluation.hpp"
#include "hetattr/suites.hpp"

namespace hetattr::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitIo = 3,
  kExitCheckFailed = 4,
};

int exit_code_for(ErrorKind kind);

inline constexpr const char* kOutRootEnv = "HETATTR_OUT_ROOT";
inline constexpr const char* kManifestName = "run_manifest.json";

/// `$HETATTR_OUT_ROOT/<command>`, or `hetattr_out/<command>` when unset.
fs::path default_out_dir(const std::string& command);

/// Writes run_manifest.json into `dir`. The manifest holds no timestamps
/// so reruns are byte-identical.
void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& inputs, const std::vector<std::string>& outputs,
                    std::optional<std::uint64_t> seed);

struct ExplainOptions {
  fs::path trace;
  CorrectionMode mode = CorrectionMode::kPositive;
  bool noise_link = false;
  fs::path out;
  std::size_t upsample = 8;
};

struct ExplainResult {
  std::vector<std::string> files;  // relative to the output dir
  std::vector<std::string> warnings;
};

ExplainResult cmd_explain(const ExplainOptions& options);

struct GenFixturesResult {
  std::vector<std::string> files;
};

GenFixturesResult cmd_gen_fixtures(std::uint64_t seed, const fs::path& out);

/// Loads a segmentation suite written by gen-fixtures. `dir` may be the
/// fixture root or its seg/ subdirectory.
suites::SegSuite load_seg_suite(const fs::path& dir);

/// Loads a perturbation suite written by gen-fixtures.
suites::PerturbSuite load_perturb_suite(const fs::path& dir);

struct EvalSegOptions {
  fs::path fixtures;
  CorrectionMode mode = CorrectionMode::kPositive;
  bool noise_link = false;
  std::vector<double> scales = {1.0, 0.3};
  double iou_min = 0.2;
  fs::path out;
};

struct EvalSegRow {
  double scale = 1.0;
  SegmentationScore score;
};

struct EvalSegResult {
  std::string method;  // pos, abs, full, or the same with "+noised"
  std::vector<EvalSegRow> rows;
};

EvalSegResult cmd_eval_seg(const EvalSegOptions& options);
void print_seg_table(std::ostream& os, const EvalSegResult& result);

struct EvalPerturbOptions {
  fs::path fixtures;
  CorrectionMode mode = CorrectionMode::kPositive;
  std::uint64_t seed = 0;  // random-baseline scores
  fs::path out;
};

suites::PerturbReport cmd_eval_perturb(const EvalPerturbOptions& options);
void print_perturb_report(std::ostream& os, const suites::PerturbReport& report);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Gradient check, trace round trip, block-oracle equivalence and Otsu
/// brute force; with `fixtures` also re-verifies every trace file there.
std::vector<CheckResult> cmd_selftest(const std::optional<fs::path>& fixtures = std::nullopt);

}  // namespace hetattr::cli
