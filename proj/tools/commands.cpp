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

#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "hetattr/check/oracles.hpp"
#include "hetattr/image_io.hpp"
#include "hetattr/propagation.hpp"
#include "hetattr/trace_io.hpp"

namespace hetattr::cli {

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string sample_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%03zu", i);
  return buf;
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json map_json(const SaliencyMap& map) {
  nlohmann::json j = {{"stream", map.stream.id}, {"label", map.stream.label}, {"scores", map.scores}};
  if (map.grid) j["grid"] = {{"rows", map.grid->rows}, {"cols", map.grid->cols}};
  return j;
}

std::string method_name(CorrectionMode mode, bool noise_link) {
  return std::string(to_string(mode)) + (noise_link ? "+noised" : "");
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kValidation:
    case ErrorKind::kShape:
      return kExitValidation;
    case ErrorKind::kIo:
      return kExitIo;
    case ErrorKind::kNumerical:
      return kExitCheckFailed;
  }
  return kExitUsage;
}

fs::path default_out_dir(const std::string& command) {
  const char* root = std::getenv(kOutRootEnv);
  return fs::path(root != nullptr && *root != '\0' ? root : "hetattr_out") / command;
}

void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    const nlohmann::json& inputs, const std::vector<std::string>& outputs,
                    std::optional<std::uint64_t> seed) {
  nlohmann::json m = {{"command", command},
                      {"tool_version", HETATTR_VERSION},
                      {"config", config},
                      {"inputs", inputs},
                      {"outputs", outputs},
                      {"seed", seed ? nlohmann::json(*seed) : nlohmann::json(nullptr)}};
  write_json(dir / kManifestName, m);
}

// ---------------------------------------------------------------------------
// explain

ExplainResult cmd_explain(const ExplainOptions& options) {
  if (options.upsample == 0) throw ValidationError("--upsample must be at least 1");
  const AttentionTrace trace = read_trace(options.trace);
  ExplainResult out;

  bool flagged = false;
  for (const auto& t : trace.tokens) flagged = flagged || (t.noise_link && t.source != 0);
  if (options.noise_link && !flagged) {
    out.warnings.push_back("--noise-link has no effect: no source stream in " +
                           options.trace.string() + " carries the noise-link flag");
  }
  const PropagationResult result = propagate(trace, PropagationOptions{options.mode, options.noise_link});

  bool any_cls = false;
  for (const auto& t : trace.tokens) any_cls = any_cls || t.cls_index.has_value();
  if (!any_cls) throw ValidationError(options.trace.string() + ": no stream has a CLS token");

  make_dir(options.out);
  const bool signed_map = options.mode == CorrectionMode::kFull;
  nlohmann::json saliency = {{"trace", options.trace.string()},
                             {"loss", trace.loss_descriptor},
                             {"mode", std::string(to_string(options.mode))},
                             {"noise_link", options.noise_link},
                             {"noise_link_applied", result.noise_link_applied},
                             {"interpretations", nlohmann::json::array()},
                             {"total_attention", nlohmann::json::array()}};

  auto heatmap = [&](const SaliencyMap& map, const std::string& stem, bool diverging) {
    const std::string name = stem + (diverging ? ".ppm" : ".pgm");
    write_pnm(diverging ? render_diverging(map, options.upsample) : render_gray(map, options.upsample),
              options.out / name);
    out.files.push_back(name);
  };

  for (const auto& t : trace.tokens) {
    if (!t.cls_index) continue;
    const auto [to1, to2] = cls_interpretation(result, t.stream.id);
    saliency["interpretations"].push_back({{"stream", t.stream.id},
                                           {"label", t.stream.label},
                                           {"row", *t.cls_index},
                                           {"source1", map_json(to1)},
                                           {"source2", map_json(to2)}});
    for (const SaliencyMap* m : {&to1, &to2}) {
      if (m->grid) heatmap(*m, "heatmap_" + t.stream.label + "_to_" + m->stream.label, signed_map);
    }
  }
  for (const auto& t : trace.tokens) {
    if (!t.grid || t.source == 0) continue;
    const SaliencyMap total = patch_total_attention(result, t.stream.id);
    saliency["total_attention"].push_back(map_json(total));
    heatmap(total, "total_" + t.stream.label, signed_map);
  }
  write_json(options.out / "saliency.json", saliency);
  out.files.insert(out.files.begin(), "saliency.json");

  write_manifest(options.out, "explain",
                 {{"mode", std::string(to_string(options.mode))},
                  {"noise_link", options.noise_link},
                  {"upsample", options.upsample}},
                 {{"trace", options.trace.string()}}, out.files, std::nullopt);
  return out;
}

// ---------------------------------------------------------------------------
// gen-fixtures

GenFixturesResult cmd_gen_fixtures(std::uint64_t seed, const fs::path& out) {
  GenFixturesResult result;
  make_dir(out / "traces");
  for (const auto& named : suites::core_traces(seed)) {
    const std::string name = "traces/" + named.name + ".xatr";
    write_trace(named.trace, out / name);
    result.files.push_back(name);
  }

  const suites::SegSuite seg = suites::build_seg_suite(seed);
  make_dir(out / "seg");
  nlohmann::json seg_index = {{"model", suites::config_to_json(seg.config)},
                              {"upsample", seg.upsample},
                              {"query_confidence", suites::kQueryConfidence},
                              {"samples", nlohmann::json::array()}};
  for (std::size_t i = 0; i < seg.samples.size(); ++i) {
    const auto& sample = seg.samples[i];
    const std::string dir = "seg/" + sample_dir_name(i);
    make_dir(out / dir);
    nlohmann::json gt = {{"grid_rows", seg.config.grid_rows},
                         {"grid_cols", seg.config.grid_cols},
                         {"upsample", seg.upsample},
                         {"objects", nlohmann::json::array()},
                         {"queries", nlohmann::json::array()}};
    for (const auto& obj : sample.objects) gt["objects"].push_back(suites::object_to_json(obj));
    for (const auto& q : sample.queries) {
      const std::string file = "query_" + std::to_string(q.query) + ".xatr";
      write_trace(q.trace, out / dir / file);
      result.files.push_back(dir + "/" + file);
      gt["queries"].push_back(
          {{"query", q.query}, {"label", q.label}, {"confidence", q.confidence}, {"trace", file}});
    }
    write_json(out / dir / "ground_truth.json", gt);
    result.files.push_back(dir + "/ground_truth.json");
    seg_index["samples"].push_back(sample_dir_name(i));
  }
  write_json(out / "seg/suite.json", seg_index);
  result.files.push_back("seg/suite.json");

  const suites::PerturbSuite perturb = suites::build_perturb_suite(seed);
  make_dir(out / "perturb");
  nlohmann::json perturb_index = {{"model", suites::config_to_json(perturb.config)},
                                  {"samples", nlohmann::json::array()}};
  for (std::size_t i = 0; i < perturb.samples.size(); ++i) {
    const auto& s = perturb.samples[i];
    const std::string file = sample_dir_name(i) + ".xatr";
    write_trace(s.trace, out / "perturb" / file);
    result.files.push_back("perturb/" + file);
    perturb_index["samples"].push_back(
        {{"seed", s.seed}, {"label", s.label}, {"predicted", s.predicted}, {"trace", file}});
  }
  write_json(out / "perturb/suite.json", perturb_index);
  result.files.push_back("perturb/suite.json");

  write_manifest(out, "gen-fixtures", nlohmann::json::object(), nlohmann::json::object(), result.files,
                 seed);
  return result;
}

// ---------------------------------------------------------------------------
// eval-seg

suites::SegSuite load_seg_suite(const fs::path& dir) {
  const fs::path root = fs::exists(dir / "seg" / "suite.json") ? dir / "seg" : dir;
  if (!fs::exists(root / "suite.json")) {
    throw IoError("no segmentation suite (seg/suite.json) under " + dir.string());
  }
  const nlohmann::json index = read_json(root / "suite.json");
  suites::SegSuite suite;
  try {
    suite.config = suites::config_from_json(index.at("model"));
    suite.upsample = index.at("upsample").get<std::size_t>();
    for (const auto& name : index.at("samples")) {
      const fs::path sdir = root / name.get<std::string>();
      const nlohmann::json gt = read_json(sdir / "ground_truth.json");
      suites::SegSample sample;
      for (const auto& o : gt.at("objects")) sample.objects.push_back(suites::object_from_json(o));
      for (const auto& q : gt.at("queries")) {
        sample.queries.push_back({q.at("query").get<std::size_t>(), q.at("label").get<std::size_t>(),
                                  q.at("confidence").get<double>(),
                                  read_trace(sdir / q.at("trace").get<std::string>())});
      }
      suite.samples.push_back(std::move(sample));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(root.string() + ": " + e.what());
  }
  if (suite.samples.empty()) throw IoError("segmentation suite under " + dir.string() + " is empty");
  return suite;
}

EvalSegResult cmd_eval_seg(const EvalSegOptions& options) {
  if (options.scales.empty()) throw ValidationError("no threshold scale given");
  const suites::SegSuite suite = load_seg_suite(options.fixtures);
  EvalSegResult result;
  result.method = method_name(options.mode, options.noise_link);
  const PropagationOptions prop{options.mode, options.noise_link};
  for (double k : options.scales) {
    BinarizationConfig cfg;
    cfg.scale = k;
    result.rows.push_back({k, suites::evaluate_seg(suite, prop, cfg, options.iou_min)});
  }
  if (!options.out.empty()) {
    make_dir(options.out);
    nlohmann::json report = {{"method", result.method}, {"iou_min", options.iou_min}, {"rows", nlohmann::json::array()}};
    for (const auto& row : result.rows) {
      report["rows"].push_back({{"k", row.scale},
                                {"ap", optional_json(row.score.ap)},
                                {"ar", optional_json(row.score.ar)},
                                {"ap_medium", optional_json(row.score.ap_medium)},
                                {"ar_medium", optional_json(row.score.ar_medium)},
                                {"ap_large", optional_json(row.score.ap_large)},
                                {"ar_large", optional_json(row.score.ar_large)}});
    }
    write_json(options.out / "seg_report.json", report);
    write_manifest(options.out, "eval-seg",
                   {{"mode", std::string(to_string(options.mode))},
                    {"noise_link", options.noise_link},
                    {"k", options.scales},
                    {"iou_min", options.iou_min}},
                   {{"fixtures", options.fixtures.string()}}, {"seg_report.json"}, std::nullopt);
  }
  return result;
}

void print_seg_table(std::ostream& os, const EvalSegResult& result) {
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(4) << *v;
    } else {
      s << "n/a";
    }
    return s.str();
  };
  os << std::left << std::setw(14) << "method" << std::setw(6) << "k";
  for (const char* h : {"AP", "AR", "AP_med", "AR_med", "AP_large", "AR_large"}) os << std::setw(10) << h;
  os << "\n";
  for (const auto& row : result.rows) {
    std::ostringstream k;
    k << std::fixed << std::setprecision(1) << row.scale;
    os << std::setw(14) << result.method << std::setw(6) << k.str();
    for (const auto& v : {row.score.ap, row.score.ar, row.score.ap_medium, row.score.ar_medium,
                          row.score.ap_large, row.score.ar_large}) {
      os << std::setw(10) << cell(v);
    }
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// eval-perturb

suites::PerturbSuite load_perturb_suite(const fs::path& dir) {
  const fs::path root = fs::exists(dir / "perturb" / "suite.json") ? dir / "perturb" : dir;
  if (!fs::exists(root / "suite.json")) {
    throw IoError("no perturbation suite (perturb/suite.json) under " + dir.string());
  }
  const nlohmann::json index = read_json(root / "suite.json");
  suites::PerturbSuite suite;
  try {
    suite.config = suites::config_from_json(index.at("model"));
    for (const auto& s : index.at("samples")) {
      suite.samples.push_back({s.at("seed").get<std::uint64_t>(), s.at("label").get<std::size_t>(),
                               s.at("predicted").get<std::size_t>(),
                               read_trace(root / s.at("trace").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(root.string() + ": " + e.what());
  }
  if (suite.samples.empty()) throw IoError("perturbation suite under " + dir.string() + " is empty");
  return suite;
}

suites::PerturbReport cmd_eval_perturb(const EvalPerturbOptions& options) {
  const suites::PerturbSuite suite = load_perturb_suite(options.fixtures);
  suites::PerturbReport report = suites::evaluate_perturb(suite, options.mode, options.seed);
  if (!options.out.empty()) {
    make_dir(options.out);
    nlohmann::json j = {{"mode", report.mode},
                        {"unperturbed_accuracy", report.unperturbed_accuracy},
                        {"curves", nlohmann::json::array()}};
    for (const auto* set : {&report.curves, &report.random}) {
      for (const auto& c : *set) {
        j["curves"].push_back({{"stream", c.stream},
                               {"scores", c.scores},
                               {"polarity", std::string(to_string(c.result.polarity))},
                               {"fractions", c.result.fractions},
                               {"accuracy", c.result.accuracy},
                               {"auc", c.result.auc}});
      }
    }
    write_json(options.out / "perturb_report.json", j);
    write_manifest(options.out, "eval-perturb", {{"mode", report.mode}},
                   {{"fixtures", options.fixtures.string()}}, {"perturb_report.json"}, options.seed);
  }
  return report;
}

void print_perturb_report(std::ostream& os, const suites::PerturbReport& report) {
  os << "mode " << report.mode << ", unperturbed accuracy " << std::fixed << std::setprecision(4)
     << report.unperturbed_accuracy << "\n";
  const char* panels[] = {"(a)", "(b)", "(c)", "(d)"};
  for (std::size_t i = 0; i < report.curves.size(); ++i) {
    const auto& c = report.curves[i];
    const auto& r = report.random[i];
    os << panels[i % 4] << " " << to_string(c.result.polarity) << " perturbation on " << c.stream
       << " tokens: AUC " << std::setprecision(4) << c.result.auc << " (random " << r.result.auc << ")\n";
    os << "    fraction:";
    for (double f : c.result.fractions) os << " " << std::setprecision(1) << f;
    os << "\n    accuracy:";
    for (double a : c.result.accuracy) os << " " << std::setprecision(3) << a;
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// selftest

namespace {

constexpr double kGradientTolerance = 1e-4;
constexpr double kOracleTolerance = 1e-10;

CheckResult check_gradients() {
  CheckResult r{"gradient", true, ""};
  double worst = 0.0;
  std::size_t entries = 0;
  for (auto topology : {toy::Topology::kLxmertMini, toy::Topology::kDetrMini}) {
    for (std::uint64_t seed : {0u, 1u}) {
      toy::ToyConfig config;
      config.topology = topology;
      config.seed = seed;
      const toy::ToyModel model(config);
      const auto sample = toy::plant_task(config, toy::derive_seed(seed, 4100));
      const auto report =
          check::finite_difference_check(model, sample.inputs, toy::LossSpec::single(sample.label));
      entries += report.entries;
      worst = std::max(worst, report.max_relative_error);
      if (report.max_relative_error > kGradientTolerance) {
        r.passed = false;
        r.detail = std::string(to_string(topology)) + " seed " + std::to_string(seed) + " layer " +
                   std::to_string(report.worst_layer) + ": relative error " +
                   std::to_string(report.max_relative_error);
        return r;
      }
    }
  }
  std::ostringstream s;
  s << entries << " entries, max relative error " << std::scientific << std::setprecision(2) << worst;
  r.detail = s.str();
  return r;
}

// Compares propagate() against the concatenated-token oracle for every
// mode (and the noise link where a stream carries the flag).
std::optional<std::string> oracle_mismatch(const AttentionTrace& trace, double* worst) {
  bool flagged = false;
  for (const auto& t : trace.tokens) flagged = flagged || t.noise_link;
  for (int mode = 0; mode < 3; ++mode) {
    for (bool noise : {false, true}) {
      if (noise && !flagged) continue;
      const auto cmode = mode == 0 ? CorrectionMode::kPositive
                                   : (mode == 1 ? CorrectionMode::kFull : CorrectionMode::kAbsolute);
      const PropagationResult got = propagate(trace, PropagationOptions{cmode, noise});
      const check::BlockOracle want = check::block_oracle(trace, mode, noise);
      for (const auto& t : trace.tokens) {
        for (int source : {1, 2}) {
          const double err = check::relative_difference(got.state(t.stream.id).toward(source),
                                                        want.block(t.stream.id, source));
          *worst = std::max(*worst, err);
          if (err > kOracleTolerance) {
            return "stream " + t.stream.label + " toward source " + std::to_string(source) + " (" +
                   std::string(to_string(cmode)) + (noise ? ", noise link" : "") +
                   "): relative error " + std::to_string(err);
          }
        }
      }
    }
  }
  return std::nullopt;
}

CheckResult check_block_oracle(const std::vector<suites::NamedTrace>& traces) {
  CheckResult r{"block-oracle", true, ""};
  double worst = 0.0;
  for (const auto& t : traces) {
    if (auto bad = oracle_mismatch(t.trace, &worst)) {
      r.passed = false;
      r.detail = t.name + ": " + *bad;
      return r;
    }
  }
  std::ostringstream s;
  s << traces.size() << " traces, max relative error " << std::scientific << std::setprecision(2) << worst;
  r.detail = s.str();
  return r;
}

CheckResult check_round_trip(const std::vector<suites::NamedTrace>& traces) {
  CheckResult r{"round-trip", true, ""};
  for (const auto& t : traces) {
    const std::string bytes = encode_trace(t.trace);
    const AttentionTrace back = decode_trace(bytes);
    if (encode_trace(back) != bytes) {
      r.passed = false;
      r.detail = t.name + ": re-encoded bytes differ";
      return r;
    }
  }
  r.detail = std::to_string(traces.size()) + " traces byte-exact";
  return r;
}

CheckResult check_otsu() {
  CheckResult r{"otsu", true, ""};
  std::mt19937_64 rng(20260);
  constexpr int kSamples = 200;
  for (int i = 0; i < kSamples; ++i) {
    std::vector<double> values(64);
    std::normal_distribution<double> a(0.0, 1.0);
    std::normal_distribution<double> b(3.0, 0.5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : values) v = i % 2 == 0 ? u(rng) : (u(rng) < 0.3 ? b(rng) : a(rng));
    const std::size_t bins = 8 + static_cast<std::size_t>(i % 5) * 16;
    const double got = otsu_threshold(values, bins);
    const auto want = check::otsu_exhaustive(values, bins);
    if (got == want.threshold) continue;
    // Accept a different boundary only when it ties the best variance.
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    const double width = (*mx - *mn) / static_cast<double>(bins);
    const auto k = static_cast<std::size_t>(std::lround((got - *mn) / width));
    const double v = check::between_class_variance(values, bins, k);
    if (v < want.best_variance * (1.0 - 1e-12)) {
      r.passed = false;
      r.detail = "sample " + std::to_string(i) + ": threshold " + std::to_string(got) +
                 " vs exhaustive " + std::to_string(want.threshold);
      return r;
    }
  }
  r.detail = std::to_string(kSamples) + " random samples";
  return r;
}

CheckResult check_fixture_dir(const fs::path& dir) {
  CheckResult r{"fixtures", true, ""};
  if (!fs::is_directory(dir)) {
    r.passed = false;
    r.detail = dir.string() + " is not a directory";
    return r;
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".xatr") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    r.passed = false;
    r.detail = "no .xatr files under " + dir.string();
    return r;
  }
  double worst = 0.0;
  for (const auto& f : files) {
    try {
      const std::string bytes = read_file_bytes(f);
      const AttentionTrace trace = decode_trace(bytes);
      if (const auto v = validate(trace); !v.empty()) {
        throw ValidationError("violates '" + v.front().invariant + "': " + v.front().detail);
      }
      if (encode_trace(trace) != bytes) throw IoError("re-encoded bytes differ from the file");
      if (auto bad = oracle_mismatch(trace, &worst)) throw NumericalError(*bad);
    } catch (const Error& e) {
      r.passed = false;
      r.detail = f.string() + ": " + e.what();
      return r;
    }
  }
  r.detail = std::to_string(files.size()) + " trace files";
  return r;
}

}  // namespace

std::vector<CheckResult> cmd_selftest(const std::optional<fs::path>& fixtures) {
  std::vector<CheckResult> out;
  auto guarded = [&](const std::string& name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, e.what()});
    }
  };
  std::vector<suites::NamedTrace> traces;
  try {
    traces = suites::core_traces(0);
  } catch (const std::exception& e) {
    out.push_back({"fixture-generation", false, e.what()});
  }
  guarded("gradient", [] { return check_gradients(); });
  guarded("round-trip", [&] { return check_round_trip(traces); });
  guarded("block-oracle", [&] { return check_block_oracle(traces); });
  guarded("otsu", [] { return check_otsu(); });
  if (fixtures) guarded("fixtures", [&] { return check_fixture_dir(*fixtures); });
  return out;
}

}  // namespace hetattr::cli
