#pragma once

// Multi-run drivers: the ablation ladder over a seed list and one-parameter
// sweeps. Runs are independent jobs and can execute on several threads.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "fedmema/config.hpp"
#include "fedmema/federation.hpp"

namespace fedmema {

struct AblationVariant {
  std::string label;  // a..e, local
  AblationMode mode;
  std::string description;
};

// (a) federate decoder only, (b) federate encoder only, (c) 4 encoders
// without calibration, (d) mono-anchor, (e) multi-anchor, then local only.
const std::vector<AblationVariant>& ablation_variants();

struct ExperimentOptions {
  std::size_t jobs = 1;
  bool write_artifacts = true;
  // Called from worker threads (serialized) once per finished run.
  std::function<void(const std::string&)> progress;
};

struct JobOutcome {
  std::string row;  // variant label or sweep value
  std::uint64_t seed = 0;
  double client_avg_mdsc = 0.0;
  double server_mdsc = 0.0;
  std::vector<double> per_client_mdsc;
  double wall_ms = 0.0;
};

struct SummaryRow {
  std::string label;
  std::string detail;  // mode name or parameter value
  std::vector<double> client_per_seed;
  std::vector<double> server_per_seed;
  double client_mean = 0.0, client_std = 0.0;
  double server_mean = 0.0, server_std = 0.0;
};

struct ExperimentReport {
  std::string title;
  std::vector<std::uint64_t> seeds;
  std::vector<SummaryRow> rows;
  std::vector<JobOutcome> jobs;
  double wall_ms = 0.0;
  double cpu_ms = 0.0;  // sum of per-job wall times
  std::filesystem::path summary_dir;
};

// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(const std::vector<double>& v);

// Runs every ablation variant for every seed in cfg.seeds. Seed s sets
// run.seed = s and data.seed = cfg.data_seed + s, so variants of one seed
// see identical data. Writes <out_dir>/<name>/ablation/{summary.json,
// summary.md} and one run directory per job.
ExperimentReport run_ablation(const ExperimentConfig& cfg, const ExperimentOptions& options = {});

inline constexpr std::string_view kSweepableKeys[] = {"anchors.n_k", "anchors.level"};

// One full-method run per value with the configuration's seed. ConfigError
// for a key other than anchors.n_k / anchors.level or an invalid value.
ExperimentReport run_sweep(const ExperimentConfig& cfg, std::string_view param, const std::vector<std::string>& values,
                           const ExperimentOptions& options = {});

// Markdown table: label, detail, client-avg mDSC mean ± std, server mean ± std.
std::string format_report(const ExperimentReport& report);
std::string report_json(const ExperimentReport& report);

}  // namespace fedmema
