#include "fedmema/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>

#include "fedmema/errors.hpp"
#include "json.hpp"

namespace fedmema {

using json = nlohmann::ordered_json;

namespace {

struct Job {
  std::string row;
  std::string detail;
  ExperimentConfig cfg;
};

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

ExperimentReport run_jobs(std::string title, const std::vector<Job>& jobs, std::vector<std::uint64_t> seeds,
                          const std::filesystem::path& summary_dir, const ExperimentOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  report.title = std::move(title);
  report.seeds = std::move(seeds);
  report.summary_dir = summary_dir;
  report.jobs.resize(jobs.size());
  std::mutex progress_mu;

  RunOptions run_opts;
  run_opts.write_artifacts = options.write_artifacts;
  parallel_for(jobs.size(), options.jobs, [&](std::size_t i) {
    const Job& job = jobs[i];
    const auto start = std::chrono::steady_clock::now();
    const RunResult r = run_federation(job.cfg, run_opts);
    const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    JobOutcome out;
    out.row = job.row;
    out.seed = job.cfg.seed;
    out.client_avg_mdsc = r.final_metrics.client_avg_mdsc;
    out.server_mdsc = r.final_metrics.server_mdsc;
    for (const auto& c : r.final_metrics.clients) out.per_client_mdsc.push_back(c.metrics->mdsc);
    out.wall_ms = wall;
    report.jobs[i] = out;
    if (options.progress) {
      std::lock_guard lock(progress_mu);
      options.progress(job.cfg.name + ": client-avg mDSC " + fixed(out.client_avg_mdsc, 4) + ", server mDSC " +
                       fixed(out.server_mdsc, 4) + " (" + fixed(wall / 1000.0, 1) + " s)");
    }
  });

  for (const auto& job : jobs) {
    if (!report.rows.empty() && report.rows.back().label == job.row) continue;
    SummaryRow row;
    row.label = job.row;
    row.detail = job.detail;
    for (const auto& o : report.jobs) {
      if (o.row != job.row) continue;
      row.client_per_seed.push_back(o.client_avg_mdsc);
      row.server_per_seed.push_back(o.server_mdsc);
    }
    std::tie(row.client_mean, row.client_std) = mean_std(row.client_per_seed);
    std::tie(row.server_mean, row.server_std) = mean_std(row.server_per_seed);
    report.rows.push_back(std::move(row));
  }
  for (const auto& o : report.jobs) report.cpu_ms += o.wall_ms;
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (options.write_artifacts) {
    write_text(summary_dir / "summary.json", report_json(report) + "\n");
    write_text(summary_dir / "summary.md", format_report(report));
  }
  return report;
}

}  // namespace

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v = {
      {"a", AblationMode::FedDecoderOnly, "E&D server, federated decoder"},
      {"b", AblationMode::FedEncoderOnly, "E&D server, federated encoder"},
      {"c", AblationMode::NoLacca, "4E&D server, federated 4E, no calibration"},
      {"d", AblationMode::MonoAnchor, "4E&D, federated 4E, mono-anchor calibration"},
      {"e", AblationMode::Full, "4E&D, federated 4E, multi-anchor calibration"},
      {"local", AblationMode::LocalOnly, "every site trains alone"},
  };
  return v;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() == 1) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

ExperimentReport run_ablation(const ExperimentConfig& cfg, const ExperimentOptions& options) {
  validate_config(cfg);
  const std::filesystem::path dir = run_directory(cfg) / "ablation";
  std::vector<Job> jobs;
  for (const auto& v : ablation_variants()) {
    for (auto s : cfg.seeds) {
      Job job{v.label, std::string(mode_name(v.mode)), cfg};
      job.cfg.mode = v.mode;
      job.cfg.seed = s;
      job.cfg.data_seed = cfg.data_seed + s;
      job.cfg.out_dir = dir.string();
      job.cfg.name = std::string(mode_name(v.mode)) + "_seed" + std::to_string(s);
      validate_config(job.cfg);
      jobs.push_back(std::move(job));
    }
  }
  return run_jobs("ablation", jobs, cfg.seeds, dir, options);
}

ExperimentReport run_sweep(const ExperimentConfig& cfg, std::string_view param, const std::vector<std::string>& values,
                           const ExperimentOptions& options) {
  validate_config(cfg);
  if (std::find(std::begin(kSweepableKeys), std::end(kSweepableKeys), param) == std::end(kSweepableKeys)) {
    throw ConfigError("sweep: parameter must be anchors.n_k or anchors.level, got '" + std::string(param) + "'");
  }
  if (values.empty()) throw ConfigError("sweep: no values given");
  if (std::set<std::string>(values.begin(), values.end()).size() != values.size()) {
    throw ConfigError("sweep: values must be distinct");
  }
  const std::string key(param);
  const std::string tag = key.substr(key.find('.') + 1);
  const std::filesystem::path dir = run_directory(cfg) / ("sweep_" + tag);
  std::vector<Job> jobs;
  for (const auto& value : values) {
    Job job{value, key + "=" + value, cfg};
    job.cfg.mode = AblationMode::Full;
    set_config_value(job.cfg, key, value);
    job.cfg.out_dir = dir.string();
    job.cfg.name = tag + "_" + (value == "1-4" ? std::string("concat") : value);
    validate_config(job.cfg);
    jobs.push_back(std::move(job));
  }
  return run_jobs("sweep " + key, jobs, {cfg.seed}, dir, options);
}

std::string format_report(const ExperimentReport& report) {
  std::string seeds;
  for (std::size_t i = 0; i < report.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(report.seeds[i]);
  std::string out = "# " + report.title + " (seeds " + seeds + ")\n\n";
  out += "| row | variant | client-avg mDSC | server mDSC |\n";
  out += "|---|---|---|---|\n";
  for (const auto& r : report.rows) {
    out += "| " + r.label + " | " + r.detail + " | " + fixed(100.0 * r.client_mean, 2) + " ± " +
           fixed(100.0 * r.client_std, 2) + " | " + fixed(100.0 * r.server_mean, 2) + " ± " +
           fixed(100.0 * r.server_std, 2) + " |\n";
  }
  return out;
}

std::string report_json(const ExperimentReport& report) {
  json j;
  j["title"] = report.title;
  j["seeds"] = report.seeds;
  j["rows"] = json::array();
  for (const auto& r : report.rows) {
    j["rows"].push_back({{"label", r.label},
                         {"detail", r.detail},
                         {"client_avg_mdsc_mean", r.client_mean},
                         {"client_avg_mdsc_std", r.client_std},
                         {"server_mdsc_mean", r.server_mean},
                         {"server_mdsc_std", r.server_std},
                         {"client_avg_mdsc_per_seed", r.client_per_seed},
                         {"server_mdsc_per_seed", r.server_per_seed}});
  }
  j["jobs"] = json::array();
  for (const auto& o : report.jobs) {
    j["jobs"].push_back({{"row", o.row},
                         {"seed", o.seed},
                         {"client_avg_mdsc", o.client_avg_mdsc},
                         {"server_mdsc", o.server_mdsc},
                         {"per_client_mdsc", o.per_client_mdsc},
                         {"wall_ms", o.wall_ms}});
  }
  j["wall_ms"] = report.wall_ms;
  j["cpu_ms"] = report.cpu_ms;
  return j.dump(2);
}

}  // namespace fedmema
