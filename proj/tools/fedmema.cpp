// fedmema: run, ablate, sweep and export-attn.

#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "fedmema/errors.hpp"
#include "fedmema/experiment.hpp"
#include "fedmema/federation.hpp"

using namespace fedmema;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

void print_final(const RunResult& r) {
  std::cout << "client-avg mDSC " << r.final_metrics.client_avg_mdsc << "\n";
  for (const auto& c : r.final_metrics.clients) {
    std::cout << "  client " << c.id << " (" << modality_name(c.modality) << ") mDSC " << c.metrics->mdsc << "\n";
  }
  std::cout << "server mDSC " << r.final_metrics.server_mdsc << "\n";
  if (!r.run_dir.empty()) std::cout << "artifacts in " << r.run_dir.string() << "\n";
}

ExperimentOptions experiment_options(std::size_t jobs, bool verbose) {
  ExperimentOptions opt;
  opt.jobs = jobs;
  if (verbose) opt.progress = [](const std::string& line) { std::cerr << line << "\n"; };
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedMEMA federated segmentation simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());

  auto* run = app.add_subcommand("run", "run one federated experiment");
  run->add_option("config", config_path, "experiment config file")->required();
  run->add_option("--set", overrides, "override a config key (key=value)");
  run->add_flag("-q,--quiet", quiet, "no per-round progress");

  auto* ablate = app.add_subcommand("ablate", "run the ablation ladder over run.seeds");
  ablate->add_option("config", config_path, "experiment config file")->required();
  ablate->add_option("--set", overrides, "override a config key (key=value)");
  ablate->add_option("-j,--jobs", jobs, "runs executed concurrently");
  ablate->add_flag("-q,--quiet", quiet, "no per-run progress");

  std::string param, values;
  auto* sweep = app.add_subcommand("sweep", "one run per value of anchors.n_k or anchors.level");
  sweep->add_option("config", config_path, "experiment config file")->required();
  sweep->add_option("--param", param, "anchors.n_k or anchors.level")->required();
  sweep->add_option("--values", values, "comma-separated values, e.g. 1,3,5 or 1,4,1-4")->required();
  sweep->add_option("--set", overrides, "override a config key (key=value)");
  sweep->add_option("-j,--jobs", jobs, "runs executed concurrently");
  sweep->add_flag("-q,--quiet", quiet, "no per-run progress");

  std::string run_dir;
  auto* exp = app.add_subcommand("export-attn", "write attention weights of a finished run");
  exp->add_option("run_dir", run_dir, "run directory (holds config.snapshot)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      const ExperimentConfig cfg = load_config(config_path, overrides);
      RunOptions opt;
      opt.quiet = quiet;
      print_final(run_federation(cfg, opt));
    } else if (*ablate) {
      const ExperimentConfig cfg = load_config(config_path, overrides);
      const auto report = run_ablation(cfg, experiment_options(jobs, !quiet));
      std::cout << format_report(report) << "\nsummary in " << report.summary_dir.string() << "\n";
    } else if (*sweep) {
      const ExperimentConfig cfg = load_config(config_path, overrides);
      const auto report = run_sweep(cfg, param, split_list(values), experiment_options(jobs, !quiet));
      std::cout << format_report(report) << "\nsummary in " << report.summary_dir.string() << "\n";
    } else if (*exp) {
      const std::size_t n = export_attention_from_run(run_dir);
      std::cout << "wrote " << n << " attention files to " << (std::filesystem::path(run_dir) / "attn").string()
                << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
