#pragma once

// Experiment configuration: a flat `section.key = value` text file (optional
// `[section]` headers, `#` comments), parsed, overridden and validated here.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fedmema/anchors.hpp"

namespace fedmema {

enum class AblationMode {
  Full,
  NoLacca,
  MonoAnchor,
  FedAvgAll,
  FedEncoderOnly,
  FedDecoderOnly,
  LocalOnly,
};

std::string_view mode_name(AblationMode mode);
AblationMode parse_mode(std::string_view name);

std::string membership_name(MembershipLevel level);
MembershipLevel parse_membership(std::string_view text);

struct ExperimentConfig {
  std::string name = "fedmema";

  int setting = 1;
  std::size_t samples_per_site = 40;
  std::size_t image_size = 32;
  std::uint64_t data_seed = 0;
  std::size_t val_samples = 50;
  std::size_t test_samples = 100;
  bool dump_data = false;

  std::size_t base_width = 8;
  std::size_t num_classes = 4;
  double lambda_reg = 0.5;

  std::size_t n_k = 3;
  MembershipLevel level = MembershipLevel::L4;
  double omega = 0.999;

  std::size_t heads = 8;
  bool lacca_enabled = true;
  bool multi_anchor = true;

  std::size_t rounds = 50;
  std::size_t epochs_per_round = 1;
  std::size_t clients_per_modality = 1;

  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 4;

  double dice_weight = 1.0;
  double ce_weight = 1.0;

  AblationMode mode = AblationMode::Full;

  std::size_t parallelism = 1;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  // Validation metrics every this many rounds (0: only the last round).
  std::size_t eval_every = 1;
  bool export_attn = false;

  // Training set size: one block per site.
  std::size_t train_samples() const { return samples_per_site * (1 + 4 * clients_per_modality); }
  bool uses_lacca() const;
  std::size_t effective_n_k() const;
  bool modality_encoders() const;  // FedMEMA family (4E&D server)
};

// Every key the parser accepts, in snapshot order.
const std::vector<std::string>& config_keys();

// Sets one key from its text form. ConfigError naming the key on a bad value
// or an unknown key.
void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const ExperimentConfig& cfg, std::string_view key);

// Parses text, then applies `key=value` overrides, then validates.
ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Cross-key checks; one ConfigError listing every problem.
void validate_config(const ExperimentConfig& cfg);

// Resolved configuration in the input format; parsing it back gives an equal
// configuration.
std::string config_to_text(const ExperimentConfig& cfg);

}  // namespace fedmema
