#include "fedmema/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fedmema/errors.hpp"
#include "fedmema/segnet.hpp"
#include "fedmema/synthdata.hpp"

namespace fedmema {

namespace {

constexpr std::pair<AblationMode, std::string_view> kModes[] = {
    {AblationMode::Full, "full"},
    {AblationMode::NoLacca, "no_lacca"},
    {AblationMode::MonoAnchor, "mono_anchor"},
    {AblationMode::FedAvgAll, "fedavg_all"},
    {AblationMode::FedEncoderOnly, "fed_encoder_only"},
    {AblationMode::FedDecoderOnly, "fed_decoder_only"},
    {AblationMode::LocalOnly, "local_only"},
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError(std::string(key) + ": expected " + std::string(expected) + ", got '" + std::string(value) + "'");
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad(key, v, "a non-negative integer");
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(s, &used);
  } catch (const std::exception&) {
    bad(key, v, "a number");
  }
  if (used != s.size() || !std::isfinite(out)) bad(key, v, "a finite number");
  return out;
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(key, v, "true or false");
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

struct Field {
  std::function<void(ExperimentConfig&, std::string_view, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field size_field(T ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.*member = static_cast<T>(to_u64(k, v));
          },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(double ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) { c.*member = to_double(k, v); },
          [member](const ExperimentConfig& c) { return fmt_double(c.*member); }};
}

Field bool_field(bool ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) { c.*member = to_bool(k, v); },
          [member](const ExperimentConfig& c) { return fmt_bool(c.*member); }};
}

Field string_field(std::string ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view, std::string_view v) { c.*member = std::string(v); },
          [member](const ExperimentConfig& c) { return c.*member; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"experiment.name", string_field(&ExperimentConfig::name)},
      {"data.setting",
       {[](ExperimentConfig& c, std::string_view k, std::string_view v) {
          const auto s = to_u64(k, v);
          if (s != 1 && s != 2) bad(k, v, "1 or 2");
          c.setting = static_cast<int>(s);
        },
        [](const ExperimentConfig& c) { return std::to_string(c.setting); }}},
      {"data.samples_per_site", size_field(&ExperimentConfig::samples_per_site)},
      {"data.image_size", size_field(&ExperimentConfig::image_size)},
      {"data.seed", size_field(&ExperimentConfig::data_seed)},
      {"data.val_samples", size_field(&ExperimentConfig::val_samples)},
      {"data.test_samples", size_field(&ExperimentConfig::test_samples)},
      {"data.dump", bool_field(&ExperimentConfig::dump_data)},
      {"model.base_width", size_field(&ExperimentConfig::base_width)},
      {"model.num_classes", size_field(&ExperimentConfig::num_classes)},
      {"model.lambda_reg", double_field(&ExperimentConfig::lambda_reg)},
      {"anchors.n_k", size_field(&ExperimentConfig::n_k)},
      {"anchors.level",
       {[](ExperimentConfig& c, std::string_view, std::string_view v) { c.level = parse_membership(v); },
        [](const ExperimentConfig& c) { return membership_name(c.level); }}},
      {"anchors.omega", double_field(&ExperimentConfig::omega)},
      {"lacca.heads", size_field(&ExperimentConfig::heads)},
      {"lacca.enabled", bool_field(&ExperimentConfig::lacca_enabled)},
      {"lacca.multi_anchor", bool_field(&ExperimentConfig::multi_anchor)},
      {"federation.rounds", size_field(&ExperimentConfig::rounds)},
      {"federation.epochs_per_round", size_field(&ExperimentConfig::epochs_per_round)},
      {"federation.clients_per_modality", size_field(&ExperimentConfig::clients_per_modality)},
      {"optim.lr", double_field(&ExperimentConfig::lr)},
      {"optim.weight_decay", double_field(&ExperimentConfig::weight_decay)},
      {"optim.batch_size", size_field(&ExperimentConfig::batch_size)},
      {"loss.dice_weight", double_field(&ExperimentConfig::dice_weight)},
      {"loss.ce_weight", double_field(&ExperimentConfig::ce_weight)},
      {"ablation.mode",
       {[](ExperimentConfig& c, std::string_view, std::string_view v) { c.mode = parse_mode(v); },
        [](const ExperimentConfig& c) { return std::string(mode_name(c.mode)); }}},
      {"run.parallelism", size_field(&ExperimentConfig::parallelism)},
      {"run.out_dir", string_field(&ExperimentConfig::out_dir)},
      {"run.seed", size_field(&ExperimentConfig::seed)},
      {"run.seeds",
       {[](ExperimentConfig& c, std::string_view k, std::string_view v) {
          std::vector<std::uint64_t> out;
          std::stringstream ss{std::string(v)};
          std::string item;
          while (std::getline(ss, item, ',')) out.push_back(to_u64(k, trim(item)));
          if (out.empty()) bad(k, v, "a comma-separated list of seeds");
          c.seeds = std::move(out);
        },
        [](const ExperimentConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
          return s;
        }}},
      {"run.eval_every", size_field(&ExperimentConfig::eval_every)},
      {"run.export_attn", bool_field(&ExperimentConfig::export_attn)},
  };
  return table;
}

const Field& field(std::string_view key) {
  for (const auto& [name, f] : fields())
    if (name == key) return f;
  throw ConfigError("unknown configuration key '" + std::string(key) + "'");
}

}  // namespace

std::string_view mode_name(AblationMode mode) {
  for (const auto& [m, n] : kModes)
    if (m == mode) return n;
  return "?";
}

AblationMode parse_mode(std::string_view name) {
  for (const auto& [m, n] : kModes)
    if (n == name) return m;
  throw ConfigError("ablation.mode: unknown mode '" + std::string(name) +
                    "' (full, no_lacca, mono_anchor, fedavg_all, fed_encoder_only, fed_decoder_only, local_only)");
}

std::string membership_name(MembershipLevel level) {
  if (level == MembershipLevel::Concat) return "1-4";
  return std::to_string(static_cast<int>(level));
}

MembershipLevel parse_membership(std::string_view text) {
  if (text == "1") return MembershipLevel::L1;
  if (text == "2") return MembershipLevel::L2;
  if (text == "3") return MembershipLevel::L3;
  if (text == "4") return MembershipLevel::L4;
  if (text == "1-4" || text == "1..4" || text == "concat") return MembershipLevel::Concat;
  throw ConfigError("anchors.level: expected 1, 2, 3, 4 or 1-4, got '" + std::string(text) + "'");
}

bool ExperimentConfig::uses_lacca() const {
  return lacca_enabled && (mode == AblationMode::Full || mode == AblationMode::MonoAnchor);
}

std::size_t ExperimentConfig::effective_n_k() const {
  return multi_anchor && mode != AblationMode::MonoAnchor ? n_k : 1;
}

bool ExperimentConfig::modality_encoders() const {
  return mode == AblationMode::Full || mode == AblationMode::NoLacca || mode == AblationMode::MonoAnchor ||
         mode == AblationMode::LocalOnly;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, f] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  field(key).set(cfg, key, trim(value));
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) { return field(key).get(cfg); }

void validate_config(const ExperimentConfig& c) {
  std::vector<std::string> problems;
  auto need = [&](bool ok, std::string msg) {
    if (!ok) problems.push_back(std::move(msg));
  };
  need(!c.name.empty(), "experiment.name: must not be empty");
  need(c.image_size >= 16 && c.image_size % 16 == 0, "data.image_size: must be a multiple of 16 and at least 16");
  need(c.samples_per_site >= 1, "data.samples_per_site: must be at least 1");
  need(c.val_samples >= 1, "data.val_samples: must be at least 1");
  need(c.test_samples >= 1, "data.test_samples: must be at least 1");
  need(c.base_width >= 1, "model.base_width: must be at least 1");
  need(c.num_classes == kNumTissues, "model.num_classes: the synthetic data has " + std::to_string(kNumTissues) +
                                         " classes (BG, ED, ET, NET), got " + std::to_string(c.num_classes));
  need(c.lambda_reg >= 0.0, "model.lambda_reg: must be non-negative");
  need(c.n_k >= 1, "anchors.n_k: must be at least 1");
  need(c.omega >= 0.0 && c.omega < 1.0, "anchors.omega: must lie in [0, 1)");
  need(c.heads >= 1, "lacca.heads: must be at least 1");
  if (c.heads >= 1 && c.base_width >= 1) {
    need(c.base_width % c.heads == 0, "lacca.heads: " + std::to_string(c.heads) +
                                          " heads must divide model.base_width (" + std::to_string(c.base_width) +
                                          ") so every level splits evenly");
  }
  need(c.clients_per_modality >= 1, "federation.clients_per_modality: must be at least 1");
  need(c.lr >= 0.0, "optim.lr: must be non-negative");
  need(c.weight_decay >= 0.0, "optim.weight_decay: must be non-negative");
  need(c.batch_size >= 1, "optim.batch_size: must be at least 1");
  need(c.dice_weight >= 0.0 && c.ce_weight >= 0.0 && c.dice_weight + c.ce_weight > 0.0,
       "loss.dice_weight/loss.ce_weight: must be non-negative and not both zero");
  need(c.parallelism >= 1, "run.parallelism: must be at least 1");
  need(!c.out_dir.empty(), "run.out_dir: must not be empty");
  need(!c.seeds.empty(), "run.seeds: must list at least one seed");
  if (c.setting == 2 && c.clients_per_modality >= 1 && c.samples_per_site >= 1) {
    const std::size_t clients = 4 * c.clients_per_modality;
    const std::size_t rest = c.train_samples() - c.samples_per_site;
    need(rest % (clients + 1) == 0, "data.samples_per_site: setting 2 splits the " + std::to_string(rest) +
                                        " client samples into " + std::to_string(clients + 1) +
                                        " equal blocks; pick a multiple of " + std::to_string(clients + 1));
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

ExperimentConfig parse_config(std::string_view text, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string section;
  std::stringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + key + " already set on line " +
                        std::to_string(it->second));
    }
    seen[key] = line_no;
    try {
      set_config_value(cfg, key, std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_config_value(cfg, trim(std::string_view(o).substr(0, eq)), std::string_view(o).substr(eq + 1));
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [name, f] : fields()) out += name + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace fedmema
