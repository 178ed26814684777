#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "peftdebias/model.hpp"

namespace peftdebias {

// Resolved experiment configuration. File format: `key = value` lines with
// dotted keys, '#' comments, schema_version 1. Relative paths resolve
// against the config file's directory; overrides are `key=value` strings
// applied after the file.
struct ExperimentConfig {
  int schema_version = 1;
  std::string run_dir;
  std::uint64_t seed = 13;
  std::string method = "ft";  // ft|full_debias|adapter|prompt|lora|sft
  double budget_fraction = 0.01;
  std::string axis_path;
  std::string vocab_path;

  int model_layers = 2;
  int model_hidden = 64;
  int model_heads = 2;
  int model_ffn = 128;
  int model_max_seq = 64;
  int model_classes = 2;
  std::string init_checkpoint;
  std::string pretrain_corpus;  // empty -> upstream corpus
  std::int64_t pretrain_steps = 0;
  double pretrain_lr = 1e-3;

  std::string upstream_corpus;
  double upstream_lr = 1e-5;
  std::int64_t upstream_steps = 1000;
  std::int64_t eval_interval = 100;
  int upstream_batch = 16;
  bool cda_two_sided = true;
  double mask_prob = 0.15;

  std::string downstream_train;
  std::string downstream_eval;
  double downstream_lr = 1e-5;
  int downstream_batch = 32;
  int downstream_epochs = 10;
  double positive_class_weight = 1.0;
  std::string selection = "auto";  // auto|accuracy|f1

  std::int64_t sft_select_steps = 1000;
  double sft_select_lr = 0.0;  // 0 -> upstream_lr

  std::string crows_path;
  std::string stereoset_path;
  std::string iptts_templates_path;
  std::string identifiers_path;
  std::string nli_occupations_path;
  std::string nli_gender_words_path;
  std::string nli_verb_phrases_path;

  std::string transfer_peft;
  bool allow_axis_mismatch = false;

  bool operator==(const ExperimentConfig&) const = default;

  ModelConfig model_config(int vocab_size) const {
    ModelConfig c;
    c.num_layers = model_layers;
    c.hidden = model_hidden;
    c.heads = model_heads;
    c.ffn = model_ffn;
    c.vocab_size = vocab_size;
    c.max_seq = model_max_seq;
    c.num_classes = model_classes;
    return c;
  }
};

namespace detail {

struct ConfigField {
  enum class Type { string_v, path_v, int_v, i64_v, u64_v, double_v, bool_v };
  Type type;
  void* (*member)(ExperimentConfig&);
};

template <class T, T ExperimentConfig::* M>
void* member_of(ExperimentConfig& c) {
  return &(c.*M);
}

inline const std::map<std::string, ConfigField>& config_schema() {
  using F = ConfigField;
  using T = ConfigField::Type;
  static const std::map<std::string, ConfigField> schema = {
      {"schema_version", F{T::int_v, member_of<int, &ExperimentConfig::schema_version>}},
      {"run_dir", F{T::path_v, member_of<std::string, &ExperimentConfig::run_dir>}},
      {"seed", F{T::u64_v, member_of<std::uint64_t, &ExperimentConfig::seed>}},
      {"peft.kind", F{T::string_v, member_of<std::string, &ExperimentConfig::method>}},
      {"peft.budget_fraction", F{T::double_v, member_of<double, &ExperimentConfig::budget_fraction>}},
      {"axis.path", F{T::path_v, member_of<std::string, &ExperimentConfig::axis_path>}},
      {"vocab.path", F{T::path_v, member_of<std::string, &ExperimentConfig::vocab_path>}},
      {"model.layers", F{T::int_v, member_of<int, &ExperimentConfig::model_layers>}},
      {"model.hidden", F{T::int_v, member_of<int, &ExperimentConfig::model_hidden>}},
      {"model.heads", F{T::int_v, member_of<int, &ExperimentConfig::model_heads>}},
      {"model.ffn", F{T::int_v, member_of<int, &ExperimentConfig::model_ffn>}},
      {"model.max_seq", F{T::int_v, member_of<int, &ExperimentConfig::model_max_seq>}},
      {"model.classes", F{T::int_v, member_of<int, &ExperimentConfig::model_classes>}},
      {"model.init_checkpoint", F{T::path_v, member_of<std::string, &ExperimentConfig::init_checkpoint>}},
      {"pretrain.corpus", F{T::path_v, member_of<std::string, &ExperimentConfig::pretrain_corpus>}},
      {"pretrain.steps", F{T::i64_v, member_of<std::int64_t, &ExperimentConfig::pretrain_steps>}},
      {"pretrain.lr", F{T::double_v, member_of<double, &ExperimentConfig::pretrain_lr>}},
      {"upstream.corpus", F{T::path_v, member_of<std::string, &ExperimentConfig::upstream_corpus>}},
      {"upstream.lr", F{T::double_v, member_of<double, &ExperimentConfig::upstream_lr>}},
      {"upstream.steps", F{T::i64_v, member_of<std::int64_t, &ExperimentConfig::upstream_steps>}},
      {"upstream.eval_interval", F{T::i64_v, member_of<std::int64_t, &ExperimentConfig::eval_interval>}},
      {"upstream.batch_size", F{T::int_v, member_of<int, &ExperimentConfig::upstream_batch>}},
      {"upstream.two_sided_cda", F{T::bool_v, member_of<bool, &ExperimentConfig::cda_two_sided>}},
      {"mlm.mask_prob", F{T::double_v, member_of<double, &ExperimentConfig::mask_prob>}},
      {"downstream.train", F{T::path_v, member_of<std::string, &ExperimentConfig::downstream_train>}},
      {"downstream.eval", F{T::path_v, member_of<std::string, &ExperimentConfig::downstream_eval>}},
      {"downstream.lr", F{T::double_v, member_of<double, &ExperimentConfig::downstream_lr>}},
      {"downstream.batch_size", F{T::int_v, member_of<int, &ExperimentConfig::downstream_batch>}},
      {"downstream.epochs", F{T::int_v, member_of<int, &ExperimentConfig::downstream_epochs>}},
      {"downstream.positive_class_weight",
       F{T::double_v, member_of<double, &ExperimentConfig::positive_class_weight>}},
      {"downstream.selection", F{T::string_v, member_of<std::string, &ExperimentConfig::selection>}},
      {"sft.select_steps", F{T::i64_v, member_of<std::int64_t, &ExperimentConfig::sft_select_steps>}},
      {"sft.select_lr", F{T::double_v, member_of<double, &ExperimentConfig::sft_select_lr>}},
      {"metrics.crows", F{T::path_v, member_of<std::string, &ExperimentConfig::crows_path>}},
      {"metrics.stereoset", F{T::path_v, member_of<std::string, &ExperimentConfig::stereoset_path>}},
      {"metrics.iptts_templates",
       F{T::path_v, member_of<std::string, &ExperimentConfig::iptts_templates_path>}},
      {"metrics.identifiers", F{T::path_v, member_of<std::string, &ExperimentConfig::identifiers_path>}},
      {"metrics.nli_occupations",
       F{T::path_v, member_of<std::string, &ExperimentConfig::nli_occupations_path>}},
      {"metrics.nli_gender_words",
       F{T::path_v, member_of<std::string, &ExperimentConfig::nli_gender_words_path>}},
      {"metrics.nli_verb_phrases",
       F{T::path_v, member_of<std::string, &ExperimentConfig::nli_verb_phrases_path>}},
      {"transfer.peft_checkpoint", F{T::path_v, member_of<std::string, &ExperimentConfig::transfer_peft>}},
      {"transfer.allow_axis_mismatch",
       F{T::bool_v, member_of<bool, &ExperimentConfig::allow_axis_mismatch>}},
  };
  return schema;
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline void apply_config_value(ExperimentConfig& cfg, const std::string& key,
                               const std::string& raw_value, const std::string& where,
                               const std::filesystem::path& base_dir) {
  const auto& schema = config_schema();
  const auto it = schema.find(key);
  if (it == schema.end()) throw std::runtime_error(where + ": unknown key '" + key + "'");
  const std::string value = trim(raw_value);
  void* member = it->second.member(cfg);
  using T = ConfigField::Type;
  try {
    switch (it->second.type) {
      case T::string_v:
        *static_cast<std::string*>(member) = value;
        break;
      case T::path_v: {
        std::string path = value;
        if (!path.empty() && std::filesystem::path(path).is_relative()) {
          std::filesystem::path base = base_dir;
          if (key == "run_dir") {
            // relative run directories may be re-rooted via the environment
            if (const char* root = std::getenv("PEFTDEBIAS_RUN_ROOT")) base = root;
          }
          path = (base / path).lexically_normal().string();
        }
        *static_cast<std::string*>(member) = path;
        break;
      }
      case T::int_v:
        *static_cast<int*>(member) = std::stoi(value);
        break;
      case T::i64_v:
        *static_cast<std::int64_t*>(member) = std::stoll(value);
        break;
      case T::u64_v:
        *static_cast<std::uint64_t*>(member) = std::stoull(value);
        break;
      case T::double_v:
        *static_cast<double*>(member) = std::stod(value);
        break;
      case T::bool_v:
        if (value == "true")
          *static_cast<bool*>(member) = true;
        else if (value == "false")
          *static_cast<bool*>(member) = false;
        else
          throw std::invalid_argument("bool");
        break;
    }
  } catch (const std::invalid_argument&) {
    throw std::runtime_error(where + ": bad value '" + value + "' for key '" + key + "'");
  } catch (const std::out_of_range&) {
    throw std::runtime_error(where + ": value out of range for key '" + key + "'");
  }
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& cfg) {
  if (cfg.schema_version != 1)
    throw std::runtime_error("config: unsupported schema_version " +
                             std::to_string(cfg.schema_version));
  static const std::vector<std::string> kMethods = {"ft",     "full_debias", "adapter",
                                                    "prompt", "lora",        "sft"};
  if (std::find(kMethods.begin(), kMethods.end(), cfg.method) == kMethods.end())
    throw std::runtime_error("config: peft.kind must be one of ft|full_debias|adapter|prompt|lora|sft");
  if (cfg.upstream_lr <= 0 || cfg.downstream_lr <= 0 || cfg.pretrain_lr <= 0)
    throw std::runtime_error("config: learning rates must be positive");
  if (cfg.eval_interval < 1 || (cfg.upstream_steps > 0 && cfg.eval_interval > cfg.upstream_steps))
    throw std::runtime_error("config: upstream.eval_interval must lie in [1, upstream.steps]");
  if (cfg.budget_fraction <= 0 || cfg.budget_fraction >= 1)
    throw std::runtime_error("config: peft.budget_fraction must lie in (0, 1)");
  if (cfg.mask_prob < 0 || cfg.mask_prob >= 1)
    throw std::runtime_error("config: mlm.mask_prob must lie in [0, 1)");
  if (cfg.selection != "auto" && cfg.selection != "accuracy" && cfg.selection != "f1")
    throw std::runtime_error("config: downstream.selection must be auto|accuracy|f1");
  if (cfg.positive_class_weight != 1.0 && cfg.model_classes != 2)
    throw std::runtime_error("config: class weighting applies to binary tasks only");
  if (cfg.upstream_batch < 1 || cfg.downstream_batch < 1)
    throw std::runtime_error("config: batch sizes must be >= 1");
  if (cfg.downstream_epochs < 0 || cfg.upstream_steps < 0 || cfg.pretrain_steps < 0)
    throw std::runtime_error("config: step counts must be >= 0");
}

inline ExperimentConfig parse_config(const std::string& path,
                                     const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file: " + path);
  const std::filesystem::path base_dir = std::filesystem::absolute(path).parent_path();

  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    const std::string where = path + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw std::runtime_error(where + ": expected key = value");
    detail::apply_config_value(cfg, detail::trim(trimmed.substr(0, eq)), trimmed.substr(eq + 1),
                               where, base_dir);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("override '" + ov + "': expected key=value");
    detail::apply_config_value(cfg, detail::trim(ov.substr(0, eq)), ov.substr(eq + 1),
                               "override '" + ov + "'", base_dir);
  }
  validate_config(cfg);
  return cfg;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// Canonical echo of a resolved config; parses back to an equal config.
inline std::string format_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "# resolved experiment config\n";
  os << "schema_version = " << cfg.schema_version << "\n";
  os << "run_dir = " << cfg.run_dir << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "peft.kind = " << cfg.method << "\n";
  os << "peft.budget_fraction = " << format_double(cfg.budget_fraction) << "\n";
  os << "axis.path = " << cfg.axis_path << "\n";
  os << "vocab.path = " << cfg.vocab_path << "\n";
  os << "model.layers = " << cfg.model_layers << "\n";
  os << "model.hidden = " << cfg.model_hidden << "\n";
  os << "model.heads = " << cfg.model_heads << "\n";
  os << "model.ffn = " << cfg.model_ffn << "\n";
  os << "model.max_seq = " << cfg.model_max_seq << "\n";
  os << "model.classes = " << cfg.model_classes << "\n";
  os << "model.init_checkpoint = " << cfg.init_checkpoint << "\n";
  os << "pretrain.corpus = " << cfg.pretrain_corpus << "\n";
  os << "pretrain.steps = " << cfg.pretrain_steps << "\n";
  os << "pretrain.lr = " << format_double(cfg.pretrain_lr) << "\n";
  os << "upstream.corpus = " << cfg.upstream_corpus << "\n";
  os << "upstream.lr = " << format_double(cfg.upstream_lr) << "\n";
  os << "upstream.steps = " << cfg.upstream_steps << "\n";
  os << "upstream.eval_interval = " << cfg.eval_interval << "\n";
  os << "upstream.batch_size = " << cfg.upstream_batch << "\n";
  os << "upstream.two_sided_cda = " << (cfg.cda_two_sided ? "true" : "false") << "\n";
  os << "mlm.mask_prob = " << format_double(cfg.mask_prob) << "\n";
  os << "downstream.train = " << cfg.downstream_train << "\n";
  os << "downstream.eval = " << cfg.downstream_eval << "\n";
  os << "downstream.lr = " << format_double(cfg.downstream_lr) << "\n";
  os << "downstream.batch_size = " << cfg.downstream_batch << "\n";
  os << "downstream.epochs = " << cfg.downstream_epochs << "\n";
  os << "downstream.positive_class_weight = " << format_double(cfg.positive_class_weight) << "\n";
  os << "downstream.selection = " << cfg.selection << "\n";
  os << "sft.select_steps = " << cfg.sft_select_steps << "\n";
  os << "sft.select_lr = " << format_double(cfg.sft_select_lr) << "\n";
  os << "metrics.crows = " << cfg.crows_path << "\n";
  os << "metrics.stereoset = " << cfg.stereoset_path << "\n";
  os << "metrics.iptts_templates = " << cfg.iptts_templates_path << "\n";
  os << "metrics.identifiers = " << cfg.identifiers_path << "\n";
  os << "metrics.nli_occupations = " << cfg.nli_occupations_path << "\n";
  os << "metrics.nli_gender_words = " << cfg.nli_gender_words_path << "\n";
  os << "metrics.nli_verb_phrases = " << cfg.nli_verb_phrases_path << "\n";
  os << "transfer.peft_checkpoint = " << cfg.transfer_peft << "\n";
  os << "transfer.allow_axis_mismatch = " << (cfg.allow_axis_mismatch ? "true" : "false") << "\n";
  return os.str();
}

// FNV-1a over the canonical echo; stable provenance tag. The output
// directory is not part of the experiment's identity.
inline std::string config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig keyed = cfg;
  keyed.run_dir.clear();
  const std::string text = format_config(keyed);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace peftdebias
