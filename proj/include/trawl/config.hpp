#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trawl/common.hpp"
#include "trawl/knowledge.hpp"
#include "trawl/model.hpp"
#include "trawl/synth.hpp"
#include "trawl/training.hpp"
#include "trawl/util/fsio.hpp"
#include "trawl/util/sha256.hpp"

namespace trawl::config {

// ---- minimal INI-style reader -------------------------------------------
// [section] headers, key = value lines, # or ; comments. Values may be
// double-quoted with \n \t \\ \" escapes. Unknown sections or keys are
// rejected so typos never fall through silently.

class KvFile {
 public:
  static KvFile parse(const std::string& text) {
    KvFile kv;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = trim(strip_comment(line));
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw std::runtime_error("config line " + std::to_string(lineno) + ": bad section header");
        section = trim(t.substr(1, t.size() - 2));
        kv.sections_.insert(section);
        continue;
      }
      auto eq = t.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(t.substr(0, eq));
      std::string value = trim(t.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error("config line " + std::to_string(lineno) + ": empty key");
      kv.values_[section + "." + key] = unquote(value);
    }
    return kv;
  }

  bool has(const std::string& dotted) const { return values_.count(dotted) > 0; }

  std::string get(const std::string& dotted, const std::string& fallback) const {
    auto it = values_.find(dotted);
    return it == values_.end() ? fallback : it->second;
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  const std::set<std::string>& sections() const { return sections_; }

 private:
  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
      if (!quoted && (s[i] == '#' || s[i] == ';')) return s.substr(0, i);
    }
    return s;
  }

  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::string unquote(const std::string& s) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') return s;
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (s[i] == '\\' && i + 2 < s.size() + 1) {
        char c = s[i + 1];
        if (c == 'n') { out.push_back('\n'); ++i; continue; }
        if (c == 't') { out.push_back('\t'); ++i; continue; }
        if (c == '\\') { out.push_back('\\'); ++i; continue; }
        if (c == '"') { out.push_back('"'); ++i; continue; }
      }
      out.push_back(s[i]);
    }
    return out;
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> sections_;
};

// ---- typed pipeline configuration ---------------------------------------

enum class KnowledgeProvider { none, raw, llm, external_file };

inline const char* provider_name(KnowledgeProvider p) {
  switch (p) {
    case KnowledgeProvider::none: return "none";
    case KnowledgeProvider::raw: return "raw";
    case KnowledgeProvider::llm: return "llm";
    case KnowledgeProvider::external_file: return "external-file";
  }
  return "none";
}

inline KnowledgeProvider provider_from_name(const std::string& s) {
  if (s == "none") return KnowledgeProvider::none;
  if (s == "raw") return KnowledgeProvider::raw;
  if (s == "llm") return KnowledgeProvider::llm;
  if (s == "external-file") return KnowledgeProvider::external_file;
  throw std::runtime_error("unknown knowledge provider: " + s);
}

enum class Ablation { full, no_cl, no_adapter };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_cl: return "no_cl";
    case Ablation::no_adapter: return "no_adapter";
  }
  return "full";
}

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "no_cl") return Ablation::no_cl;
  if (s == "no_adapter") return Ablation::no_adapter;
  throw std::runtime_error("unknown ablation: " + s);
}

struct EvalArm {
  KnowledgeProvider provider = KnowledgeProvider::raw;
  model::BackboneKind backbone = model::BackboneKind::deepfm;
  Ablation ablation = Ablation::full;

  std::string name() const {
    return std::string(provider_name(provider)) + ":" + model::backbone_name(backbone) + ":" +
           ablation_name(ablation);
  }

  static EvalArm parse(const std::string& s) {
    auto p1 = s.find(':');
    auto p2 = s.find(':', p1 == std::string::npos ? p1 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
      throw std::runtime_error("eval arm must be provider:backbone:ablation, got: " + s);
    EvalArm arm;
    arm.provider = provider_from_name(s.substr(0, p1));
    arm.backbone = model::backbone_from_name(s.substr(p1 + 1, p2 - p1 - 1));
    arm.ablation = ablation_from_name(s.substr(p2 + 1));
    return arm;
  }
};

struct PipelineConfig {
  // [paths]
  std::string dataset_dir = "data";
  std::string dataset_format = "csv";  // csv | ml1m
  std::string workdir = "work";
  std::string corpus_file;  // defaults to <dataset_dir>/corpus.jsonl

  // [split]
  std::array<int, 3> split_ratio{8, 1, 1};
  std::uint64_t split_seed = 7;
  int label_threshold = 3;

  // [link]
  double link_min_score = 0.6;

  // [knowledge]
  KnowledgeProvider provider = KnowledgeProvider::raw;
  int history_k = 10;
  std::string separator = "\n\n---\n\n";
  std::vector<std::string> key_factors{"genres", "themes", "awards"};
  std::string user_template_file;  // empty -> bundled default written to workdir
  std::string item_template_file;
  std::string external_knowledge_file;
  std::string llm_url;
  std::string llm_auth_env = "TRAWL_LLM_TOKEN";
  bool llm_stub = false;
  int llm_max_tokens = 512;
  double llm_temperature = 0.0;
  int llm_max_attempts = 3;
  int llm_backoff_ms = 250;
  std::string llm_fallback = "raw";  // raw | empty
  int llm_in_flight = 1;

  // [encoder]
  std::string encoder_backend = "hash";  // hash | file | http
  int encoder_dim = 64;
  std::uint64_t encoder_seed = 17;
  int encoder_window = 256;
  bool encoder_normalize = false;
  std::string encoder_user_table;  // backend=file
  std::string encoder_item_table;
  std::string encoder_url;  // backend=http

  // [behavior]
  double swing_alpha = 1.0;
  int candidate_cap = 500;

  // [model]
  model::ModelConfig model_config;

  // [train]
  training::TrainConfig train_config;

  // [eval]
  std::vector<EvalArm> eval_arms;
  int eval_num_seeds = 5;

  // [sweep]
  std::string sweep_parameter;  // w1 | w2 | tau; empty disables the stage
  std::vector<double> sweep_grid;

  // [synth]
  synth::SynthConfig synth_config;

  std::filesystem::path workdir_path() const { return workdir; }
  std::filesystem::path dataset_path() const { return dataset_dir; }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("config key " + key + ": expected boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::exception();
    return d;
  } catch (...) {
    throw std::runtime_error("config key " + key + ": expected number, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::int64_t d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::exception();
    return d;
  } catch (...) {
    throw std::runtime_error("config key " + key + ": expected integer, got '" + v + "'");
  }
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    std::size_t b = s.find_first_not_of(" \t");
    std::size_t e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  out.erase(std::remove_if(out.begin(), out.end(), [](const std::string& s) { return s.empty(); }),
            out.end());
  return out;
}

}  // namespace detail

// The full key universe; anything else in a config file is an error.
inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "paths.dataset_dir", "paths.format", "paths.workdir", "paths.corpus_file",
      "split.ratio", "split.seed", "split.threshold",
      "link.min_score",
      "knowledge.provider", "knowledge.k", "knowledge.separator", "knowledge.key_factors",
      "knowledge.user_template", "knowledge.item_template", "knowledge.external_file",
      "knowledge.llm_url", "knowledge.llm_auth_env", "knowledge.llm_stub",
      "knowledge.llm_max_tokens", "knowledge.llm_temperature", "knowledge.llm_max_attempts",
      "knowledge.llm_backoff_ms", "knowledge.llm_fallback", "knowledge.llm_in_flight",
      "encoder.backend", "encoder.dim", "encoder.seed", "encoder.window", "encoder.normalize",
      "encoder.user_table", "encoder.item_table", "encoder.url",
      "behavior.alpha", "behavior.candidate_cap",
      "model.backbone", "model.id_dim", "model.mlp_hidden_dims", "model.history_len_cap",
      "model.att_hidden_dim", "model.dropout", "model.num_experts", "model.adapter_output_dim",
      "model.expert_hidden_dim",
      "train.batch_size", "train.learning_rate", "train.temperature", "train.w1", "train.w2",
      "train.max_epochs", "train.patience", "train.seed", "train.cl_batch_mean",
      "eval.arms", "eval.num_seeds",
      "sweep.parameter", "sweep.grid",
      "synth.num_users", "synth.num_items", "synth.num_genres", "synth.interactions_per_user",
      "synth.favorite_genres", "synth.favored_pick_prob", "synth.favored_positive_prob",
      "synth.other_positive_prob", "synth.genre_tokens_per_doc", "synth.noise_tokens_per_doc",
      "synth.noise_vocab", "synth.unlinked_fraction", "synth.year_suffix_fraction", "synth.seed",
  };
  return keys;
}

inline const std::set<std::string>& known_sections() {
  static const std::set<std::string> sections{"paths", "split", "link", "knowledge", "encoder",
                                              "behavior", "model", "train", "eval", "sweep",
                                              "synth"};
  return sections;
}

inline PipelineConfig config_from_kv(const KvFile& kv) {
  for (const auto& s : kv.sections())
    if (!known_sections().count(s)) throw std::runtime_error("unknown config section: [" + s + "]");
  for (const auto& [key, value] : kv.values())
    if (!known_keys().count(key)) throw std::runtime_error("unknown config key: " + key);

  PipelineConfig cfg;
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  using detail::parse_list;

  cfg.dataset_dir = kv.get("paths.dataset_dir", cfg.dataset_dir);
  cfg.dataset_format = kv.get("paths.format", cfg.dataset_format);
  cfg.workdir = kv.get("paths.workdir", cfg.workdir);
  cfg.corpus_file = kv.get("paths.corpus_file", cfg.corpus_file);

  if (kv.has("split.ratio")) {
    auto parts = parse_list(kv.get("split.ratio", ""));
    if (parts.size() != 3) throw std::runtime_error("split.ratio needs three components");
    for (int b = 0; b < 3; ++b)
      cfg.split_ratio[static_cast<std::size_t>(b)] =
          static_cast<int>(parse_int("split.ratio", parts[static_cast<std::size_t>(b)]));
  }
  cfg.split_seed = static_cast<std::uint64_t>(parse_int("split.seed", kv.get("split.seed", "7")));
  cfg.label_threshold = static_cast<int>(parse_int("split.threshold", kv.get("split.threshold", "3")));

  cfg.link_min_score = parse_double("link.min_score", kv.get("link.min_score", "0.6"));

  cfg.provider = provider_from_name(kv.get("knowledge.provider", "raw"));
  cfg.history_k = static_cast<int>(parse_int("knowledge.k", kv.get("knowledge.k", "10")));
  cfg.separator = kv.get("knowledge.separator", cfg.separator);
  if (kv.has("knowledge.key_factors")) cfg.key_factors = parse_list(kv.get("knowledge.key_factors", ""));
  cfg.user_template_file = kv.get("knowledge.user_template", "");
  cfg.item_template_file = kv.get("knowledge.item_template", "");
  cfg.external_knowledge_file = kv.get("knowledge.external_file", "");
  cfg.llm_url = kv.get("knowledge.llm_url", "");
  cfg.llm_auth_env = kv.get("knowledge.llm_auth_env", cfg.llm_auth_env);
  cfg.llm_stub = parse_bool("knowledge.llm_stub", kv.get("knowledge.llm_stub", "false"));
  cfg.llm_max_tokens =
      static_cast<int>(parse_int("knowledge.llm_max_tokens", kv.get("knowledge.llm_max_tokens", "512")));
  cfg.llm_temperature =
      parse_double("knowledge.llm_temperature", kv.get("knowledge.llm_temperature", "0"));
  cfg.llm_max_attempts =
      static_cast<int>(parse_int("knowledge.llm_max_attempts", kv.get("knowledge.llm_max_attempts", "3")));
  cfg.llm_backoff_ms =
      static_cast<int>(parse_int("knowledge.llm_backoff_ms", kv.get("knowledge.llm_backoff_ms", "250")));
  cfg.llm_fallback = kv.get("knowledge.llm_fallback", "raw");
  cfg.llm_in_flight =
      static_cast<int>(parse_int("knowledge.llm_in_flight", kv.get("knowledge.llm_in_flight", "1")));

  cfg.encoder_backend = kv.get("encoder.backend", "hash");
  cfg.encoder_dim = static_cast<int>(parse_int("encoder.dim", kv.get("encoder.dim", "64")));
  cfg.encoder_seed = static_cast<std::uint64_t>(parse_int("encoder.seed", kv.get("encoder.seed", "17")));
  cfg.encoder_window = static_cast<int>(parse_int("encoder.window", kv.get("encoder.window", "256")));
  cfg.encoder_normalize = parse_bool("encoder.normalize", kv.get("encoder.normalize", "false"));
  cfg.encoder_user_table = kv.get("encoder.user_table", "");
  cfg.encoder_item_table = kv.get("encoder.item_table", "");
  cfg.encoder_url = kv.get("encoder.url", "");

  cfg.swing_alpha = parse_double("behavior.alpha", kv.get("behavior.alpha", "1.0"));
  cfg.candidate_cap =
      static_cast<int>(parse_int("behavior.candidate_cap", kv.get("behavior.candidate_cap", "500")));

  cfg.model_config.backbone.kind = model::backbone_from_name(kv.get("model.backbone", "deepfm"));
  cfg.model_config.backbone.id_dim =
      static_cast<int>(parse_int("model.id_dim", kv.get("model.id_dim", "16")));
  if (kv.has("model.mlp_hidden_dims")) {
    cfg.model_config.backbone.mlp_hidden_dims.clear();
    for (const auto& part : parse_list(kv.get("model.mlp_hidden_dims", "")))
      cfg.model_config.backbone.mlp_hidden_dims.push_back(
          static_cast<int>(parse_int("model.mlp_hidden_dims", part)));
  }
  cfg.model_config.backbone.history_len_cap =
      static_cast<int>(parse_int("model.history_len_cap", kv.get("model.history_len_cap", "30")));
  cfg.model_config.backbone.att_hidden_dim =
      static_cast<int>(parse_int("model.att_hidden_dim", kv.get("model.att_hidden_dim", "32")));
  cfg.model_config.backbone.dropout = parse_double("model.dropout", kv.get("model.dropout", "0"));
  cfg.model_config.num_experts =
      static_cast<int>(parse_int("model.num_experts", kv.get("model.num_experts", "4")));
  cfg.model_config.adapter_output_dim = static_cast<int>(
      parse_int("model.adapter_output_dim", kv.get("model.adapter_output_dim", "0")));
  cfg.model_config.expert_hidden_dim = static_cast<int>(
      parse_int("model.expert_hidden_dim", kv.get("model.expert_hidden_dim", "0")));

  cfg.train_config.batch_size =
      static_cast<int>(parse_int("train.batch_size", kv.get("train.batch_size", "256")));
  cfg.train_config.learning_rate =
      parse_double("train.learning_rate", kv.get("train.learning_rate", "1e-4"));
  cfg.train_config.temperature =
      parse_double("train.temperature", kv.get("train.temperature", "0.15"));
  cfg.train_config.cl_weight_user = parse_double("train.w1", kv.get("train.w1", "0.004"));
  cfg.train_config.cl_weight_item = parse_double("train.w2", kv.get("train.w2", "0.008"));
  cfg.train_config.max_epochs =
      static_cast<int>(parse_int("train.max_epochs", kv.get("train.max_epochs", "20")));
  cfg.train_config.patience =
      static_cast<int>(parse_int("train.patience", kv.get("train.patience", "3")));
  cfg.train_config.seed =
      static_cast<std::uint64_t>(parse_int("train.seed", kv.get("train.seed", "42")));
  cfg.train_config.cl_batch_mean =
      parse_bool("train.cl_batch_mean", kv.get("train.cl_batch_mean", "false"));

  if (kv.has("eval.arms")) {
    for (const auto& part : detail::parse_list(kv.get("eval.arms", "")))
      cfg.eval_arms.push_back(EvalArm::parse(part));
  } else {
    cfg.eval_arms = {EvalArm{KnowledgeProvider::raw, model::BackboneKind::deepfm, Ablation::full},
                     EvalArm{KnowledgeProvider::raw, model::BackboneKind::deepfm, Ablation::no_cl},
                     EvalArm{KnowledgeProvider::raw, model::BackboneKind::deepfm,
                             Ablation::no_adapter},
                     EvalArm{KnowledgeProvider::none, model::BackboneKind::deepfm, Ablation::full}};
  }
  cfg.eval_num_seeds =
      static_cast<int>(parse_int("eval.num_seeds", kv.get("eval.num_seeds", "5")));

  cfg.sweep_parameter = kv.get("sweep.parameter", "");
  if (kv.has("sweep.grid"))
    for (const auto& part : detail::parse_list(kv.get("sweep.grid", "")))
      cfg.sweep_grid.push_back(parse_double("sweep.grid", part));

  cfg.synth_config.num_users =
      static_cast<int>(parse_int("synth.num_users", kv.get("synth.num_users", "2000")));
  cfg.synth_config.num_items =
      static_cast<int>(parse_int("synth.num_items", kv.get("synth.num_items", "500")));
  cfg.synth_config.num_genres =
      static_cast<int>(parse_int("synth.num_genres", kv.get("synth.num_genres", "8")));
  cfg.synth_config.interactions_per_user = static_cast<int>(
      parse_int("synth.interactions_per_user", kv.get("synth.interactions_per_user", "30")));
  cfg.synth_config.favorite_genres =
      static_cast<int>(parse_int("synth.favorite_genres", kv.get("synth.favorite_genres", "2")));
  cfg.synth_config.favored_pick_prob =
      parse_double("synth.favored_pick_prob", kv.get("synth.favored_pick_prob", "0.7"));
  cfg.synth_config.favored_positive_prob =
      parse_double("synth.favored_positive_prob", kv.get("synth.favored_positive_prob", "0.85"));
  cfg.synth_config.other_positive_prob =
      parse_double("synth.other_positive_prob", kv.get("synth.other_positive_prob", "0.2"));
  cfg.synth_config.genre_tokens_per_doc = static_cast<int>(
      parse_int("synth.genre_tokens_per_doc", kv.get("synth.genre_tokens_per_doc", "8")));
  cfg.synth_config.noise_tokens_per_doc = static_cast<int>(
      parse_int("synth.noise_tokens_per_doc", kv.get("synth.noise_tokens_per_doc", "24")));
  cfg.synth_config.noise_vocab =
      static_cast<int>(parse_int("synth.noise_vocab", kv.get("synth.noise_vocab", "300")));
  cfg.synth_config.unlinked_fraction =
      parse_double("synth.unlinked_fraction", kv.get("synth.unlinked_fraction", "0.04"));
  cfg.synth_config.year_suffix_fraction =
      parse_double("synth.year_suffix_fraction", kv.get("synth.year_suffix_fraction", "0.3"));
  cfg.synth_config.seed =
      static_cast<std::uint64_t>(parse_int("synth.seed", kv.get("synth.seed", "1")));

  return cfg;
}

inline void check_range(bool ok, const std::string& message) {
  if (!ok) throw std::runtime_error("config validation: " + message);
}

inline void validate(const PipelineConfig& cfg) {
  check_range(cfg.dataset_format == "csv" || cfg.dataset_format == "ml1m",
              "paths.format must be csv or ml1m");
  for (int r : cfg.split_ratio) check_range(r > 0, "split.ratio components must be positive");
  check_range(cfg.label_threshold >= 1 && cfg.label_threshold <= 5,
              "split.threshold must be in [1,5]");
  check_range(cfg.link_min_score >= 0.0 && cfg.link_min_score <= 1.0,
              "link.min_score must be in [0,1]");
  check_range(cfg.history_k >= 1, "knowledge.k must be >= 1");
  check_range(!cfg.key_factors.empty(), "knowledge.key_factors must be non-empty");
  check_range(cfg.llm_fallback == "raw" || cfg.llm_fallback == "empty",
              "knowledge.llm_fallback must be raw or empty");
  check_range(cfg.llm_max_attempts >= 1, "knowledge.llm_max_attempts must be >= 1");
  check_range(cfg.llm_in_flight >= 1, "knowledge.llm_in_flight must be >= 1");
  check_range(cfg.encoder_backend == "hash" || cfg.encoder_backend == "file" ||
                  cfg.encoder_backend == "http",
              "encoder.backend must be hash, file or http");
  check_range(cfg.encoder_dim >= 1, "encoder.dim must be >= 1");
  check_range(cfg.encoder_window >= 1, "encoder.window must be >= 1");
  check_range(cfg.swing_alpha > 0.0, "behavior.alpha must be > 0");
  check_range(cfg.candidate_cap >= 1, "behavior.candidate_cap must be >= 1");
  check_range(cfg.model_config.backbone.id_dim >= 1, "model.id_dim must be >= 1");
  check_range(cfg.model_config.backbone.history_len_cap >= 1,
              "model.history_len_cap must be >= 1");
  check_range(cfg.model_config.backbone.dropout >= 0.0 && cfg.model_config.backbone.dropout < 1.0,
              "model.dropout must be in [0,1)");
  check_range(cfg.model_config.num_experts >= 1, "model.num_experts must be >= 1");
  check_range(cfg.train_config.batch_size >= 1, "train.batch_size must be >= 1");
  check_range(cfg.train_config.learning_rate > 0.0, "train.learning_rate must be > 0");
  check_range(cfg.train_config.temperature > 0.0, "train.temperature must be > 0");
  check_range(cfg.train_config.cl_weight_user >= 0.0, "train.w1 must be >= 0");
  check_range(cfg.train_config.cl_weight_item >= 0.0, "train.w2 must be >= 0");
  check_range(cfg.train_config.max_epochs >= 1, "train.max_epochs must be >= 1");
  check_range(cfg.train_config.patience >= 1, "train.patience must be >= 1");
  check_range(cfg.eval_num_seeds >= 1, "eval.num_seeds must be >= 1");
  if (!cfg.sweep_parameter.empty()) {
    check_range(cfg.sweep_parameter == "w1" || cfg.sweep_parameter == "w2" ||
                    cfg.sweep_parameter == "tau",
                "sweep.parameter must be w1, w2 or tau");
    check_range(!cfg.sweep_grid.empty(), "sweep.grid must be non-empty");
    if (cfg.sweep_parameter == "tau")
      for (double v : cfg.sweep_grid) check_range(v > 0.0, "sweep.grid for tau must be positive");
    else
      for (double v : cfg.sweep_grid) check_range(v >= 0.0, "sweep.grid weights must be >= 0");
  }
  if (cfg.encoder_backend == "file")
    check_range(!cfg.encoder_user_table.empty() && !cfg.encoder_item_table.empty(),
                "encoder.user_table and encoder.item_table are required for the file backend");
  if (cfg.encoder_backend == "http")
    check_range(!cfg.encoder_url.empty(), "encoder.url is required for the http backend");
  if (cfg.provider == KnowledgeProvider::external_file)
    check_range(!cfg.external_knowledge_file.empty(),
                "knowledge.external_file is required for the external-file provider");
  if (cfg.provider == KnowledgeProvider::llm)
    check_range(cfg.llm_stub || !cfg.llm_url.empty(),
                "knowledge.llm_url (or llm_stub=true) is required for the llm provider");
}

// Canonical normalized rendering: every key, resolved defaults included.
// Doubles as the --print-defaults output and the config digest input.
inline std::string render(const PipelineConfig& cfg) {
  std::ostringstream out;
  auto num = [](double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
    return std::string(buf, res.ptr);
  };
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char c : s) {
      if (c == '\n') q += "\\n";
      else if (c == '\t') q += "\\t";
      else if (c == '\\') q += "\\\\";
      else if (c == '"') q += "\\\"";
      else q.push_back(c);
    }
    q += "\"";
    return q;
  };
  out << "[paths]\n";
  out << "dataset_dir = " << cfg.dataset_dir << "\n";
  out << "format = " << cfg.dataset_format << "\n";
  out << "workdir = " << cfg.workdir << "\n";
  out << "corpus_file = " << cfg.corpus_file << "\n";
  out << "\n[split]\n";
  out << "ratio = " << cfg.split_ratio[0] << ", " << cfg.split_ratio[1] << ", "
      << cfg.split_ratio[2] << "\n";
  out << "seed = " << cfg.split_seed << "\n";
  out << "threshold = " << cfg.label_threshold << "\n";
  out << "\n[link]\n";
  out << "min_score = " << num(cfg.link_min_score) << "\n";
  out << "\n[knowledge]\n";
  out << "provider = " << provider_name(cfg.provider) << "\n";
  out << "k = " << cfg.history_k << "\n";
  out << "separator = " << quote(cfg.separator) << "\n";
  out << "key_factors = ";
  for (std::size_t i = 0; i < cfg.key_factors.size(); ++i)
    out << (i ? ", " : "") << cfg.key_factors[i];
  out << "\n";
  out << "user_template = " << cfg.user_template_file << "\n";
  out << "item_template = " << cfg.item_template_file << "\n";
  out << "external_file = " << cfg.external_knowledge_file << "\n";
  out << "llm_url = " << cfg.llm_url << "\n";
  out << "llm_auth_env = " << cfg.llm_auth_env << "\n";
  out << "llm_stub = " << (cfg.llm_stub ? "true" : "false") << "\n";
  out << "llm_max_tokens = " << cfg.llm_max_tokens << "\n";
  out << "llm_temperature = " << num(cfg.llm_temperature) << "\n";
  out << "llm_max_attempts = " << cfg.llm_max_attempts << "\n";
  out << "llm_backoff_ms = " << cfg.llm_backoff_ms << "\n";
  out << "llm_fallback = " << cfg.llm_fallback << "\n";
  out << "llm_in_flight = " << cfg.llm_in_flight << "\n";
  out << "\n[encoder]\n";
  out << "backend = " << cfg.encoder_backend << "\n";
  out << "dim = " << cfg.encoder_dim << "\n";
  out << "seed = " << cfg.encoder_seed << "\n";
  out << "window = " << cfg.encoder_window << "\n";
  out << "normalize = " << (cfg.encoder_normalize ? "true" : "false") << "\n";
  out << "user_table = " << cfg.encoder_user_table << "\n";
  out << "item_table = " << cfg.encoder_item_table << "\n";
  out << "url = " << cfg.encoder_url << "\n";
  out << "\n[behavior]\n";
  out << "alpha = " << num(cfg.swing_alpha) << "\n";
  out << "candidate_cap = " << cfg.candidate_cap << "\n";
  out << "\n[model]\n";
  out << "backbone = " << model::backbone_name(cfg.model_config.backbone.kind) << "\n";
  out << "id_dim = " << cfg.model_config.backbone.id_dim << "\n";
  out << "mlp_hidden_dims = ";
  for (std::size_t i = 0; i < cfg.model_config.backbone.mlp_hidden_dims.size(); ++i)
    out << (i ? ", " : "") << cfg.model_config.backbone.mlp_hidden_dims[i];
  out << "\n";
  out << "history_len_cap = " << cfg.model_config.backbone.history_len_cap << "\n";
  out << "att_hidden_dim = " << cfg.model_config.backbone.att_hidden_dim << "\n";
  out << "dropout = " << num(cfg.model_config.backbone.dropout) << "\n";
  out << "num_experts = " << cfg.model_config.num_experts << "\n";
  out << "adapter_output_dim = " << cfg.model_config.adapter_output_dim << "\n";
  out << "expert_hidden_dim = " << cfg.model_config.expert_hidden_dim << "\n";
  out << "\n[train]\n";
  out << "batch_size = " << cfg.train_config.batch_size << "\n";
  out << "learning_rate = " << num(cfg.train_config.learning_rate) << "\n";
  out << "temperature = " << num(cfg.train_config.temperature) << "\n";
  out << "w1 = " << num(cfg.train_config.cl_weight_user) << "\n";
  out << "w2 = " << num(cfg.train_config.cl_weight_item) << "\n";
  out << "max_epochs = " << cfg.train_config.max_epochs << "\n";
  out << "patience = " << cfg.train_config.patience << "\n";
  out << "seed = " << cfg.train_config.seed << "\n";
  out << "cl_batch_mean = " << (cfg.train_config.cl_batch_mean ? "true" : "false") << "\n";
  out << "\n[eval]\n";
  out << "arms = ";
  for (std::size_t i = 0; i < cfg.eval_arms.size(); ++i)
    out << (i ? ", " : "") << cfg.eval_arms[i].name();
  out << "\n";
  out << "num_seeds = " << cfg.eval_num_seeds << "\n";
  out << "\n[sweep]\n";
  out << "parameter = " << cfg.sweep_parameter << "\n";
  out << "grid = ";
  for (std::size_t i = 0; i < cfg.sweep_grid.size(); ++i)
    out << (i ? ", " : "") << num(cfg.sweep_grid[i]);
  out << "\n";
  out << "\n[synth]\n";
  out << "num_users = " << cfg.synth_config.num_users << "\n";
  out << "num_items = " << cfg.synth_config.num_items << "\n";
  out << "num_genres = " << cfg.synth_config.num_genres << "\n";
  out << "interactions_per_user = " << cfg.synth_config.interactions_per_user << "\n";
  out << "favorite_genres = " << cfg.synth_config.favorite_genres << "\n";
  out << "favored_pick_prob = " << num(cfg.synth_config.favored_pick_prob) << "\n";
  out << "favored_positive_prob = " << num(cfg.synth_config.favored_positive_prob) << "\n";
  out << "other_positive_prob = " << num(cfg.synth_config.other_positive_prob) << "\n";
  out << "genre_tokens_per_doc = " << cfg.synth_config.genre_tokens_per_doc << "\n";
  out << "noise_tokens_per_doc = " << cfg.synth_config.noise_tokens_per_doc << "\n";
  out << "noise_vocab = " << cfg.synth_config.noise_vocab << "\n";
  out << "unlinked_fraction = " << num(cfg.synth_config.unlinked_fraction) << "\n";
  out << "year_suffix_fraction = " << num(cfg.synth_config.year_suffix_fraction) << "\n";
  out << "seed = " << cfg.synth_config.seed << "\n";
  return out.str();
}

// Digest of the semantic configuration: [paths] is excluded so reports from
// different working directories remain comparable when the experiment itself
// is identical.
inline std::string digest(const PipelineConfig& cfg) {
  std::istringstream in(render(cfg));
  std::ostringstream out;
  std::string line;
  bool in_paths = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') in_paths = line == "[paths]";
    if (!in_paths) out << line << "\n";
  }
  return util::sha256_hex(out.str());
}

// Parse + defaults + range checks. Relative paths stay relative to the
// process working directory by design; the CLI resolves them.
inline PipelineConfig validate_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("config file not found: " + path.string());
  std::string text = util::read_file(path);
  auto kv = KvFile::parse(text);
  auto cfg = config_from_kv(kv);
  validate(cfg);
  return cfg;
}

inline PipelineConfig validate_config_text(const std::string& text) {
  auto kv = KvFile::parse(text);
  auto cfg = config_from_kv(kv);
  validate(cfg);
  return cfg;
}

}  // namespace trawl::config
