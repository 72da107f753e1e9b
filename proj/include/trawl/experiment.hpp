#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trawl/config.hpp"
#include "trawl/metrics.hpp"
#include "trawl/training.hpp"

namespace trawl::eval {

using config::Ablation;
using config::KnowledgeProvider;

struct MetricsReport {
  std::string arm;  // provider:backbone:ablation
  std::string provider;
  std::string backbone;
  std::string ablation;
  double auc = 0.0;
  double logloss = 0.0;
  double val_auc = 0.0;
  std::uint64_t seed = 0;
  std::string config_digest;
};

// Everything a training/evaluation arm consumes. Table/pair pointers may be
// null; run_arm reports which stage is missing when an arm needs them.
struct ExperimentInputs {
  const std::vector<corpus::LabeledInteraction>* interactions = nullptr;
  const corpus::DatasetSplit* split = nullptr;
  const std::vector<corpus::ItemMeta>* items = nullptr;
  const std::vector<corpus::UserMeta>* users = nullptr;
  const encoder::EmbeddingTable* user_table = nullptr;
  const encoder::EmbeddingTable* item_table = nullptr;
  const behavior::PositivePairIndex* user_pairs = nullptr;
  const behavior::PositivePairIndex* item_pairs = nullptr;
};

namespace detail {

inline model::KnowledgeMode mode_for(KnowledgeProvider provider, Ablation ablation) {
  if (provider == KnowledgeProvider::none) return model::KnowledgeMode::none;
  if (ablation == Ablation::no_adapter) return model::KnowledgeMode::fixed_projection;
  return model::KnowledgeMode::adapter;
}

struct ArmRun {
  training::TrainState state;
  std::vector<double> scores;  // on the requested split
  std::vector<int> labels;
};

inline ArmRun execute_arm(const ExperimentInputs& inputs, KnowledgeProvider provider,
                          model::BackboneKind backbone, Ablation ablation,
                          model::ModelConfig model_cfg, training::TrainConfig train_cfg,
                          std::uint64_t seed, bool score_validation) {
  if (inputs.interactions == nullptr || inputs.split == nullptr)
    throw std::runtime_error("run_arm: missing interactions/split; run the ingest stage first");
  const bool with_knowledge = provider != KnowledgeProvider::none;
  if (with_knowledge && (inputs.user_table == nullptr || inputs.item_table == nullptr))
    throw std::runtime_error(std::string("run_arm: missing semantic embeddings for provider '") +
                             config::provider_name(provider) +
                             "'; run the generate and encode stages first");
  const bool with_cl = with_knowledge && ablation == Ablation::full;
  if (with_cl && (inputs.user_pairs == nullptr || inputs.item_pairs == nullptr))
    throw std::runtime_error("run_arm: missing positive pairs; run the mine stage first");

  static const std::vector<corpus::ItemMeta> no_items;
  static const std::vector<corpus::UserMeta> no_users;
  auto bundle = training::build_bundle(
      *inputs.interactions, *inputs.split, inputs.items ? *inputs.items : no_items,
      inputs.users ? *inputs.users : no_users, with_knowledge ? inputs.user_table : nullptr,
      with_knowledge ? inputs.item_table : nullptr, with_cl ? inputs.user_pairs : nullptr,
      with_cl ? inputs.item_pairs : nullptr);

  model_cfg.backbone.kind = backbone;
  model_cfg.mode = mode_for(provider, ablation);
  model_cfg.init_seed = seed;
  train_cfg.seed = seed;
  if (ablation != Ablation::full || !with_knowledge) {
    train_cfg.cl_weight_user = 0.0;
    train_cfg.cl_weight_item = 0.0;
  }

  nn::ParamStore params;
  model::CtrModel model(model_cfg, bundle.features, bundle.user_sem_dim, bundle.item_sem_dim,
                        params);
  ArmRun run;
  run.state = training::train_joint(model, params, bundle, train_cfg);

  const auto& samples = score_validation ? bundle.valid : bundle.test;
  run.scores = training::score_samples(model, bundle, samples);
  run.labels.reserve(samples.size());
  for (const auto& s : samples) run.labels.push_back(s.label);
  return run;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace detail

// Train one arm and evaluate it once on the test split.
inline MetricsReport run_arm(const ExperimentInputs& inputs, KnowledgeProvider provider,
                             model::BackboneKind backbone, Ablation ablation,
                             const model::ModelConfig& model_cfg,
                             const training::TrainConfig& train_cfg, std::uint64_t seed,
                             const std::string& config_digest) {
  auto run = detail::execute_arm(inputs, provider, backbone, ablation, model_cfg, train_cfg, seed,
                                 false);
  auto auc_value = auc(run.scores, run.labels);
  if (!auc_value.has_value())
    throw std::runtime_error("run_arm: test split is single-class, AUC undefined");

  MetricsReport report;
  report.provider = config::provider_name(provider);
  report.backbone = model::backbone_name(backbone);
  report.ablation = config::ablation_name(ablation);
  report.arm = report.provider + ":" + report.backbone + ":" + report.ablation;
  report.auc = *auc_value;
  report.logloss = logloss(run.scores, run.labels);
  report.val_auc = run.state.best_val_auc;
  report.seed = seed;
  report.config_digest = config_digest;
  return report;
}

struct SweepSpec {
  std::string parameter;  // w1 | w2 | tau
  std::vector<double> grid;
  KnowledgeProvider provider = KnowledgeProvider::raw;
  model::BackboneKind backbone = model::BackboneKind::deepfm;
};

// One report per grid point, scored on the validation split.
inline std::vector<MetricsReport> run_sweep(const ExperimentInputs& inputs, const SweepSpec& spec,
                                            const model::ModelConfig& model_cfg,
                                            const training::TrainConfig& base_train,
                                            std::uint64_t seed, const std::string& config_digest) {
  if (spec.grid.empty()) throw std::runtime_error("run_sweep: empty grid");
  std::vector<MetricsReport> reports;
  for (double value : spec.grid) {
    training::TrainConfig train_cfg = base_train;
    if (spec.parameter == "w1")
      train_cfg.cl_weight_user = value;
    else if (spec.parameter == "w2")
      train_cfg.cl_weight_item = value;
    else if (spec.parameter == "tau")
      train_cfg.temperature = value;
    else
      throw std::runtime_error("run_sweep: unknown parameter " + spec.parameter);

    auto run = detail::execute_arm(inputs, spec.provider, spec.backbone, Ablation::full,
                                   model_cfg, train_cfg, seed, true);
    auto auc_value = auc(run.scores, run.labels);

    MetricsReport report;
    std::ostringstream name;
    name << "sweep:" << spec.parameter << "=" << value;
    report.arm = name.str();
    report.provider = config::provider_name(spec.provider);
    report.backbone = model::backbone_name(spec.backbone);
    report.ablation = "full";
    report.auc = auc_value.value_or(0.5);
    report.logloss = logloss(run.scores, run.labels);
    report.val_auc = report.auc;
    report.seed = seed;
    report.config_digest = config_digest;
    reports.push_back(std::move(report));
  }
  return reports;
}

// ---- report files ---------------------------------------------------------

inline std::string reports_to_jsonl(const std::vector<MetricsReport>& reports) {
  std::string out;
  for (const auto& r : reports) {
    nlohmann::json j{{"arm", r.arm},          {"provider", r.provider},
                     {"backbone", r.backbone}, {"ablation", r.ablation},
                     {"auc", r.auc},           {"logloss", r.logloss},
                     {"val_auc", r.val_auc},   {"seed", r.seed},
                     {"config_digest", r.config_digest}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<MetricsReport> reports_from_jsonl(const std::string& text) {
  std::vector<MetricsReport> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("kind")) continue;  // summary rows
    MetricsReport r;
    r.arm = j.at("arm").get<std::string>();
    r.provider = j.at("provider").get<std::string>();
    r.backbone = j.at("backbone").get<std::string>();
    r.ablation = j.at("ablation").get<std::string>();
    r.auc = j.at("auc").get<double>();
    r.logloss = j.at("logloss").get<double>();
    r.val_auc = j.at("val_auc").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

// Median and spread across seeds, one summary object per arm.
inline std::string summarize_reports_jsonl(const std::vector<MetricsReport>& reports) {
  std::map<std::string, std::vector<const MetricsReport*>> by_arm;
  for (const auto& r : reports) by_arm[r.arm].push_back(&r);
  std::string out;
  for (const auto& [arm, rows] : by_arm) {
    std::vector<double> aucs, logs;
    for (const auto* r : rows) {
      aucs.push_back(r->auc);
      logs.push_back(r->logloss);
    }
    auto minmax_auc = std::minmax_element(aucs.begin(), aucs.end());
    nlohmann::json j{{"kind", "summary"},
                     {"arm", arm},
                     {"seeds", rows.size()},
                     {"median_auc", detail::median(aucs)},
                     {"min_auc", *minmax_auc.first},
                     {"max_auc", *minmax_auc.second},
                     {"median_logloss", detail::median(logs)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string sweep_table_tsv(const std::string& parameter,
                                   const std::vector<double>& grid,
                                   const std::vector<MetricsReport>& reports) {
  auto num = [](double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  std::string out = "parameter\tvalue\tval_auc\tval_logloss\tseed\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    out += parameter + '\t' + num(grid[i % grid.size()]) + '\t' + num(reports[i].val_auc) + '\t' +
           num(reports[i].logloss) + '\t' + std::to_string(reports[i].seed) + '\n';
  }
  return out;
}

}  // namespace trawl::eval
