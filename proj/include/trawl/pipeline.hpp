#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trawl/behavior.hpp"
#include "trawl/config.hpp"
#include "trawl/corpus.hpp"
#include "trawl/encoder.hpp"
#include "trawl/experiment.hpp"
#include "trawl/knowledge.hpp"
#include "trawl/llm_http.hpp"
#include "trawl/synth.hpp"
#include "trawl/training.hpp"

namespace trawl::pipeline {

namespace fs = std::filesystem;
using config::KnowledgeProvider;
using config::PipelineConfig;

// ---- manifest --------------------------------------------------------------
// Records, per stage instance, a digest of everything the stage read and the
// digests of everything it wrote. A stage re-runs only when either side
// changed (or --force).

class Manifest {
 public:
  static Manifest load(const fs::path& path) {
    Manifest m;
    m.path_ = path;
    if (fs::exists(path)) {
      auto j = nlohmann::json::parse(util::read_file(path));
      for (auto& [stage, entry] : j.at("stages").items()) {
        Entry e;
        e.input_digest = entry.at("input_digest").get<std::string>();
        for (auto& [file, digest] : entry.at("outputs").items())
          e.outputs[file] = digest.get<std::string>();
        m.entries_[stage] = std::move(e);
      }
    }
    return m;
  }

  bool is_fresh(const std::string& stage, const std::string& input_digest,
                const fs::path& workdir) const {
    auto it = entries_.find(stage);
    if (it == entries_.end() || it->second.input_digest != input_digest) return false;
    for (const auto& [file, digest] : it->second.outputs) {
      fs::path p = workdir / file;
      if (!fs::exists(p) || util::file_sha256_hex(p) != digest) return false;
    }
    return true;
  }

  void record(const std::string& stage, const std::string& input_digest,
              const std::vector<std::string>& outputs, const fs::path& workdir) {
    Entry e;
    e.input_digest = input_digest;
    for (const auto& file : outputs) e.outputs[file] = util::file_sha256_hex(workdir / file);
    entries_[stage] = std::move(e);
    save();
  }

 private:
  void save() const {
    nlohmann::json j;
    j["stages"] = nlohmann::json::object();
    for (const auto& [stage, e] : entries_) {
      nlohmann::json entry;
      entry["input_digest"] = e.input_digest;
      entry["outputs"] = nlohmann::json::object();
      for (const auto& [file, digest] : e.outputs) entry["outputs"][file] = digest;
      j["stages"][stage] = std::move(entry);
    }
    util::atomic_write_file(path_, j.dump(2) + "\n");
  }

  struct Entry {
    std::string input_digest;
    std::map<std::string, std::string> outputs;
  };

  fs::path path_;
  std::map<std::string, Entry> entries_;
};

struct StageOutcome {
  std::string stage;
  bool skipped = false;
  std::vector<std::string> outputs;
};

// Bundled fallback prompt templates, written into the workdir when the
// config does not point at template files. Kept as data so deployments can
// edit them without touching code.
inline const char* default_user_template() {
  return
      "You assist a recommender system by describing a user's tastes from the\n"
      "reference text of items they recently consumed.\n\n"
      "### Profile\n{{profile}}\n\n"
      "### Knowledge\n{{knowledge}}\n\n"
      "### Key factors\n{{factors}}\n\n"
      "### Instructions\n"
      "Summarize this user's preferences as recommendation knowledge. Organize the\n"
      "answer around the key factors, use the profile when it is informative, and\n"
      "infer tastes the history implies even when no single item states them.\n"
      "Answer in plain text, at most 150 words.\n";
}

inline const char* default_item_template() {
  return
      "You assist a recommender system by turning raw reference text about an item\n"
      "into knowledge that is directly useful for recommendation.\n\n"
      "### Knowledge\n{{knowledge}}\n\n"
      "### Key factors\n{{factors}}\n\n"
      "### Instructions\n"
      "Extract the recommendation-relevant facts about this item from the knowledge\n"
      "above. Organize the answer around the key factors, infer the audiences the\n"
      "item would appeal to, and leave out plot filler and trivia. Answer in plain\n"
      "text, at most 150 words.\n";
}

class Runner {
 public:
  Runner(PipelineConfig cfg, bool force = false,
         std::optional<std::uint64_t> seed_override = std::nullopt,
         std::ostream* log = nullptr)
      : cfg_(std::move(cfg)), force_(force), log_(log) {
    if (seed_override) {
      cfg_.split_seed = *seed_override;
      cfg_.train_config.seed = *seed_override;
      cfg_.synth_config.seed = *seed_override;
    }
    fs::create_directories(cfg_.workdir_path());
    manifest_ = std::make_unique<Manifest>(Manifest::load(workfile("manifest.json")));
    config_digest_ = config::digest(cfg_);
  }

  const PipelineConfig& effective_config() const { return cfg_; }

  // external LLM client injection point (tests plug a stub here)
  void set_llm_client(std::shared_ptr<knowledge::LanguageModelClient> client) {
    injected_client_ = std::move(client);
  }

  StageOutcome run_stage(const std::string& name) {
    if (name == "synth") return stage_synth();
    if (name == "ingest") return stage_ingest();
    if (name == "link") return stage_link();
    if (name == "generate") return stage_generate(cfg_.provider);
    if (name == "encode") return stage_encode(cfg_.provider);
    if (name == "mine") return stage_mine();
    if (name == "train") return stage_train();
    if (name == "evaluate") return stage_evaluate();
    if (name == "sweep") return stage_sweep();
    throw std::runtime_error("unknown stage: " + name);
  }

  std::vector<StageOutcome> run_all() {
    std::vector<StageOutcome> outcomes;
    outcomes.push_back(stage_ingest());
    outcomes.push_back(stage_link());
    for (auto provider : needed_providers()) {
      outcomes.push_back(stage_generate(provider));
      outcomes.push_back(stage_encode(provider));
    }
    outcomes.push_back(stage_mine());
    outcomes.push_back(stage_train());
    outcomes.push_back(stage_evaluate());
    if (!cfg_.sweep_parameter.empty()) outcomes.push_back(stage_sweep());
    return outcomes;
  }

  fs::path workfile(const std::string& name) const { return cfg_.workdir_path() / name; }

 private:
  void note(const std::string& line) const {
    if (log_) (*log_) << line << "\n";
  }

  std::vector<KnowledgeProvider> needed_providers() const {
    std::set<std::string> seen;
    std::vector<KnowledgeProvider> out;
    auto add = [&](KnowledgeProvider p) {
      if (p == KnowledgeProvider::none) return;
      if (seen.insert(config::provider_name(p)).second) out.push_back(p);
    };
    add(cfg_.provider);
    for (const auto& arm : cfg_.eval_arms) add(arm.provider);
    return out;
  }

  // slice named sections out of the canonical config rendering
  std::string config_sections(const std::set<std::string>& names) const {
    std::istringstream in(config::render(cfg_));
    std::ostringstream out;
    std::string line, current;
    while (std::getline(in, line)) {
      if (!line.empty() && line.front() == '[')
        current = line.substr(1, line.size() - 2);
      if (names.count(current)) out << line << "\n";
    }
    return out.str();
  }

  std::string digest_of_inputs(const std::string& config_part,
                               const std::vector<fs::path>& files) const {
    util::Sha256 h;
    h.update(config_part);
    for (const auto& f : files) {
      h.update(f.string());
      h.update(fs::exists(f) ? util::file_sha256_hex(f) : std::string("absent"));
    }
    return h.hex_digest();
  }

  StageOutcome finish(const std::string& stage, const std::string& input_digest,
                      std::vector<std::string> outputs) {
    manifest_->record(stage, input_digest, outputs, cfg_.workdir_path());
    note("stage " + stage + ": done");
    return {stage, false, std::move(outputs)};
  }

  bool can_skip(const std::string& stage, const std::string& input_digest) const {
    return !force_ && manifest_->is_fresh(stage, input_digest, cfg_.workdir_path());
  }

  void require(const fs::path& p, const std::string& producer_stage) const {
    if (!fs::exists(p))
      throw std::runtime_error("missing artifact " + p.string() + "; run the " + producer_stage +
                               " stage first");
  }

  // ---- dataset file locations ------------------------------------------

  fs::path interactions_path() const {
    return cfg_.dataset_path() /
           (cfg_.dataset_format == "ml1m" ? "ratings.dat" : "interactions.csv");
  }
  fs::path items_path() const {
    return cfg_.dataset_path() / (cfg_.dataset_format == "ml1m" ? "movies.dat" : "items.tsv");
  }
  fs::path users_path() const {
    return cfg_.dataset_path() / (cfg_.dataset_format == "ml1m" ? "users.dat" : "users.tsv");
  }
  fs::path corpus_path() const {
    return cfg_.corpus_file.empty() ? cfg_.dataset_path() / "corpus.jsonl"
                                    : fs::path(cfg_.corpus_file);
  }

  std::vector<corpus::ItemMeta> load_items() const {
    return cfg_.dataset_format == "ml1m" ? corpus::parse_ml1m_items(items_path())
                                         : corpus::parse_tsv_items(items_path());
  }
  std::vector<corpus::UserMeta> load_users() const {
    if (!fs::exists(users_path())) return {};
    return cfg_.dataset_format == "ml1m" ? corpus::parse_ml1m_users(users_path())
                                         : corpus::parse_tsv_users(users_path());
  }

  // ---- stages -------------------------------------------------------------

  StageOutcome stage_synth() {
    std::string digest = digest_of_inputs(config_sections({"synth"}), {});
    // synthetic data lands in the dataset dir, not the workdir; always rebuild
    fs::create_directories(cfg_.dataset_path());
    auto data = synth::generate(cfg_.synth_config);
    synth::write_dataset(data, cfg_.dataset_path());
    note("stage synth: wrote dataset to " + cfg_.dataset_path().string());
    return {"synth", false, {"interactions.csv", "items.tsv", "users.tsv", "corpus.jsonl"}};
  }

  StageOutcome stage_ingest() {
    auto input_digest = digest_of_inputs(config_sections({"paths", "split"}),
                                         {interactions_path(), items_path(), users_path()});
    if (can_skip("ingest", input_digest)) return {"ingest", true, {}};

    auto format = cfg_.dataset_format == "ml1m" ? corpus::IngestFormat::ml1m
                                                : corpus::IngestFormat::csv;
    auto ingest = corpus::ingest_interactions(interactions_path(), format);
    auto deduped = corpus::deduplicate_latest(ingest.records);
    auto labeled = corpus::binarize(deduped, cfg_.label_threshold);

    std::vector<corpus::UserId> users;
    for (const auto& r : labeled) users.push_back(r.user_id);
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    auto split = corpus::split_users(users, cfg_.split_ratio, cfg_.split_seed);

    std::size_t positives = 0;
    std::set<corpus::ItemId> items;
    for (const auto& r : labeled) {
      positives += static_cast<std::size_t>(r.label);
      items.insert(r.item_id);
    }
    nlohmann::json report{{"lines_parsed", ingest.report.parsed},
                          {"rejected_malformed", ingest.report.rejected_malformed},
                          {"rejected_invalid", ingest.report.rejected_invalid},
                          {"interactions", labeled.size()},
                          {"duplicates_dropped", ingest.records.size() - deduped.size()},
                          {"users", users.size()},
                          {"items", items.size()},
                          {"positives", positives},
                          {"negatives", labeled.size() - positives}};

    util::atomic_write_file(workfile("interactions.jsonl"), corpus::to_jsonl(labeled));
    util::atomic_write_file(workfile("split.jsonl"), corpus::split_to_jsonl(split));
    util::atomic_write_file(workfile("ingest_report.json"), report.dump(2) + "\n");
    return finish("ingest", input_digest,
                  {"interactions.jsonl", "split.jsonl", "ingest_report.json"});
  }

  StageOutcome stage_link() {
    auto input_digest =
        digest_of_inputs(config_sections({"paths", "link"}), {items_path(), corpus_path()});
    if (can_skip("link", input_digest)) return {"link", true, {}};

    auto items = load_items();
    auto corpus_docs = corpus::load_corpus_jsonl(corpus_path());
    auto linked = corpus::link_items(items, corpus_docs.docs, cfg_.link_min_score);

    std::string unlinked;
    std::map<corpus::ItemId, std::string> titles;
    for (const auto& item : items) titles[item.item_id] = item.title;
    for (auto id : linked.unlinked) {
      nlohmann::json j{{"item_id", id}, {"title", titles[id]}};
      unlinked += j.dump();
      unlinked += '\n';
    }
    util::atomic_write_file(workfile("links.jsonl"), corpus::links_to_jsonl(linked.links));
    util::atomic_write_file(workfile("unlinked.jsonl"), unlinked);
    return finish("link", input_digest, {"links.jsonl", "unlinked.jsonl"});
  }

  std::string knowledge_file(KnowledgeProvider p) const {
    return std::string("knowledge_") + config::provider_name(p) + ".jsonl";
  }

  StageOutcome stage_generate(KnowledgeProvider provider) {
    if (provider == KnowledgeProvider::none)
      throw std::runtime_error("generate stage needs a knowledge provider other than none");
    std::string stage = std::string("generate:") + config::provider_name(provider);

    std::vector<fs::path> inputs{workfile("interactions.jsonl"), workfile("links.jsonl"),
                                 corpus_path(), users_path()};
    if (provider == KnowledgeProvider::external_file)
      inputs.push_back(cfg_.external_knowledge_file);
    if (provider == KnowledgeProvider::llm) {
      inputs.push_back(user_template_path());
      inputs.push_back(item_template_path());
    }
    auto input_digest = digest_of_inputs(config_sections({"knowledge"}), inputs);
    if (can_skip(stage, input_digest)) return {stage, true, {}};

    require(workfile("interactions.jsonl"), "ingest");
    require(workfile("links.jsonl"), "link");

    auto interactions = corpus::labeled_from_jsonl(util::read_file(workfile("interactions.jsonl")));
    auto links = corpus::links_from_jsonl(util::read_file(workfile("links.jsonl")));
    auto corpus_docs = corpus::load_corpus_jsonl(corpus_path());

    std::map<corpus::DocId, const corpus::KnowledgeDoc*> docs_by_id;
    for (const auto& d : corpus_docs.docs) docs_by_id[d.doc_id] = &d;
    std::map<corpus::ItemId, std::string> item_bodies;
    for (const auto& link : links) {
      auto it = docs_by_id.find(link.doc_id);
      if (it != docs_by_id.end()) item_bodies[link.item_id] = it->second->body;
    }

    std::set<corpus::UserId> user_ids;
    std::set<corpus::ItemId> item_ids;
    for (const auto& r : interactions) {
      user_ids.insert(r.user_id);
      item_ids.insert(r.item_id);
    }

    std::vector<knowledge::RecKnowledge> rows;
    if (provider == KnowledgeProvider::raw) {
      for (auto u : user_ids)
        rows.push_back({Target::user, u,
                        knowledge::build_user_raw_knowledge(u, interactions, item_bodies,
                                                            cfg_.history_k, cfg_.separator),
                        knowledge::ProviderTag::raw});
      for (auto i : item_ids) {
        auto it = item_bodies.find(i);
        rows.push_back({Target::item, i, it == item_bodies.end() ? std::string{} : it->second,
                        knowledge::ProviderTag::raw});
      }
    } else if (provider == KnowledgeProvider::external_file) {
      auto provided =
          knowledge::knowledge_from_jsonl(util::read_file(cfg_.external_knowledge_file));
      std::map<std::pair<int, std::int64_t>, std::string> by_subject;
      for (const auto& r : provided)
        by_subject[{r.target == Target::user ? 0 : 1, r.subject_id}] = r.text;
      auto pick = [&](Target t, std::int64_t id) {
        auto it = by_subject.find({t == Target::user ? 0 : 1, id});
        return it == by_subject.end() ? std::string{} : it->second;
      };
      for (auto u : user_ids)
        rows.push_back({Target::user, u, pick(Target::user, u),
                        knowledge::ProviderTag::external_file});
      for (auto i : item_ids)
        rows.push_back({Target::item, i, pick(Target::item, i),
                        knowledge::ProviderTag::external_file});
    } else {
      rows = generate_with_llm(interactions, item_bodies, user_ids, item_ids);
    }

    util::atomic_write_file(workfile(knowledge_file(provider)),
                            knowledge::knowledge_to_jsonl(rows));
    return finish(stage, input_digest, {knowledge_file(provider)});
  }

  fs::path user_template_path() const {
    return cfg_.user_template_file.empty() ? workfile("templates/user_prompt.txt")
                                           : fs::path(cfg_.user_template_file);
  }
  fs::path item_template_path() const {
    return cfg_.item_template_file.empty() ? workfile("templates/item_prompt.txt")
                                           : fs::path(cfg_.item_template_file);
  }

  std::vector<knowledge::RecKnowledge> generate_with_llm(
      const std::vector<corpus::LabeledInteraction>& interactions,
      const std::map<corpus::ItemId, std::string>& item_bodies,
      const std::set<corpus::UserId>& user_ids, const std::set<corpus::ItemId>& item_ids) {
    if (cfg_.user_template_file.empty())
      util::atomic_write_file(workfile("templates/user_prompt.txt"), default_user_template());
    if (cfg_.item_template_file.empty())
      util::atomic_write_file(workfile("templates/item_prompt.txt"), default_item_template());
    std::string user_template = util::read_file(user_template_path());
    std::string item_template = util::read_file(item_template_path());

    knowledge::KeyFactorSet factors{cfg_.key_factors};
    factors.validate();

    std::map<corpus::UserId, knowledge::UserProfile> profiles;
    for (const auto& m : load_users()) {
      knowledge::UserProfile p;
      p.user_id = m.user_id;
      if (!m.gender.empty()) p.attributes.push_back({"gender", m.gender});
      if (!m.age_bucket.empty()) p.attributes.push_back({"age bucket", m.age_bucket});
      if (!m.occupation.empty()) p.attributes.push_back({"occupation", m.occupation});
      profiles[m.user_id] = std::move(p);
    }

    std::shared_ptr<knowledge::LanguageModelClient> client = injected_client_;
    if (!client) {
      if (cfg_.llm_stub) {
        client = std::make_shared<knowledge::StubLlmClient>(200, true);
      } else {
        client = std::make_shared<knowledge::HttpLlmClient>(cfg_.llm_url, cfg_.llm_auth_env);
      }
    }
    knowledge::KnowledgeCache cache(workfile("llm_cache.jsonl"));
    knowledge::ExtractOptions options;
    options.max_tokens = cfg_.llm_max_tokens;
    options.temperature = cfg_.llm_temperature;
    options.max_attempts = cfg_.llm_max_attempts;
    options.backoff_ms = cfg_.llm_backoff_ms;
    options.fallback = cfg_.llm_fallback == "raw" ? knowledge::LlmFallback::raw
                                                  : knowledge::LlmFallback::empty;

    struct Job {
      Target target;
      std::int64_t subject;
      std::string raw;
      knowledge::Prompt prompt;
    };
    std::vector<Job> jobs;
    for (auto u : user_ids) {
      Job job;
      job.target = Target::user;
      job.subject = u;
      job.raw = knowledge::build_user_raw_knowledge(u, interactions, item_bodies, cfg_.history_k,
                                                    cfg_.separator);
      auto prof = profiles.find(u);
      job.prompt = knowledge::build_prompt(
          Target::user, u, job.raw,
          prof == profiles.end() ? std::optional<knowledge::UserProfile>{} : prof->second,
          factors, user_template);
      jobs.push_back(std::move(job));
    }
    for (auto i : item_ids) {
      Job job;
      job.target = Target::item;
      job.subject = i;
      auto it = item_bodies.find(i);
      job.raw = it == item_bodies.end() ? std::string{} : it->second;
      job.prompt =
          knowledge::build_prompt(Target::item, i, job.raw, std::nullopt, factors, item_template);
      jobs.push_back(std::move(job));
    }

    std::vector<knowledge::RecKnowledge> rows(jobs.size());
    knowledge::ExtractStats stats;
    std::mutex stats_mu;
    std::atomic<std::size_t> next{0};
    int workers = std::max(1, cfg_.llm_in_flight);
    auto worker = [&]() {
      while (true) {
        std::size_t k = next.fetch_add(1);
        if (k >= jobs.size()) break;
        knowledge::ExtractStats local;
        rows[k] = knowledge::extract_knowledge(jobs[k].prompt, *client, &cache, jobs[k].raw,
                                               options, &local);
        std::lock_guard<std::mutex> lock(stats_mu);
        stats.cache_hits += local.cache_hits;
        stats.client_calls += local.client_calls;
        stats.failures += local.failures;
      }
    };
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    note("llm extraction: " + std::to_string(stats.client_calls) + " calls, " +
         std::to_string(stats.cache_hits) + " cache hits, " + std::to_string(stats.failures) +
         " failures");
    return rows;
  }

  StageOutcome stage_encode(KnowledgeProvider provider) {
    if (provider == KnowledgeProvider::none)
      throw std::runtime_error("encode stage needs a knowledge provider other than none");
    std::string stage = std::string("encode:") + config::provider_name(provider);
    std::vector<fs::path> inputs{workfile(knowledge_file(provider))};
    if (cfg_.encoder_backend == "file") {
      inputs.push_back(cfg_.encoder_user_table);
      inputs.push_back(cfg_.encoder_item_table);
    }
    auto input_digest = digest_of_inputs(config_sections({"encoder"}), inputs);
    if (can_skip(stage, input_digest)) return {stage, true, {}};

    require(workfile(knowledge_file(provider)), "generate");
    auto rows = knowledge::knowledge_from_jsonl(util::read_file(workfile(knowledge_file(provider))));
    std::map<std::int64_t, std::string> user_texts, item_texts;
    for (const auto& r : rows)
      (r.target == Target::user ? user_texts : item_texts)[r.subject_id] = r.text;

    auto user_backend = make_encoder_backend(Target::user);
    auto item_backend = make_encoder_backend(Target::item);
    auto user_table = encoder::encode_texts(user_texts, *user_backend, Target::user,
                                            cfg_.encoder_normalize);
    auto item_table = encoder::encode_texts(item_texts, *item_backend, Target::item,
                                            cfg_.encoder_normalize);

    std::string user_file = std::string("emb_user_") + config::provider_name(provider) + ".emb";
    std::string item_file = std::string("emb_item_") + config::provider_name(provider) + ".emb";
    encoder::save_table(user_table, workfile(user_file));
    encoder::save_table(item_table, workfile(item_file));
    return finish(stage, input_digest,
                  {user_file, user_file + ".ids", item_file, item_file + ".ids"});
  }

  std::unique_ptr<encoder::EncoderBackend> make_encoder_backend(Target target) const {
    if (cfg_.encoder_backend == "hash")
      return std::make_unique<encoder::HashProjectionEncoder>(cfg_.encoder_dim, cfg_.encoder_seed,
                                                              cfg_.encoder_window);
    if (cfg_.encoder_backend == "file") {
      auto table = encoder::load_table(target == Target::user ? cfg_.encoder_user_table
                                                              : cfg_.encoder_item_table);
      return std::make_unique<encoder::FileBackend>(std::move(table));
    }
    return std::make_unique<encoder::HttpEncoderBackend>(cfg_.encoder_url, cfg_.encoder_dim);
  }

  StageOutcome stage_mine() {
    auto input_digest = digest_of_inputs(config_sections({"behavior"}),
                                         {workfile("interactions.jsonl"), workfile("split.jsonl")});
    if (can_skip("mine", input_digest)) return {"mine", true, {}};

    require(workfile("interactions.jsonl"), "ingest");
    require(workfile("split.jsonl"), "ingest");
    auto interactions = corpus::labeled_from_jsonl(util::read_file(workfile("interactions.jsonl")));
    auto split = corpus::split_from_jsonl(util::read_file(workfile("split.jsonl")));

    // positives from the training split only; anything else would leak
    std::vector<corpus::LabeledInteraction> train;
    for (const auto& r : interactions)
      if (std::binary_search(split.train_users.begin(), split.train_users.end(), r.user_id))
        train.push_back(r);

    auto index = behavior::build_index(train, true);
    auto cap = static_cast<std::size_t>(cfg_.candidate_cap);
    auto user_pairs = behavior::mine_positives(Target::user, index, cfg_.swing_alpha, cap);
    auto item_pairs = behavior::mine_positives(Target::item, index, cfg_.swing_alpha, cap);

    util::atomic_write_file(workfile("pairs_user.jsonl"), behavior::pairs_to_jsonl(user_pairs));
    util::atomic_write_file(workfile("pairs_item.jsonl"), behavior::pairs_to_jsonl(item_pairs));
    return finish("mine", input_digest, {"pairs_user.jsonl", "pairs_item.jsonl"});
  }

  struct LoadedArtifacts {
    std::vector<corpus::LabeledInteraction> interactions;
    corpus::DatasetSplit split;
    std::vector<corpus::ItemMeta> items;
    std::vector<corpus::UserMeta> users;
    std::map<std::string, encoder::EmbeddingTable> user_tables;  // by provider name
    std::map<std::string, encoder::EmbeddingTable> item_tables;
    behavior::PositivePairIndex user_pairs;
    behavior::PositivePairIndex item_pairs;
    bool pairs_loaded = false;
  };

  LoadedArtifacts load_artifacts(const std::set<std::string>& providers, bool need_pairs) {
    LoadedArtifacts art;
    require(workfile("interactions.jsonl"), "ingest");
    require(workfile("split.jsonl"), "ingest");
    art.interactions = corpus::labeled_from_jsonl(util::read_file(workfile("interactions.jsonl")));
    art.split = corpus::split_from_jsonl(util::read_file(workfile("split.jsonl")));
    art.items = load_items();
    art.users = load_users();
    for (const auto& provider : providers) {
      std::string user_file = "emb_user_" + provider + ".emb";
      std::string item_file = "emb_item_" + provider + ".emb";
      require(workfile(user_file), "encode");
      require(workfile(item_file), "encode");
      art.user_tables[provider] = encoder::load_table(workfile(user_file));
      art.item_tables[provider] = encoder::load_table(workfile(item_file));
    }
    if (need_pairs) {
      require(workfile("pairs_user.jsonl"), "mine");
      require(workfile("pairs_item.jsonl"), "mine");
      art.user_pairs = behavior::pairs_from_jsonl(util::read_file(workfile("pairs_user.jsonl")),
                                                  Target::user);
      art.item_pairs = behavior::pairs_from_jsonl(util::read_file(workfile("pairs_item.jsonl")),
                                                  Target::item);
      art.pairs_loaded = true;
    }
    return art;
  }

  eval::ExperimentInputs inputs_for(const LoadedArtifacts& art,
                                    KnowledgeProvider provider) const {
    eval::ExperimentInputs in;
    in.interactions = &art.interactions;
    in.split = &art.split;
    in.items = &art.items;
    in.users = &art.users;
    if (provider != KnowledgeProvider::none) {
      auto name = config::provider_name(provider);
      auto uit = art.user_tables.find(name);
      auto iit = art.item_tables.find(name);
      if (uit != art.user_tables.end()) in.user_table = &uit->second;
      if (iit != art.item_tables.end()) in.item_table = &iit->second;
    }
    if (art.pairs_loaded) {
      in.user_pairs = &art.user_pairs;
      in.item_pairs = &art.item_pairs;
    }
    return in;
  }

  std::vector<fs::path> training_inputs() const {
    std::vector<fs::path> files{workfile("interactions.jsonl"), workfile("split.jsonl"),
                                workfile("pairs_user.jsonl"), workfile("pairs_item.jsonl"),
                                items_path(), users_path()};
    for (auto provider : needed_providers()) {
      std::string name = config::provider_name(provider);
      files.push_back(workfile("emb_user_" + name + ".emb"));
      files.push_back(workfile("emb_item_" + name + ".emb"));
    }
    return files;
  }

  StageOutcome stage_train() {
    auto input_digest =
        digest_of_inputs(config_sections({"model", "train", "knowledge"}), training_inputs());
    if (can_skip("train", input_digest)) return {"train", true, {}};

    std::set<std::string> providers;
    if (cfg_.provider != KnowledgeProvider::none)
      providers.insert(config::provider_name(cfg_.provider));
    bool needs_pairs = cfg_.provider != KnowledgeProvider::none;
    auto art = load_artifacts(providers, needs_pairs);
    auto inputs = inputs_for(art, cfg_.provider);

    auto bundle = training::build_bundle(
        art.interactions, art.split, art.items, art.users, inputs.user_table, inputs.item_table,
        inputs.user_pairs, inputs.item_pairs);
    model::ModelConfig mcfg = cfg_.model_config;
    mcfg.mode = cfg_.provider == KnowledgeProvider::none ? model::KnowledgeMode::none
                                                         : model::KnowledgeMode::adapter;
    mcfg.init_seed = cfg_.train_config.seed;
    nn::ParamStore params;
    model::CtrModel model(mcfg, bundle.features, bundle.user_sem_dim, bundle.item_sem_dim, params);
    auto state = training::train_joint(model, params, bundle, cfg_.train_config);
    for (const auto& w : state.warnings) note("train: warning: " + w);

    std::string log;
    for (const auto& row : state.history) {
      nlohmann::json j{{"step", row.step},
                       {"L_rec", row.l_rec},
                       {"L_uu", row.l_uu},
                       {"L_ii", row.l_ii},
                       {"total", row.total}};
      log += j.dump();
      log += '\n';
    }
    nlohmann::json summary{{"epochs_run", state.epochs_run},
                           {"best_epoch", state.best_epoch},
                           {"best_val_auc", state.best_val_auc},
                           {"val_auc_per_epoch", state.val_auc_per_epoch},
                           {"param_checksum", model::params_checksum(params)},
                           {"config_digest", config_digest_},
                           {"seed", cfg_.train_config.seed}};
    model::save_checkpoint(params, config_digest_, cfg_.train_config.seed,
                           workfile("checkpoint.ckpt"));
    util::atomic_write_file(workfile("train_log.jsonl"), log);
    util::atomic_write_file(workfile("train_summary.json"), summary.dump(2) + "\n");
    return finish("train", input_digest,
                  {"checkpoint.ckpt", "train_log.jsonl", "train_summary.json"});
  }

  StageOutcome stage_evaluate() {
    auto input_digest =
        digest_of_inputs(config_sections({"model", "train", "eval", "knowledge"}),
                         training_inputs());
    if (can_skip("evaluate", input_digest)) return {"evaluate", true, {}};

    std::set<std::string> providers;
    bool needs_pairs = false;
    for (const auto& arm : cfg_.eval_arms) {
      if (arm.provider != KnowledgeProvider::none)
        providers.insert(config::provider_name(arm.provider));
      if (arm.ablation == config::Ablation::full && arm.provider != KnowledgeProvider::none)
        needs_pairs = true;
    }
    auto art = load_artifacts(providers, needs_pairs);

    std::vector<eval::MetricsReport> reports;
    for (const auto& arm : cfg_.eval_arms) {
      auto inputs = inputs_for(art, arm.provider);
      for (int s = 0; s < cfg_.eval_num_seeds; ++s) {
        std::uint64_t seed = cfg_.train_config.seed + static_cast<std::uint64_t>(s);
        note("evaluate: arm " + arm.name() + " seed " + std::to_string(seed));
        reports.push_back(eval::run_arm(inputs, arm.provider, arm.backbone, arm.ablation,
                                        cfg_.model_config, cfg_.train_config, seed,
                                        config_digest_));
      }
    }
    std::string text = eval::reports_to_jsonl(reports) + eval::summarize_reports_jsonl(reports);
    util::atomic_write_file(workfile("reports.jsonl"), text);
    return finish("evaluate", input_digest, {"reports.jsonl"});
  }

  StageOutcome stage_sweep() {
    if (cfg_.sweep_parameter.empty())
      throw std::runtime_error("sweep stage: sweep.parameter is not configured");
    auto input_digest = digest_of_inputs(
        config_sections({"model", "train", "sweep", "knowledge"}), training_inputs());
    if (can_skip("sweep", input_digest)) return {"sweep", true, {}};

    KnowledgeProvider provider = cfg_.provider == KnowledgeProvider::none
                                     ? KnowledgeProvider::raw
                                     : cfg_.provider;
    std::set<std::string> providers{config::provider_name(provider)};
    auto art = load_artifacts(providers, true);
    auto inputs = inputs_for(art, provider);

    eval::SweepSpec spec;
    spec.parameter = cfg_.sweep_parameter;
    spec.grid = cfg_.sweep_grid;
    spec.provider = provider;
    spec.backbone = cfg_.model_config.backbone.kind;
    auto reports = eval::run_sweep(inputs, spec, cfg_.model_config, cfg_.train_config,
                                   cfg_.train_config.seed, config_digest_);

    util::atomic_write_file(workfile("sweep_reports.jsonl"), eval::reports_to_jsonl(reports));
    util::atomic_write_file(workfile("sweep_table.tsv"),
                            eval::sweep_table_tsv(spec.parameter, spec.grid, reports));
    return finish("sweep", input_digest, {"sweep_reports.jsonl", "sweep_table.tsv"});
  }

  PipelineConfig cfg_;
  bool force_ = false;
  std::ostream* log_ = nullptr;
  std::unique_ptr<Manifest> manifest_;
  std::string config_digest_;
  std::shared_ptr<knowledge::LanguageModelClient> injected_client_;
};

}  // namespace trawl::pipeline
