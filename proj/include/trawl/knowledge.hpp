#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trawl/common.hpp"
#include "trawl/corpus.hpp"
#include "trawl/util/fsio.hpp"
#include "trawl/util/sha256.hpp"

namespace trawl::knowledge {

using corpus::ItemId;
using corpus::LabeledInteraction;
using corpus::UserId;

struct KeyFactorSet {
  std::vector<std::string> factors;

  void validate() const {
    if (factors.empty()) throw std::invalid_argument("key factor set must be non-empty");
    std::set<std::string> seen;
    for (const auto& f : factors) {
      if (f.empty()) throw std::invalid_argument("key factor must be non-empty");
      if (!seen.insert(f).second) throw std::invalid_argument("duplicate key factor: " + f);
    }
  }

  std::string joined() const {
    std::string out;
    for (std::size_t i = 0; i < factors.size(); ++i) {
      if (i) out += ", ";
      out += factors[i];
    }
    return out;
  }
};

struct UserProfile {
  UserId user_id = 0;
  std::vector<std::pair<std::string, std::string>> attributes;  // names unique, order kept

  std::string rendered() const {
    std::string out;
    for (const auto& [name, value] : attributes) {
      out += name;
      out += ": ";
      out += value;
      out += '\n';
    }
    return out;
  }
};

struct Prompt {
  Target target = Target::item;
  std::int64_t subject_id = 0;
  std::string text;
  KeyFactorSet factor_set;
};

enum class ProviderTag { raw, llm, external_file };

inline const char* provider_tag_name(ProviderTag t) {
  switch (t) {
    case ProviderTag::raw: return "raw";
    case ProviderTag::llm: return "llm";
    case ProviderTag::external_file: return "external-file";
  }
  return "raw";
}

inline ProviderTag provider_tag_from_name(const std::string& s) {
  if (s == "raw") return ProviderTag::raw;
  if (s == "llm") return ProviderTag::llm;
  if (s == "external-file") return ProviderTag::external_file;
  throw std::invalid_argument("unknown provider tag: " + s);
}

struct RecKnowledge {
  Target target = Target::item;
  std::int64_t subject_id = 0;
  std::string text;
  ProviderTag provider_tag = ProviderTag::raw;
};

inline constexpr const char* kDefaultSeparator = "\n\n---\n\n";

// Concatenation, in ascending timestamp order, of the doc bodies of the k
// most recently interacted items that have a linked doc. A user with no
// linked history yields "".
inline std::string build_user_raw_knowledge(UserId user_id,
                                            const std::vector<LabeledInteraction>& interactions,
                                            const std::map<ItemId, std::string>& item_bodies,
                                            int k,
                                            const std::string& separator = kDefaultSeparator) {
  if (k < 1) throw std::invalid_argument("build_user_raw_knowledge: k must be >= 1");

  struct Hit {
    std::int64_t timestamp;
    ItemId item_id;
  };
  // most recent occurrence per item, restricted to items with docs
  std::map<ItemId, std::int64_t> latest;
  for (const auto& r : interactions) {
    if (r.user_id != user_id) continue;
    if (!item_bodies.count(r.item_id)) continue;
    auto it = latest.find(r.item_id);
    if (it == latest.end() || r.timestamp > it->second) latest[r.item_id] = r.timestamp;
  }
  std::vector<Hit> hits;
  hits.reserve(latest.size());
  for (const auto& [item, ts] : latest) hits.push_back({ts, item});
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.timestamp != b.timestamp) return a.timestamp > b.timestamp;
    return a.item_id > b.item_id;
  });
  if (static_cast<int>(hits.size()) > k) hits.resize(static_cast<std::size_t>(k));
  std::reverse(hits.begin(), hits.end());  // back to ascending time

  std::string out;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (i) out += separator;
    out += item_bodies.at(hits[i].item_id);
  }
  return out;
}

inline constexpr const char* kKnowledgePlaceholder = "{{knowledge}}";
inline constexpr const char* kFactorsPlaceholder = "{{factors}}";
inline constexpr const char* kProfilePlaceholder = "{{profile}}";

namespace detail {

inline void replace_all(std::string& text, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
}

}  // namespace detail

// Deterministic placeholder substitution. A template missing a required
// placeholder is a configuration error, not a silent omission.
inline Prompt build_prompt(Target target, std::int64_t subject_id,
                           const std::string& raw_knowledge,
                           const std::optional<UserProfile>& profile,
                           const KeyFactorSet& factors, const std::string& template_text) {
  factors.validate();
  if (template_text.find(kKnowledgePlaceholder) == std::string::npos)
    throw std::runtime_error("prompt template missing {{knowledge}} placeholder");
  if (template_text.find(kFactorsPlaceholder) == std::string::npos)
    throw std::runtime_error("prompt template missing {{factors}} placeholder");
  if (target == Target::user && template_text.find(kProfilePlaceholder) == std::string::npos)
    throw std::runtime_error("user prompt template missing {{profile}} placeholder");

  std::string text = template_text;
  detail::replace_all(text, kKnowledgePlaceholder, raw_knowledge);
  detail::replace_all(text, kFactorsPlaceholder, factors.joined());
  detail::replace_all(text, kProfilePlaceholder, profile ? profile->rendered() : std::string{});

  Prompt p;
  p.target = target;
  p.subject_id = subject_id;
  p.text = std::move(text);
  p.factor_set = factors;
  return p;
}

// ---- language-model client -------------------------------------------

struct LlmRequest {
  std::string prompt;
  int max_tokens = 512;
  double temperature = 0.0;
};

struct LlmResponse {
  bool ok = false;
  std::string text;
  std::string error;
};

class LanguageModelClient {
 public:
  virtual ~LanguageModelClient() = default;
  virtual LlmResponse complete(const LlmRequest& request) = 0;
  virtual std::string name() const = 0;
};

// Deterministic test double: returns a truncation of the prompt's knowledge
// section (the text between the knowledge heading and the next heading),
// optionally echoing the key-factor line.
class StubLlmClient : public LanguageModelClient {
 public:
  explicit StubLlmClient(std::size_t truncate_chars = 200, bool echo_factors = false,
                         std::string knowledge_heading = "### Knowledge",
                         std::string factors_heading = "### Key factors")
      : truncate_chars_(truncate_chars),
        echo_factors_(echo_factors),
        knowledge_heading_(std::move(knowledge_heading)),
        factors_heading_(std::move(factors_heading)) {}

  LlmResponse complete(const LlmRequest& request) override {
    ++calls_;
    std::string knowledge = section_after(request.prompt, knowledge_heading_);
    if (knowledge.empty()) knowledge = request.prompt;
    std::string out = knowledge.substr(0, truncate_chars_);
    if (echo_factors_) {
      std::string factors = section_after(request.prompt, factors_heading_);
      if (!factors.empty()) {
        out += '\n';
        out += factors.substr(0, truncate_chars_);
      }
    }
    return {true, out, {}};
  }

  std::string name() const override { return "stub"; }
  std::size_t calls() const { return calls_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::string section_after(const std::string& prompt, const std::string& heading) const {
    std::size_t p = prompt.find(heading);
    if (p == std::string::npos) return {};
    p += heading.size();
    std::size_t end = prompt.find("###", p);
    return trim(prompt.substr(p, end == std::string::npos ? std::string::npos : end - p));
  }

  std::size_t truncate_chars_;
  bool echo_factors_;
  std::string knowledge_heading_;
  std::string factors_heading_;
  std::size_t calls_ = 0;
};

// A client that always fails; exercises retry and fallback paths.
class FailingLlmClient : public LanguageModelClient {
 public:
  LlmResponse complete(const LlmRequest&) override {
    ++calls_;
    return {false, {}, "injected failure"};
  }
  std::string name() const override { return "failing"; }
  std::size_t calls() const { return calls_; }

 private:
  std::size_t calls_ = 0;
};

// Persistent response cache, one JSON object per line:
// {target, subject_id, prompt_hash, text, provider_tag}. Lookups are by
// prompt hash, so a prompt is sent to a live client at most once across all
// runs sharing the file.
class KnowledgeCache {
 public:
  explicit KnowledgeCache(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      for (const auto& line : util::read_lines(path_)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        entries_[j.at("prompt_hash").get<std::string>()] = j.at("text").get<std::string>();
      }
    }
  }

  std::optional<std::string> lookup(const std::string& prompt_hash) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(prompt_hash);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void insert(Target target, std::int64_t subject_id, const std::string& prompt_hash,
              const std::string& text, ProviderTag tag) {
    std::lock_guard<std::mutex> lock(mu_);
    if (entries_.count(prompt_hash)) return;
    entries_[prompt_hash] = text;
    nlohmann::json j{{"target", target_name(target)},
                     {"subject_id", subject_id},
                     {"prompt_hash", prompt_hash},
                     {"text", text},
                     {"provider_tag", provider_tag_name(tag)}};
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    out << j.dump() << '\n';
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_.size();
  }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, std::string> entries_;
};

enum class LlmFallback { raw, empty };

struct ExtractOptions {
  int max_tokens = 512;
  double temperature = 0.0;
  int max_attempts = 3;
  int backoff_ms = 250;  // doubled per retry
  LlmFallback fallback = LlmFallback::raw;
};

struct ExtractStats {
  std::size_t cache_hits = 0;
  std::size_t client_calls = 0;
  std::size_t failures = 0;
};

// Cache-first extraction with bounded retries. A hard failure falls back to
// the raw knowledge text (tagged raw) or to empty, per options; failures are
// never cached.
inline RecKnowledge extract_knowledge(const Prompt& prompt, LanguageModelClient& client,
                                      KnowledgeCache* cache, const std::string& raw_knowledge,
                                      const ExtractOptions& options = {},
                                      ExtractStats* stats = nullptr) {
  RecKnowledge rk;
  rk.target = prompt.target;
  rk.subject_id = prompt.subject_id;

  const std::string prompt_hash = util::sha256_hex(prompt.text);
  if (cache) {
    if (auto hit = cache->lookup(prompt_hash)) {
      if (stats) ++stats->cache_hits;
      rk.text = *hit;
      rk.provider_tag = ProviderTag::llm;
      return rk;
    }
  }

  LlmRequest request{prompt.text, options.max_tokens, options.temperature};
  LlmResponse response;
  int delay = options.backoff_ms;
  for (int attempt = 0; attempt < std::max(1, options.max_attempts); ++attempt) {
    if (stats) ++stats->client_calls;
    response = client.complete(request);
    if (response.ok) break;
    if (attempt + 1 < options.max_attempts && delay > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(delay));
      delay *= 2;
    }
  }

  if (response.ok) {
    rk.text = response.text;
    rk.provider_tag = ProviderTag::llm;
    if (cache) cache->insert(prompt.target, prompt.subject_id, prompt_hash, rk.text, rk.provider_tag);
  } else {
    if (stats) ++stats->failures;
    rk.text = options.fallback == LlmFallback::raw ? raw_knowledge : std::string{};
    rk.provider_tag = ProviderTag::raw;
  }
  return rk;
}

// ---- knowledge artifact (per-subject extracted texts) -----------------

inline std::string knowledge_to_jsonl(const std::vector<RecKnowledge>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j{{"target", target_name(r.target)},
                     {"subject_id", r.subject_id},
                     {"text", r.text},
                     {"provider_tag", provider_tag_name(r.provider_tag)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<RecKnowledge> knowledge_from_jsonl(const std::string& text) {
  std::vector<RecKnowledge> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    RecKnowledge r;
    r.target = target_from_name(j.at("target").get<std::string>());
    r.subject_id = j.at("subject_id").get<std::int64_t>();
    r.text = j.at("text").get<std::string>();
    r.provider_tag = provider_tag_from_name(j.at("provider_tag").get<std::string>());
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace trawl::knowledge
