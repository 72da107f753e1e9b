#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trawl/util/fsio.hpp"
#include "trawl/util/rng.hpp"

namespace trawl::corpus {

using UserId = std::int64_t;
using ItemId = std::int64_t;
using DocId = std::int64_t;

struct InteractionRecord {
  UserId user_id = 0;
  ItemId item_id = 0;
  int rating = 0;  // 1..5
  std::int64_t timestamp = 0;
};

struct LabeledInteraction {
  UserId user_id = 0;
  ItemId item_id = 0;
  int label = 0;  // 1 iff source rating > threshold
  std::int64_t timestamp = 0;
};

struct KnowledgeDoc {
  DocId doc_id = 0;
  std::string title;
  std::string body;
};

struct ItemLink {
  ItemId item_id = 0;
  DocId doc_id = 0;
  double link_score = 0.0;  // normalized edit-distance similarity in [0,1]
};

struct DatasetSplit {
  std::vector<UserId> train_users;
  std::vector<UserId> valid_users;
  std::vector<UserId> test_users;
  std::uint64_t seed = 0;
  std::array<int, 3> ratio{8, 1, 1};
};

// Item/user side files are plumbing around the rating stream; ML-1M ships
// them as movies.dat / users.dat, the generic format is TSV.
struct ItemMeta {
  ItemId item_id = 0;
  std::string title;
  std::vector<std::string> genres;
};

struct UserMeta {
  UserId user_id = 0;
  std::string gender;
  std::string age_bucket;
  std::string occupation;
};

enum class IngestFormat { ml1m, csv };

struct IngestReport {
  std::size_t parsed = 0;
  std::size_t rejected_malformed = 0;
  std::size_t rejected_invalid = 0;  // rating/id invariant violations
  std::size_t rejected() const { return rejected_malformed + rejected_invalid; }
};

namespace detail {

inline bool parse_i64(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

inline std::vector<std::string> split(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t p = line.find(sep, start);
    if (p == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, p - start));
    start = p + sep.size();
  }
  return out;
}

inline std::optional<InteractionRecord> parse_fields(const std::vector<std::string>& f,
                                                     IngestReport& report) {
  if (f.size() != 4) {
    ++report.rejected_malformed;
    return std::nullopt;
  }
  std::int64_t u, i, r, t;
  if (!parse_i64(f[0], u) || !parse_i64(f[1], i) || !parse_i64(f[2], r) || !parse_i64(f[3], t)) {
    ++report.rejected_malformed;
    return std::nullopt;
  }
  if (u < 0 || i < 0 || r < 1 || r > 5) {
    ++report.rejected_invalid;
    return std::nullopt;
  }
  return InteractionRecord{u, i, static_cast<int>(r), t};
}

}  // namespace detail

struct IngestResult {
  std::vector<InteractionRecord> records;
  IngestReport report;
};

// ML-1M: `UserID::MovieID::Rating::Timestamp`; csv: `user,item,rating,ts`
// with an optional header line. Malformed or out-of-range lines are counted,
// never fatal; a missing file is.
inline IngestResult ingest_interactions(const std::filesystem::path& path, IngestFormat format) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("interactions file not found: " + path.string());
  IngestResult res;
  auto lines = util::read_lines(path);
  bool first = true;
  for (const auto& line : lines) {
    if (line.empty()) continue;
    if (format == IngestFormat::csv && first) {
      first = false;
      std::int64_t tmp;
      auto f = detail::split(line, ",");
      if (!f.empty() && !detail::parse_i64(f[0], tmp)) continue;  // header
    }
    first = false;
    auto fields = detail::split(line, format == IngestFormat::ml1m ? "::" : ",");
    if (auto rec = detail::parse_fields(fields, res.report)) {
      res.records.push_back(*rec);
      ++res.report.parsed;
    }
  }
  return res;
}

// Duplicate (user, item) pairs keep the latest judgment; ties on timestamp
// keep the later line.
inline std::vector<InteractionRecord> deduplicate_latest(
    const std::vector<InteractionRecord>& records) {
  std::map<std::pair<UserId, ItemId>, std::size_t> winner;
  for (std::size_t idx = 0; idx < records.size(); ++idx) {
    auto key = std::make_pair(records[idx].user_id, records[idx].item_id);
    auto it = winner.find(key);
    if (it == winner.end() || records[idx].timestamp >= records[it->second].timestamp)
      winner[key] = idx;
  }
  std::vector<std::size_t> keep;
  keep.reserve(winner.size());
  for (const auto& [k, idx] : winner) keep.push_back(idx);
  std::sort(keep.begin(), keep.end());
  std::vector<InteractionRecord> out;
  out.reserve(keep.size());
  for (auto idx : keep) out.push_back(records[idx]);
  return out;
}

inline std::vector<LabeledInteraction> binarize(const std::vector<InteractionRecord>& records,
                                                int threshold = 3) {
  if (threshold < 1 || threshold > 5)
    throw std::invalid_argument("binarize threshold must be in [1,5]");
  std::vector<LabeledInteraction> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back({r.user_id, r.item_id, r.rating > threshold ? 1 : 0, r.timestamp});
  return out;
}

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  const std::size_t n = a.size(), m = b.size();
  if (n == 0) return m;
  if (m == 0) return n;
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

// 1 - lev(a,b)/max(len); 1.0 when both strings are empty.
inline double title_similarity(const std::string& a, const std::string& b) {
  std::size_t maxlen = std::max(a.size(), b.size());
  if (maxlen == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(maxlen);
}

struct LinkResult {
  std::vector<ItemLink> links;
  std::vector<ItemId> unlinked;
};

// Best doc per item by normalized edit-distance similarity; ties go to the
// smallest doc_id, items with no doc at or above min_score stay unlinked.
inline LinkResult link_items(const std::vector<ItemMeta>& items,
                             const std::vector<KnowledgeDoc>& docs, double min_score) {
  for (const auto& it : items)
    if (it.title.empty()) throw std::invalid_argument("item title must be non-empty");

  std::vector<const KnowledgeDoc*> sorted_docs;
  sorted_docs.reserve(docs.size());
  for (const auto& d : docs) sorted_docs.push_back(&d);
  std::sort(sorted_docs.begin(), sorted_docs.end(),
            [](const KnowledgeDoc* x, const KnowledgeDoc* y) { return x->doc_id < y->doc_id; });

  LinkResult res;
  for (const auto& item : items) {
    double best = -1.0;
    const KnowledgeDoc* best_doc = nullptr;
    const double la = static_cast<double>(item.title.size());
    for (const auto* doc : sorted_docs) {
      const double lb = static_cast<double>(doc->title.size());
      const double maxlen = std::max(la, lb);
      if (maxlen > 0) {
        // lev >= |len difference| gives a cheap upper bound on similarity
        double bound = 1.0 - std::abs(la - lb) / maxlen;
        if (bound < min_score || bound <= best) continue;
      }
      double s = title_similarity(item.title, doc->title);
      if (s > best) {
        best = s;
        best_doc = doc;
      }
    }
    if (best_doc != nullptr && best >= min_score)
      res.links.push_back({item.item_id, best_doc->doc_id, best});
    else
      res.unlinked.push_back(item.item_id);
  }
  return res;
}

// Deterministic user partition: sort, seeded shuffle, then largest-remainder
// bucket sizes so every bucket is within one user of the exact ratio.
inline DatasetSplit split_users(const std::vector<UserId>& user_ids,
                                std::array<int, 3> ratio, std::uint64_t seed) {
  for (int r : ratio)
    if (r <= 0) throw std::invalid_argument("split ratio components must be positive");
  std::vector<UserId> ids(user_ids.begin(), user_ids.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 3) throw std::runtime_error("split_users: fewer users than buckets");

  util::Rng rng(seed);
  rng.shuffle(ids);

  const double total = static_cast<double>(ratio[0] + ratio[1] + ratio[2]);
  const std::size_t n = ids.size();
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int b = 0; b < 3; ++b) {
    double exact = static_cast<double>(n) * ratio[b] / total;
    sizes[b] = static_cast<std::size_t>(exact);
    frac[b] = exact - static_cast<double>(sizes[b]);
    assigned += sizes[b];
  }
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (frac[x] != frac[y]) return frac[x] > frac[y];
    return x < y;
  });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++sizes[order[r % 3]];

  DatasetSplit split;
  split.seed = seed;
  split.ratio = ratio;
  split.train_users.assign(ids.begin(), ids.begin() + sizes[0]);
  split.valid_users.assign(ids.begin() + sizes[0], ids.begin() + sizes[0] + sizes[1]);
  split.test_users.assign(ids.begin() + sizes[0] + sizes[1], ids.end());
  std::sort(split.train_users.begin(), split.train_users.end());
  std::sort(split.valid_users.begin(), split.valid_users.end());
  std::sort(split.test_users.begin(), split.test_users.end());
  return split;
}

// ---- side files -----------------------------------------------------------

inline std::vector<ItemMeta> parse_ml1m_items(const std::filesystem::path& path) {
  std::vector<ItemMeta> out;
  for (const auto& line : util::read_lines(path)) {
    if (line.empty()) continue;
    auto f = detail::split(line, "::");
    if (f.size() < 2) continue;
    ItemMeta m;
    if (!detail::parse_i64(f[0], m.item_id)) continue;
    m.title = f[1];
    if (f.size() >= 3 && !f[2].empty()) m.genres = detail::split(f[2], "|");
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<UserMeta> parse_ml1m_users(const std::filesystem::path& path) {
  std::vector<UserMeta> out;
  for (const auto& line : util::read_lines(path)) {
    if (line.empty()) continue;
    auto f = detail::split(line, "::");
    if (f.size() < 4) continue;
    UserMeta m;
    if (!detail::parse_i64(f[0], m.user_id)) continue;
    m.gender = f[1];
    m.age_bucket = f[2];
    m.occupation = f[3];
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<ItemMeta> parse_tsv_items(const std::filesystem::path& path) {
  std::vector<ItemMeta> out;
  for (const auto& line : util::read_lines(path)) {
    if (line.empty()) continue;
    auto f = detail::split(line, "\t");
    if (f.size() < 2) continue;
    ItemMeta m;
    if (!detail::parse_i64(f[0], m.item_id)) continue;
    m.title = f[1];
    if (f.size() >= 3 && !f[2].empty()) m.genres = detail::split(f[2], "|");
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<UserMeta> parse_tsv_users(const std::filesystem::path& path) {
  std::vector<UserMeta> out;
  for (const auto& line : util::read_lines(path)) {
    if (line.empty()) continue;
    auto f = detail::split(line, "\t");
    if (f.size() < 4) continue;
    UserMeta m;
    if (!detail::parse_i64(f[0], m.user_id)) continue;
    m.gender = f[1];
    m.age_bucket = f[2];
    m.occupation = f[3];
    out.push_back(std::move(m));
  }
  return out;
}

// ---- JSONL artifacts ------------------------------------------------------

inline std::string to_jsonl(const std::vector<LabeledInteraction>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j{{"user_id", r.user_id},
                     {"item_id", r.item_id},
                     {"label", r.label},
                     {"timestamp", r.timestamp}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<LabeledInteraction> labeled_from_jsonl(const std::string& text) {
  std::vector<LabeledInteraction> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    rows.push_back({j.at("user_id").get<UserId>(), j.at("item_id").get<ItemId>(),
                    j.at("label").get<int>(), j.at("timestamp").get<std::int64_t>()});
  }
  return rows;
}

struct CorpusLoadResult {
  std::vector<KnowledgeDoc> docs;
  std::size_t skipped_empty = 0;
};

// One JSON object per line: {doc_id, title, text}. Documents whose text is
// blank after whitespace normalization violate the type invariant and are
// skipped (counted).
inline CorpusLoadResult load_corpus_jsonl(const std::filesystem::path& path) {
  CorpusLoadResult res;
  for (const auto& line : util::read_lines(path)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    KnowledgeDoc d;
    d.doc_id = j.at("doc_id").get<DocId>();
    d.title = j.at("title").get<std::string>();
    d.body = j.at("text").get<std::string>();
    bool blank = std::all_of(d.body.begin(), d.body.end(),
                             [](unsigned char c) { return std::isspace(c); });
    if (d.body.empty() || blank) {
      ++res.skipped_empty;
      continue;
    }
    res.docs.push_back(std::move(d));
  }
  return res;
}

inline std::string corpus_to_jsonl(const std::vector<KnowledgeDoc>& docs) {
  std::string out;
  for (const auto& d : docs) {
    nlohmann::json j{{"doc_id", d.doc_id}, {"title", d.title}, {"text", d.body}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::string links_to_jsonl(const std::vector<ItemLink>& links) {
  std::string out;
  for (const auto& l : links) {
    nlohmann::json j{{"item_id", l.item_id}, {"doc_id", l.doc_id}, {"link_score", l.link_score}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ItemLink> links_from_jsonl(const std::string& text) {
  std::vector<ItemLink> links;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    links.push_back({j.at("item_id").get<ItemId>(), j.at("doc_id").get<DocId>(),
                     j.at("link_score").get<double>()});
  }
  return links;
}

inline std::string split_to_jsonl(const DatasetSplit& split) {
  nlohmann::json header{{"seed", split.seed},
                        {"ratio", {split.ratio[0], split.ratio[1], split.ratio[2]}}};
  std::string out = header.dump();
  out += '\n';
  auto emit = [&](const std::vector<UserId>& ids, const char* bucket) {
    for (auto id : ids) {
      nlohmann::json j{{"user_id", id}, {"bucket", bucket}};
      out += j.dump();
      out += '\n';
    }
  };
  emit(split.train_users, "train");
  emit(split.valid_users, "valid");
  emit(split.test_users, "test");
  return out;
}

inline DatasetSplit split_from_jsonl(const std::string& text) {
  DatasetSplit split;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (first) {
      first = false;
      split.seed = j.at("seed").get<std::uint64_t>();
      auto r = j.at("ratio");
      split.ratio = {r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()};
      continue;
    }
    auto bucket = j.at("bucket").get<std::string>();
    auto id = j.at("user_id").get<UserId>();
    if (bucket == "train")
      split.train_users.push_back(id);
    else if (bucket == "valid")
      split.valid_users.push_back(id);
    else
      split.test_users.push_back(id);
  }
  return split;
}

}  // namespace trawl::corpus
