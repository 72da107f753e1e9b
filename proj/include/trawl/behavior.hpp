#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "trawl/common.hpp"
#include "trawl/corpus.hpp"

namespace trawl::behavior {

using corpus::ItemId;
using corpus::LabeledInteraction;
using corpus::UserId;
using trawl::Target;
using trawl::target_name;

// Bidirectional interaction index. Adjacency lists are sorted and unique so
// set intersections are linear merges and iteration order is stable.
struct InteractionIndex {
  std::map<UserId, std::vector<ItemId>> user_items;
  std::map<ItemId, std::vector<UserId>> item_users;
};

struct PositivePairIndex {
  Target target = Target::user;
  std::map<std::int64_t, std::int64_t> partner;
  std::map<std::int64_t, double> score;
};

inline InteractionIndex build_index(const std::vector<LabeledInteraction>& train,
                                    bool positives_only) {
  InteractionIndex idx;
  for (const auto& r : train) {
    if (positives_only && r.label != 1) continue;
    idx.user_items[r.user_id].push_back(r.item_id);
    idx.item_users[r.item_id].push_back(r.user_id);
  }
  auto dedupe = [](auto& m) {
    for (auto& [k, v] : m) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    }
  };
  dedupe(idx.user_items);
  dedupe(idx.item_users);
  return idx;
}

namespace detail {

inline std::vector<std::int64_t> sorted_intersection(const std::vector<std::int64_t>& a,
                                                     const std::vector<std::int64_t>& b) {
  std::vector<std::int64_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

inline std::size_t intersection_size(const std::vector<std::int64_t>& a,
                                     const std::vector<std::int64_t>& b) {
  std::size_t n = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib)
      ++ia;
    else if (*ib < *ia)
      ++ib;
    else {
      ++n;
      ++ia;
      ++ib;
    }
  }
  return n;
}

// Memo for pairwise overlap sizes; mining revisits the same entity pairs many
// times, and caching keeps the values bit-identical to the direct computation.
class OverlapCache {
 public:
  explicit OverlapCache(const std::map<std::int64_t, std::vector<std::int64_t>>& adjacency)
      : adjacency_(adjacency) {}

  std::size_t overlap(std::int64_t x, std::int64_t y) {
    if (x > y) std::swap(x, y);
    auto key = std::make_pair(x, y);
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    std::size_t n = intersection_size(adjacency_.at(x), adjacency_.at(y));
    memo_.emplace(key, n);
    return n;
  }

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<std::int64_t, std::int64_t>& p) const {
      std::uint64_t h = static_cast<std::uint64_t>(p.first) * 0x9e3779b97f4a7c15ull;
      h ^= static_cast<std::uint64_t>(p.second) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      return static_cast<std::size_t>(h);
    }
  };

  const std::map<std::int64_t, std::vector<std::int64_t>>& adjacency_;
  std::unordered_map<std::pair<std::int64_t, std::int64_t>, std::size_t, PairHash> memo_;
};

// s(a,b) = sum over all ordered pairs (x,y), including x == y, of shared
// entities, of 1 / (alpha + |adjacency[x] n adjacency[y]|).
inline double swing_core(std::int64_t a, std::int64_t b,
                         const std::map<std::int64_t, std::vector<std::int64_t>>& subject_side,
                         OverlapCache& overlaps, double alpha) {
  auto ita = subject_side.find(a);
  auto itb = subject_side.find(b);
  if (ita == subject_side.end() || itb == subject_side.end())
    throw std::invalid_argument("swing: unknown id");
  auto common = sorted_intersection(ita->second, itb->second);
  double s = 0.0;
  for (auto x : common)
    for (auto y : common)
      s += 1.0 / (alpha + static_cast<double>(overlaps.overlap(x, y)));
  return s;
}

}  // namespace detail

inline double swing_user(UserId u, UserId v, const InteractionIndex& index, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("swing alpha must be positive");
  if (u == v) throw std::invalid_argument("swing_user: u == v");
  detail::OverlapCache overlaps(index.item_users);
  return detail::swing_core(u, v, index.user_items, overlaps, alpha);
}

inline double swing_item(ItemId i, ItemId j, const InteractionIndex& index, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("swing alpha must be positive");
  if (i == j) throw std::invalid_argument("swing_item: i == j");
  detail::OverlapCache overlaps(index.user_items);
  return detail::swing_core(i, j, index.item_users, overlaps, alpha);
}

// For every subject with at least one co-interaction neighbor, pick the
// neighbor with the highest swing score. Candidates are the subjects sharing
// at least one adjacent entity, capped at candidate_cap by co-interaction
// count; all ties break toward the smaller id.
inline PositivePairIndex mine_positives(Target target, const InteractionIndex& index,
                                        double alpha, std::size_t candidate_cap) {
  if (alpha <= 0.0) throw std::invalid_argument("mine_positives: alpha must be positive");
  const auto& subject_side = target == Target::user ? index.user_items : index.item_users;
  const auto& entity_side = target == Target::user ? index.item_users : index.user_items;

  detail::OverlapCache overlaps(entity_side);
  PositivePairIndex out;
  out.target = target;

  for (const auto& [subject, adjacent] : subject_side) {
    // co-interaction counts over subjects sharing >= 1 entity
    std::map<std::int64_t, std::size_t> co_count;
    for (auto e : adjacent)
      for (auto other : entity_side.at(e))
        if (other != subject) ++co_count[other];
    if (co_count.empty()) continue;

    std::vector<std::pair<std::int64_t, std::size_t>> candidates(co_count.begin(), co_count.end());
    if (candidates.size() > candidate_cap) {
      std::sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
      });
      candidates.resize(candidate_cap);
      std::sort(candidates.begin(), candidates.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
    }

    std::int64_t best_id = -1;
    double best_score = 0.0;
    for (const auto& [cand, count] : candidates) {
      double s = detail::swing_core(subject, cand, subject_side, overlaps, alpha);
      if (s > best_score) {
        best_score = s;
        best_id = cand;
      }
    }
    if (best_id >= 0 && best_score > 0.0) {
      out.partner[subject] = best_id;
      out.score[subject] = best_score;
    }
  }
  return out;
}

inline std::string pairs_to_jsonl(const PositivePairIndex& idx) {
  std::string out;
  for (const auto& [subject, partner] : idx.partner) {
    nlohmann::json j{{"target", target_name(idx.target)},
                     {"subject_id", subject},
                     {"partner_id", partner},
                     {"score", idx.score.at(subject)}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline PositivePairIndex pairs_from_jsonl(const std::string& text, Target expected) {
  PositivePairIndex idx;
  idx.target = expected;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.at("target").get<std::string>() != target_name(expected))
      throw std::runtime_error("positive-pair file target mismatch");
    auto subject = j.at("subject_id").get<std::int64_t>();
    idx.partner[subject] = j.at("partner_id").get<std::int64_t>();
    idx.score[subject] = j.at("score").get<double>();
  }
  return idx;
}

}  // namespace trawl::behavior
