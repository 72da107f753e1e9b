#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trawl/util/fsio.hpp"
#include "trawl/util/rng.hpp"

namespace trawl::synth {

// Seeded synthetic dataset for CI and acceptance runs. Item texts
// deterministically encode latent genre assignments, user ratings are driven
// by genre affinity, so text knowledge genuinely predicts labels.
struct SynthConfig {
  int num_users = 2000;
  int num_items = 500;
  int num_genres = 8;
  int interactions_per_user = 30;
  int favorite_genres = 2;
  double favored_pick_prob = 0.7;      // chance an interaction targets a favored genre
  double favored_positive_prob = 0.85; // chance of rating > 3 on favored-genre items
  double other_positive_prob = 0.2;
  int genre_tokens_per_doc = 8;
  int noise_tokens_per_doc = 24;
  int noise_vocab = 300;
  double unlinked_fraction = 0.04;     // items with no corpus doc at all
  double year_suffix_fraction = 0.3;   // titles carrying a year suffix, to exercise fuzzy links
  std::uint64_t seed = 1;
};

struct SynthDataset {
  std::string interactions_csv;  // user,item,rating,timestamp
  std::string items_tsv;         // item_id \t title \t genres
  std::string users_tsv;         // user_id \t gender \t age \t occupation
  std::string corpus_jsonl;      // {doc_id, title, text}
};

namespace detail {

inline const std::vector<std::vector<std::string>>& genre_words() {
  static const std::vector<std::vector<std::string>> words{
      {"chase", "explosion", "stunt", "pursuit", "rescue", "showdown"},
      {"laugh", "gag", "sitcom", "slapstick", "banter", "prank"},
      {"grief", "family", "secrets", "redemption", "quiet", "estranged"},
      {"haunted", "scream", "dread", "curse", "basement", "seance"},
      {"starship", "alien", "quantum", "cyborg", "galaxy", "terraform"},
      {"longing", "letters", "kiss", "wedding", "paris", "reunion"},
      {"archive", "interview", "footage", "narrator", "true", "verite"},
      {"saloon", "outlaw", "frontier", "dusty", "sheriff", "stampede"},
      {"courtroom", "verdict", "witness", "alibi", "gavel", "appeal"},
      {"heist", "vault", "crew", "getaway", "blueprint", "doublecross"},
      {"orchestra", "prodigy", "audition", "crescendo", "maestro", "encore"},
      {"summit", "glacier", "expedition", "basecamp", "avalanche", "sherpa"},
  };
  return words;
}

inline std::string genre_name(int g) { return "genre" + std::to_string(g); }

inline std::string item_title(int item, bool year_suffix, util::Rng& rng) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "Feature Film %04d", item);
  std::string title = buf;
  if (year_suffix) {
    int year = 1950 + static_cast<int>(rng.next_below(60));
    title += " (" + std::to_string(year) + ")";
  }
  return title;
}

}  // namespace detail

inline SynthDataset generate(const SynthConfig& cfg) {
  if (cfg.num_genres > static_cast<int>(detail::genre_words().size()))
    throw std::invalid_argument("synth: at most " +
                                std::to_string(detail::genre_words().size()) + " genres");
  if (cfg.num_users < 3 || cfg.num_items < 2)
    throw std::invalid_argument("synth: dataset too small");

  util::Rng rng(cfg.seed);
  SynthDataset out;

  // items: primary genre, title, doc text
  std::vector<int> item_genre(static_cast<std::size_t>(cfg.num_items));
  std::vector<std::string> item_titles(static_cast<std::size_t>(cfg.num_items));
  std::vector<bool> item_linked(static_cast<std::size_t>(cfg.num_items));
  for (int i = 0; i < cfg.num_items; ++i) {
    int g = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_genres)));
    item_genre[static_cast<std::size_t>(i)] = g;
    bool suffix = rng.next_double() < cfg.year_suffix_fraction;
    item_titles[static_cast<std::size_t>(i)] = detail::item_title(i, suffix, rng);
    item_linked[static_cast<std::size_t>(i)] = rng.next_double() >= cfg.unlinked_fraction;

    out.items_tsv += std::to_string(i);
    out.items_tsv += '\t';
    out.items_tsv += item_titles[static_cast<std::size_t>(i)];
    out.items_tsv += '\t';
    out.items_tsv += detail::genre_name(g);
    out.items_tsv += '\n';

    if (item_linked[static_cast<std::size_t>(i)]) {
      const auto& words = detail::genre_words()[static_cast<std::size_t>(g)];
      std::string body;
      for (int t = 0; t < cfg.genre_tokens_per_doc; ++t) {
        if (t) body += ' ';
        body += words[rng.next_below(words.size())];
      }
      for (int t = 0; t < cfg.noise_tokens_per_doc; ++t) {
        body += " filler";
        body += std::to_string(rng.next_below(static_cast<std::uint64_t>(cfg.noise_vocab)));
      }
      // doc title drops the year suffix, so ~year_suffix_fraction of links are fuzzy
      char base[32];
      std::snprintf(base, sizeof(base), "Feature Film %04d", i);
      nlohmann::json doc{{"doc_id", 100000 + i}, {"title", base}, {"text", body}};
      out.corpus_jsonl += doc.dump();
      out.corpus_jsonl += '\n';
    }
  }

  static const char* genders[] = {"F", "M"};
  static const char* ages[] = {"18", "25", "35", "45", "56"};
  static const char* occupations[] = {"artist", "coder", "teacher", "clerk", "nurse", "chef"};

  // users: favorite genres drive both picks and ratings
  for (int u = 0; u < cfg.num_users; ++u) {
    std::vector<int> favorites;
    while (static_cast<int>(favorites.size()) < cfg.favorite_genres) {
      int g = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_genres)));
      if (std::find(favorites.begin(), favorites.end(), g) == favorites.end())
        favorites.push_back(g);
    }

    out.users_tsv += std::to_string(u);
    out.users_tsv += '\t';
    out.users_tsv += genders[rng.next_below(2)];
    out.users_tsv += '\t';
    out.users_tsv += ages[rng.next_below(5)];
    out.users_tsv += '\t';
    out.users_tsv += occupations[rng.next_below(6)];
    out.users_tsv += '\n';

    std::int64_t ts = 1000000000 + static_cast<std::int64_t>(u) * 100000;
    for (int k = 0; k < cfg.interactions_per_user; ++k) {
      int item;
      if (rng.next_double() < cfg.favored_pick_prob) {
        // rejection-sample an item from a favored genre
        int tries = 0;
        do {
          item = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_items)));
          ++tries;
        } while (std::find(favorites.begin(), favorites.end(),
                           item_genre[static_cast<std::size_t>(item)]) == favorites.end() &&
                 tries < 64);
      } else {
        item = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(cfg.num_items)));
      }
      bool favored = std::find(favorites.begin(), favorites.end(),
                               item_genre[static_cast<std::size_t>(item)]) != favorites.end();
      double p = favored ? cfg.favored_positive_prob : cfg.other_positive_prob;
      int rating;
      if (rng.next_double() < p)
        rating = 4 + static_cast<int>(rng.next_below(2));  // 4..5
      else
        rating = 1 + static_cast<int>(rng.next_below(3));  // 1..3
      ts += 1 + static_cast<std::int64_t>(rng.next_below(1000));

      out.interactions_csv += std::to_string(u);
      out.interactions_csv += ',';
      out.interactions_csv += std::to_string(item);
      out.interactions_csv += ',';
      out.interactions_csv += std::to_string(rating);
      out.interactions_csv += ',';
      out.interactions_csv += std::to_string(ts);
      out.interactions_csv += '\n';
    }
  }
  return out;
}

inline void write_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  util::atomic_write_file(dir / "interactions.csv", data.interactions_csv);
  util::atomic_write_file(dir / "items.tsv", data.items_tsv);
  util::atomic_write_file(dir / "users.tsv", data.users_tsv);
  util::atomic_write_file(dir / "corpus.jsonl", data.corpus_jsonl);
}

}  // namespace trawl::synth
