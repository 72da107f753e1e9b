#pragma once

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "trawl/common.hpp"
#include "trawl/util/fsio.hpp"
#include "trawl/util/rng.hpp"
#include "trawl/util/sha256.hpp"

namespace trawl::encoder {

static_assert(std::endian::native == std::endian::little,
              "embedding table format assumes a little-endian host");

struct EmbeddingTable {
  Target target = Target::user;
  int dim = 0;
  bool normalized = false;
  std::map<std::int64_t, std::vector<float>> rows;
  std::vector<std::int64_t> zero_subjects;  // rows exempt from the norm invariant

  const std::vector<float>& row(std::int64_t subject) const {
    auto it = rows.find(subject);
    if (it == rows.end())
      throw std::runtime_error("embedding table: unknown subject " + std::to_string(subject));
    return it->second;
  }
};

struct PoolResult {
  std::vector<double> vec;
  bool empty_input = false;
};

// Element-wise mean of token vectors; an empty sequence yields a flagged
// zero vector.
inline PoolResult pool(const std::vector<std::vector<double>>& token_vectors, int dim) {
  PoolResult res;
  res.vec.assign(static_cast<std::size_t>(dim), 0.0);
  if (token_vectors.empty()) {
    res.empty_input = true;
    return res;
  }
  for (const auto& v : token_vectors) {
    if (static_cast<int>(v.size()) != dim) throw std::invalid_argument("pool: dim mismatch");
    for (int c = 0; c < dim; ++c) res.vec[c] += v[c];
  }
  double inv = 1.0 / static_cast<double>(token_vectors.size());
  for (auto& x : res.vec) x *= inv;
  return res;
}

// Text encoders sit behind this interface so tests and offline pipelines can
// swap in deterministic or precomputed backends. Backends are frozen:
// nothing in training may mutate them, and parameter_checksum() is the
// witness.
class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual int dim() const = 0;
  virtual std::vector<double> encode(std::int64_t subject_id, const std::string& text) = 0;
  virtual std::string parameter_checksum() const = 0;
  virtual std::string name() const = 0;
};

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

// Deterministic hash-projection encoder. Each token maps to a seeded
// pseudo-random unit-scale vector; a text embeds as the mean over tokens,
// chunked to the window and averaged when the text is longer.
class HashProjectionEncoder : public EncoderBackend {
 public:
  HashProjectionEncoder(int dim, std::uint64_t seed, int window_tokens = 256)
      : dim_(dim), seed_(seed), window_(window_tokens) {
    if (dim <= 0 || window_tokens <= 0)
      throw std::invalid_argument("hash encoder: dim and window must be positive");
  }

  int dim() const override { return dim_; }

  std::vector<double> token_vector(const std::string& token) const {
    util::Rng rng(util::fnv1a64(token) ^ seed_);
    std::vector<double> v(static_cast<std::size_t>(dim_));
    for (auto& x : v) x = rng.next_gaussian();
    return v;
  }

  std::vector<double> encode(std::int64_t, const std::string& text) override {
    auto tokens = tokenize(text);
    if (tokens.empty()) return std::vector<double>(static_cast<std::size_t>(dim_), 0.0);
    std::vector<std::vector<double>> chunk_embs;
    for (std::size_t start = 0; start < tokens.size(); start += static_cast<std::size_t>(window_)) {
      std::size_t end = std::min(tokens.size(), start + static_cast<std::size_t>(window_));
      std::vector<std::vector<double>> tok_vecs;
      tok_vecs.reserve(end - start);
      for (std::size_t t = start; t < end; ++t) tok_vecs.push_back(token_vector(tokens[t]));
      chunk_embs.push_back(pool(tok_vecs, dim_).vec);
    }
    return pool(chunk_embs, dim_).vec;
  }

  std::string parameter_checksum() const override {
    util::Sha256 h;
    std::string desc = "hash-projection dim=" + std::to_string(dim_) +
                       " seed=" + std::to_string(seed_) + " window=" + std::to_string(window_);
    h.update(desc);
    return h.hex_digest();
  }

  std::string name() const override { return "hash"; }

 private:
  int dim_;
  std::uint64_t seed_;
  int window_;
};

// Serves precomputed vectors (e.g. dumped from a real language model) from
// an embedding table file. Unknown subjects are fatal.
class FileBackend : public EncoderBackend {
 public:
  explicit FileBackend(EmbeddingTable table) : table_(std::move(table)) {}

  int dim() const override { return table_.dim; }

  std::vector<double> encode(std::int64_t subject_id, const std::string&) override {
    auto it = table_.rows.find(subject_id);
    if (it == table_.rows.end())
      throw std::runtime_error("file encoder backend: no embedding for subject " +
                               std::to_string(subject_id));
    return std::vector<double>(it->second.begin(), it->second.end());
  }

  std::string parameter_checksum() const override {
    util::Sha256 h;
    for (const auto& [id, row] : table_.rows) {
      h.update(&id, sizeof(id));
      h.update(row.data(), row.size() * sizeof(float));
    }
    return h.hex_digest();
  }

  std::string name() const override { return "file"; }

 private:
  EmbeddingTable table_;
};

// One row per subject. The backend is never updated here; empty texts map to
// whatever the backend returns for empty input (zero rows get flagged).
inline EmbeddingTable encode_texts(const std::map<std::int64_t, std::string>& texts,
                                   EncoderBackend& backend, Target target,
                                   bool normalize = false) {
  if (texts.empty()) throw std::invalid_argument("encode_texts: empty input map");
  EmbeddingTable table;
  table.target = target;
  table.dim = backend.dim();
  table.normalized = normalize;
  for (const auto& [subject, text] : texts) {
    std::vector<double> v = backend.encode(subject, text);
    if (static_cast<int>(v.size()) != table.dim)
      throw std::runtime_error("encoder backend returned wrong dim for subject " +
                               std::to_string(subject));
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      table.zero_subjects.push_back(subject);
    } else if (normalize) {
      for (auto& x : v) x /= norm;
    }
    std::vector<float> row(v.begin(), v.end());
    table.rows.emplace(subject, std::move(row));
  }
  return table;
}

// ---- binary table format ----------------------------------------------
// header: magic "TRAWEMB1", version u32, target u8, normalized u8,
// reserved u16, dim u32, count u64; then count*dim little-endian f32 rows in
// ascending subject order. Sidecar "<path>.ids" holds one subject id per
// line in the same order.

inline void save_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::string buf;
  auto put = [&buf](const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
  };
  buf.append("TRAWEMB1");
  std::uint32_t version = 1;
  put(&version, 4);
  std::uint8_t target8 = table.target == Target::user ? 0 : 1;
  std::uint8_t norm8 = table.normalized ? 1 : 0;
  std::uint16_t reserved = 0;
  put(&target8, 1);
  put(&norm8, 1);
  put(&reserved, 2);
  std::uint32_t dim = static_cast<std::uint32_t>(table.dim);
  std::uint64_t count = table.rows.size();
  put(&dim, 4);
  put(&count, 8);
  std::string ids;
  for (const auto& [subject, row] : table.rows) {
    put(row.data(), row.size() * sizeof(float));
    ids += std::to_string(subject);
    ids += '\n';
  }
  util::atomic_write_file(path, buf);
  util::atomic_write_file(path.string() + ".ids", ids);
}

inline EmbeddingTable load_table(const std::filesystem::path& path) {
  std::string buf = util::read_file(path);
  if (buf.size() < 28 || buf.compare(0, 8, "TRAWEMB1") != 0)
    throw std::runtime_error("not an embedding table file: " + path.string());
  std::size_t off = 8;
  auto get = [&](void* p, std::size_t n) {
    if (off + n > buf.size()) throw std::runtime_error("truncated embedding table");
    std::memcpy(p, buf.data() + off, n);
    off += n;
  };
  std::uint32_t version = 0;
  get(&version, 4);
  if (version != 1) throw std::runtime_error("unsupported embedding table version");
  std::uint8_t target8 = 0, norm8 = 0;
  std::uint16_t reserved = 0;
  get(&target8, 1);
  get(&norm8, 1);
  get(&reserved, 2);
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  get(&dim, 4);
  get(&count, 8);

  auto id_lines = util::read_lines(path.string() + ".ids");
  if (id_lines.size() != count)
    throw std::runtime_error("embedding id sidecar does not match row count");

  EmbeddingTable table;
  table.target = target8 == 0 ? Target::user : Target::item;
  table.normalized = norm8 != 0;
  table.dim = static_cast<int>(dim);
  for (std::uint64_t r = 0; r < count; ++r) {
    std::vector<float> row(dim);
    get(row.data(), static_cast<std::size_t>(dim) * sizeof(float));
    std::int64_t subject = std::stoll(id_lines[r]);
    double norm = 0.0;
    for (float x : row) norm += static_cast<double>(x) * x;
    if (std::sqrt(norm) < 1e-12) table.zero_subjects.push_back(subject);
    table.rows.emplace(subject, std::move(row));
  }
  return table;
}

}  // namespace trawl::encoder
