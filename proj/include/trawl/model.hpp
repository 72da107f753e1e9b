#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "trawl/common.hpp"
#include "trawl/corpus.hpp"
#include "trawl/nn/optim.hpp"
#include "trawl/nn/tape.hpp"
#include "trawl/util/fsio.hpp"
#include "trawl/util/rng.hpp"
#include "trawl/util/sha256.hpp"

namespace trawl::model {

using corpus::ItemId;
using corpus::UserId;
using nn::Mat;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;

// ---- categorical feature vocabularies ----------------------------------

// Row 0 of every vocabulary is the unknown/missing bucket.
struct FeatureSpace {
  std::map<UserId, int> user_index;
  std::map<ItemId, int> item_index;
  std::map<std::string, int> gender_index;
  std::map<std::string, int> age_index;
  std::map<std::string, int> occupation_index;
  std::map<std::string, int> genre_index;

  std::vector<std::array<int, 3>> user_side;       // per user row: gender, age, occupation
  std::vector<std::vector<int>> item_genre_lists;  // per item row

  int user_count() const { return static_cast<int>(user_index.size()) + 1; }
  int item_count() const { return static_cast<int>(item_index.size()) + 1; }

  int user_row(UserId id) const {
    auto it = user_index.find(id);
    return it == user_index.end() ? 0 : it->second;
  }
  int item_row(ItemId id) const {
    auto it = item_index.find(id);
    return it == item_index.end() ? 0 : it->second;
  }

  static FeatureSpace build(const std::vector<UserId>& all_users,
                            const std::vector<ItemId>& all_items,
                            const std::vector<corpus::ItemMeta>& item_meta,
                            const std::vector<corpus::UserMeta>& user_meta) {
    FeatureSpace fs;
    std::vector<UserId> users = all_users;
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    std::vector<ItemId> items = all_items;
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    for (auto u : users) fs.user_index[u] = static_cast<int>(fs.user_index.size()) + 1;
    for (auto i : items) fs.item_index[i] = static_cast<int>(fs.item_index.size()) + 1;

    auto intern = [](std::map<std::string, int>& vocab, const std::string& key) {
      if (key.empty()) return 0;
      auto it = vocab.find(key);
      if (it != vocab.end()) return it->second;
      int idx = static_cast<int>(vocab.size()) + 1;
      vocab[key] = idx;
      return idx;
    };

    fs.user_side.assign(static_cast<std::size_t>(fs.user_count()), {0, 0, 0});
    for (const auto& m : user_meta) {
      auto it = fs.user_index.find(m.user_id);
      if (it == fs.user_index.end()) continue;
      fs.user_side[static_cast<std::size_t>(it->second)] = {
          intern(fs.gender_index, m.gender), intern(fs.age_index, m.age_bucket),
          intern(fs.occupation_index, m.occupation)};
    }
    fs.item_genre_lists.assign(static_cast<std::size_t>(fs.item_count()), {});
    for (const auto& m : item_meta) {
      auto it = fs.item_index.find(m.item_id);
      if (it == fs.item_index.end()) continue;
      std::vector<int> rows;
      for (const auto& genre : m.genres) rows.push_back(intern(fs.genre_index, genre));
      std::sort(rows.begin(), rows.end());
      rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
      fs.item_genre_lists[static_cast<std::size_t>(it->second)] = std::move(rows);
    }
    return fs;
  }
};

// ---- mixture-of-experts adapter -----------------------------------------

struct AdapterConfig {
  int input_dim = 0;
  int output_dim = 0;
  int num_experts = 4;
  int expert_hidden_dim = 0;  // 0 -> input_dim / 2, at least 1

  int hidden() const { return expert_hidden_dim > 0 ? expert_hidden_dim : std::max(1, input_dim / 2); }

  void validate() const {
    if (input_dim < 1 || output_dim < 1 || num_experts < 1)
      throw std::invalid_argument("adapter config: dims and expert count must be >= 1");
  }
};

struct AdaptedEmbedding {
  std::int64_t subject_id = 0;
  std::vector<double> vector;
  bool normalized = false;
};

namespace detail {

inline void init_uniform(Tensor& t, util::Rng& rng, int fan_in) {
  double lim = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
  for (auto& x : t.value.a) x = rng.next_uniform(-lim, lim);
}

inline void init_embedding(Tensor& t, util::Rng& rng, double scale = 0.05) {
  for (auto& x : t.value.a) x = rng.next_uniform(-scale, scale);
  // row 0 is the unknown bucket
  if (t.value.rows > 0)
    for (int c = 0; c < t.value.cols; ++c) t.value.at(0, c) = 0.0;
}

}  // namespace detail

// Softmax-gated mixture of two-layer perceptrons mapping semantic embeddings
// into the recommendation space. Raw output feeds the backbone; the
// contrastive loss consumes the L2-normalized output.
class MoeAdapter {
 public:
  MoeAdapter(const AdapterConfig& cfg, ParamStore& params, util::Rng& rng,
             const std::string& prefix = "adapter") {
    cfg.validate();
    cfg_ = cfg;
    int hidden = cfg.hidden();
    gate_w_ = &params.create(prefix + ".gate.w", cfg.input_dim, cfg.num_experts);
    gate_b_ = &params.create(prefix + ".gate.b", 1, cfg.num_experts);
    detail::init_uniform(*gate_w_, rng, cfg.input_dim);
    for (int e = 0; e < cfg.num_experts; ++e) {
      Expert ex;
      std::string base = prefix + ".expert" + std::to_string(e);
      ex.w1 = &params.create(base + ".w1", cfg.input_dim, hidden);
      ex.b1 = &params.create(base + ".b1", 1, hidden);
      ex.w2 = &params.create(base + ".w2", hidden, cfg.output_dim);
      ex.b2 = &params.create(base + ".b2", 1, cfg.output_dim);
      detail::init_uniform(*ex.w1, rng, cfg.input_dim);
      detail::init_uniform(*ex.w2, rng, hidden);
      experts_.push_back(ex);
    }
  }

  const AdapterConfig& config() const { return cfg_; }

  Tape::Id forward(Tape& tape, Tape::Id input) const {
    Tape::Id gate_logits = tape.add(tape.matmul(input, tape.param(*gate_w_)), tape.param(*gate_b_));
    Tape::Id gates = tape.softmax_rows(gate_logits);
    Tape::Id out = -1;
    for (int e = 0; e < cfg_.num_experts; ++e) {
      const Expert& ex = experts_[static_cast<std::size_t>(e)];
      Tape::Id h = tape.silu(tape.add(tape.matmul(input, tape.param(*ex.w1)), tape.param(*ex.b1)));
      Tape::Id o = tape.add(tape.matmul(h, tape.param(*ex.w2)), tape.param(*ex.b2));
      Tape::Id weighted = tape.mul_colvec(o, tape.slice_cols(gates, e, e + 1));
      out = e == 0 ? weighted : tape.add(out, weighted);
    }
    return out;
  }

  // value-only forward for serving/tests
  Mat forward_values(const Mat& input) const {
    Tape tape;
    return tape.value(forward(tape, tape.leaf(input)));
  }

  Mat gate_values(const Mat& input) const {
    Tape tape;
    Tape::Id gate_logits =
        tape.add(tape.matmul(tape.leaf(input), tape.param(*gate_w_)), tape.param(*gate_b_));
    return tape.value(tape.softmax_rows(gate_logits));
  }

  AdaptedEmbedding adapt(std::int64_t subject_id, const std::vector<double>& semantic,
                         bool normalize) const {
    if (static_cast<int>(semantic.size()) != cfg_.input_dim)
      throw std::invalid_argument("adapter input dim mismatch");
    Mat in(1, cfg_.input_dim);
    in.a = semantic;
    Mat out = forward_values(in);
    AdaptedEmbedding emb;
    emb.subject_id = subject_id;
    emb.vector = out.a;
    if (normalize) {
      double n = nn::l2_norm(emb.vector.data(), static_cast<int>(emb.vector.size()));
      if (n > 1e-12)
        for (auto& x : emb.vector) x /= n;
      emb.normalized = true;
    }
    return emb;
  }

 private:
  struct Expert {
    Tensor* w1;
    Tensor* b1;
    Tensor* w2;
    Tensor* b2;
  };

  AdapterConfig cfg_;
  Tensor* gate_w_ = nullptr;
  Tensor* gate_b_ = nullptr;
  std::vector<Expert> experts_;
};

// [id || adapted]; the augmented embedding replaces the plain ID embedding
// as backbone input.
inline std::vector<double> augment(const std::vector<double>& id_embedding,
                                   const std::vector<double>& adapted_embedding) {
  std::vector<double> out;
  out.reserve(id_embedding.size() + adapted_embedding.size());
  out.insert(out.end(), id_embedding.begin(), id_embedding.end());
  out.insert(out.end(), adapted_embedding.begin(), adapted_embedding.end());
  return out;
}

// ---- CTR backbones ------------------------------------------------------

enum class BackboneKind { deepfm, din };

inline const char* backbone_name(BackboneKind k) {
  return k == BackboneKind::deepfm ? "deepfm" : "din";
}

inline BackboneKind backbone_from_name(const std::string& s) {
  if (s == "deepfm") return BackboneKind::deepfm;
  if (s == "din") return BackboneKind::din;
  throw std::invalid_argument("unknown backbone: " + s);
}

struct BackboneConfig {
  BackboneKind kind = BackboneKind::deepfm;
  int id_dim = 16;
  std::vector<int> mlp_hidden_dims{64, 32};
  int history_len_cap = 30;  // din only
  int att_hidden_dim = 32;   // din only
  double dropout = 0.0;
};

// How semantic knowledge enters the backbone.
enum class KnowledgeMode {
  none,              // plain ID + side features
  adapter,           // [id || MoE-adapted semantic]
  fixed_projection,  // ablation: [id || P * semantic] with frozen random P
};

inline const char* knowledge_mode_name(KnowledgeMode m) {
  switch (m) {
    case KnowledgeMode::none: return "none";
    case KnowledgeMode::adapter: return "adapter";
    case KnowledgeMode::fixed_projection: return "fixed_projection";
  }
  return "none";
}

struct ModelConfig {
  BackboneConfig backbone;
  int num_experts = 4;
  int adapter_output_dim = 0;  // 0 -> id_dim
  int expert_hidden_dim = 0;   // 0 -> input_dim / 2
  KnowledgeMode mode = KnowledgeMode::adapter;
  std::uint64_t init_seed = 1;
};

// One training batch, already resolved to vocabulary rows. Semantic inputs
// come as per-batch distinct matrices plus per-example selectors so the
// adapter runs once per distinct subject.
struct BatchFeatures {
  int batch_size = 0;
  std::vector<int> user_rows;
  std::vector<int> item_rows;
  std::vector<int> gender_rows;
  std::vector<int> age_rows;
  std::vector<int> occupation_rows;
  std::vector<std::vector<int>> item_genre_rows;

  // knowledge inputs (empty when mode == none)
  Mat user_sem;  // distinct users x sem dim
  Mat item_sem;  // distinct items x sem dim
  std::vector<int> user_sem_sel;  // per example -> row of user_sem
  std::vector<int> item_sem_sel;  // per example -> row of item_sem

  // din history, flattened batch_size x hist_cap
  std::vector<int> hist_item_rows;       // (B*H), row 0 where padded
  std::vector<std::vector<int>> hist_genre_rows;
  std::vector<int> hist_sem_sel;         // (B*H) -> row of item_sem (0 where padded)
  Mat hist_mask;                         // B x H

  Mat labels;  // B x 1
};

// Knowledge-augmented CTR model: embedding tables + optional adapter +
// DeepFM or DIN head. All trainable parameters live in the ParamStore passed
// at construction.
class CtrModel {
 public:
  CtrModel(const ModelConfig& cfg, const FeatureSpace& features, int user_sem_dim,
           int item_sem_dim, ParamStore& params)
      : cfg_(cfg), params_(&params) {
    util::Rng rng(cfg.init_seed);
    knowledge_dim_ = 0;
    if (cfg.mode == KnowledgeMode::adapter) {
      knowledge_dim_ = cfg.adapter_output_dim > 0 ? cfg.adapter_output_dim : cfg.backbone.id_dim;
      AdapterConfig uc{user_sem_dim, knowledge_dim_, cfg.num_experts, cfg.expert_hidden_dim};
      AdapterConfig ic{item_sem_dim, knowledge_dim_, cfg.num_experts, cfg.expert_hidden_dim};
      user_adapter_ = std::make_unique<MoeAdapter>(uc, params, rng, "adapter.user");
      item_adapter_ = std::make_unique<MoeAdapter>(ic, params, rng, "adapter.item");
    } else if (cfg.mode == KnowledgeMode::fixed_projection) {
      knowledge_dim_ = cfg.backbone.id_dim;
      user_proj_ = random_projection(user_sem_dim, knowledge_dim_, rng);
      item_proj_ = random_projection(item_sem_dim, knowledge_dim_, rng);
    }
    field_dim_ = cfg.backbone.id_dim + knowledge_dim_;

    user_emb_ = &params.create("emb.user", features.user_count(), cfg.backbone.id_dim);
    item_emb_ = &params.create("emb.item", features.item_count(), cfg.backbone.id_dim);
    gender_emb_ = &params.create("emb.gender", vocab_rows(features.gender_index), field_dim_);
    age_emb_ = &params.create("emb.age", vocab_rows(features.age_index), field_dim_);
    occupation_emb_ = &params.create("emb.occupation", vocab_rows(features.occupation_index), field_dim_);
    genre_emb_ = &params.create("emb.genre", vocab_rows(features.genre_index), field_dim_);
    for (Tensor* t : {user_emb_, item_emb_, gender_emb_, age_emb_, occupation_emb_, genre_emb_})
      detail::init_embedding(*t, rng);

    if (cfg.backbone.kind == BackboneKind::deepfm) {
      user_w_ = &params.create("fm.first.user", features.user_count(), 1);
      item_w_ = &params.create("fm.first.item", features.item_count(), 1);
      gender_w_ = &params.create("fm.first.gender", vocab_rows(features.gender_index), 1);
      age_w_ = &params.create("fm.first.age", vocab_rows(features.age_index), 1);
      occupation_w_ = &params.create("fm.first.occupation", vocab_rows(features.occupation_index), 1);
      genre_w_ = &params.create("fm.first.genre", vocab_rows(features.genre_index), 1);
      // first-order weights start at zero, matching the zero-init forward contract
      int deep_in = 6 * field_dim_;
      build_mlp("deepfm.mlp", deep_in, cfg.backbone.mlp_hidden_dims, rng, mlp_);
    } else {
      int d_item = field_dim_ + field_dim_;  // [id || knowledge] + genre field
      build_mlp("din.att", 4 * d_item, {cfg.backbone.att_hidden_dim}, rng, att_mlp_);
      int user_feat_dim = field_dim_ + 3 * field_dim_;  // augmented user + gender/age/occ
      int out_in = d_item + d_item + user_feat_dim;
      build_mlp("din.mlp", out_in, cfg.backbone.mlp_hidden_dims, rng, mlp_);
    }
    bias_ = &params.create("head.bias", 1, 1);
  }

  const ModelConfig& config() const { return cfg_; }
  int field_dim() const { return field_dim_; }
  int knowledge_dim() const { return knowledge_dim_; }
  const MoeAdapter* user_adapter() const { return user_adapter_.get(); }
  const MoeAdapter* item_adapter() const { return item_adapter_.get(); }

  struct Forward {
    Tape::Id logits = -1;          // B x 1, pre-sigmoid
    Tape::Id user_adapted = -1;    // distinct users x knowledge dim (adapter mode only)
    Tape::Id item_adapted = -1;
  };

  // Builds the batch subgraph. `train_mode` enables dropout (when configured);
  // dropout draws come from `rng` so runs are reproducible.
  Forward forward(Tape& tape, const BatchFeatures& batch, bool train_mode,
                  util::Rng* rng) const {
    Forward fwd;
    Tape::Id user_knowledge = -1;  // per-example rows
    Tape::Id item_knowledge = -1;
    Tape::Id hist_knowledge = -1;

    if (cfg_.mode != KnowledgeMode::none) {
      Tape::Id user_sem = tape.leaf(batch.user_sem);
      Tape::Id item_sem = tape.leaf(batch.item_sem);
      Tape::Id user_k_distinct, item_k_distinct;
      if (cfg_.mode == KnowledgeMode::adapter) {
        user_k_distinct = user_adapter_->forward(tape, user_sem);
        item_k_distinct = item_adapter_->forward(tape, item_sem);
        fwd.user_adapted = user_k_distinct;
        fwd.item_adapted = item_k_distinct;
      } else {
        user_k_distinct = tape.matmul(user_sem, tape.leaf(user_proj_));
        item_k_distinct = tape.matmul(item_sem, tape.leaf(item_proj_));
      }
      user_knowledge = tape.select_rows(user_k_distinct, batch.user_sem_sel);
      item_knowledge = tape.select_rows(item_k_distinct, batch.item_sem_sel);
      if (cfg_.backbone.kind == BackboneKind::din)
        hist_knowledge = tape.select_rows(item_k_distinct, batch.hist_sem_sel);
    }

    Tape::Id user_field = tape.gather(*user_emb_, batch.user_rows);
    Tape::Id item_field = tape.gather(*item_emb_, batch.item_rows);
    if (user_knowledge >= 0) user_field = tape.concat_cols({user_field, user_knowledge});
    if (item_knowledge >= 0) item_field = tape.concat_cols({item_field, item_knowledge});

    Tape::Id gender = tape.gather(*gender_emb_, batch.gender_rows);
    Tape::Id age = tape.gather(*age_emb_, batch.age_rows);
    Tape::Id occupation = tape.gather(*occupation_emb_, batch.occupation_rows);
    Tape::Id genres = tape.gather_mean(*genre_emb_, batch.item_genre_rows);

    if (cfg_.backbone.kind == BackboneKind::deepfm) {
      fwd.logits = deepfm_logits(tape, batch, user_field, item_field, gender, age, occupation,
                                 genres, train_mode, rng);
    } else {
      fwd.logits = din_logits(tape, batch, user_field, item_field, gender, age, occupation,
                              genres, hist_knowledge, train_mode, rng);
    }
    return fwd;
  }

 private:
  static int vocab_rows(const std::map<std::string, int>& vocab) {
    return static_cast<int>(vocab.size()) + 1;
  }

  static Mat random_projection(int in_dim, int out_dim, util::Rng& rng) {
    Mat p(in_dim, out_dim);
    if (in_dim == out_dim) {
      for (int r = 0; r < in_dim; ++r) p.at(r, r) = 1.0;  // equal dims: pass through
      return p;
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& x : p.a) x = rng.next_gaussian() * scale;
    return p;
  }

  struct MlpLayer {
    Tensor* w;
    Tensor* b;
  };

  void build_mlp(const std::string& prefix, int in_dim, const std::vector<int>& hidden,
                 util::Rng& rng, std::vector<MlpLayer>& out) {
    int cur = in_dim;
    int layer = 0;
    for (int h : hidden) {
      MlpLayer l;
      l.w = &params_->create(prefix + ".w" + std::to_string(layer), cur, h);
      l.b = &params_->create(prefix + ".b" + std::to_string(layer), 1, h);
      detail::init_uniform(*l.w, rng, cur);
      out.push_back(l);
      cur = h;
      ++layer;
    }
    MlpLayer final_layer;
    final_layer.w = &params_->create(prefix + ".w" + std::to_string(layer), cur, 1);
    final_layer.b = &params_->create(prefix + ".b" + std::to_string(layer), 1, 1);
    detail::init_uniform(*final_layer.w, rng, cur);
    out.push_back(final_layer);
  }

  Tape::Id run_mlp(Tape& tape, const std::vector<MlpLayer>& layers, Tape::Id x, bool train_mode,
                   util::Rng* rng) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      x = tape.add(tape.matmul(x, tape.param(*layers[l].w)), tape.param(*layers[l].b));
      if (l + 1 < layers.size()) {
        x = tape.silu(x);
        if (train_mode && cfg_.backbone.dropout > 0.0 && rng != nullptr) {
          const Mat& v = tape.value(x);
          Mat mask(v.rows, v.cols);
          double keep = 1.0 - cfg_.backbone.dropout;
          for (auto& m : mask.a) m = rng->next_double() < keep ? 1.0 / keep : 0.0;
          x = tape.mul(x, tape.leaf(std::move(mask)));
        }
      }
    }
    return x;
  }

  Tape::Id deepfm_logits(Tape& tape, const BatchFeatures& batch, Tape::Id user_field,
                         Tape::Id item_field, Tape::Id gender, Tape::Id age, Tape::Id occupation,
                         Tape::Id genres, bool train_mode, util::Rng* rng) const {
    std::vector<Tape::Id> fields{user_field, item_field, gender, age, occupation, genres};

    // second order via the sum-square identity
    Tape::Id field_sum = fields[0];
    Tape::Id square_sum = tape.mul(fields[0], fields[0]);
    for (std::size_t f = 1; f < fields.size(); ++f) {
      field_sum = tape.add(field_sum, fields[f]);
      square_sum = tape.add(square_sum, tape.mul(fields[f], fields[f]));
    }
    Tape::Id fm2 = tape.scale(
        tape.row_sum(tape.sub(tape.mul(field_sum, field_sum), square_sum)), 0.5);

    Tape::Id fm1 = tape.gather(*user_w_, batch.user_rows);
    fm1 = tape.add(fm1, tape.gather(*item_w_, batch.item_rows));
    fm1 = tape.add(fm1, tape.gather(*gender_w_, batch.gender_rows));
    fm1 = tape.add(fm1, tape.gather(*age_w_, batch.age_rows));
    fm1 = tape.add(fm1, tape.gather(*occupation_w_, batch.occupation_rows));
    fm1 = tape.add(fm1, tape.gather_mean(*genre_w_, batch.item_genre_rows));

    Tape::Id deep = run_mlp(tape, mlp_, tape.concat_cols(fields), train_mode, rng);

    Tape::Id logits = tape.add(tape.add(fm1, fm2), deep);
    return tape.add(logits, tape.param(*bias_));
  }

  Tape::Id din_logits(Tape& tape, const BatchFeatures& batch, Tape::Id user_field,
                      Tape::Id item_field, Tape::Id gender, Tape::Id age, Tape::Id occupation,
                      Tape::Id genres, Tape::Id hist_knowledge, bool train_mode,
                      util::Rng* rng) const {
    const int hist_cap = cfg_.backbone.history_len_cap;

    Tape::Id candidate = tape.concat_cols({item_field, genres});

    Tape::Id hist = tape.gather(*item_emb_, batch.hist_item_rows);
    if (hist_knowledge >= 0) hist = tape.concat_cols({hist, hist_knowledge});
    Tape::Id hist_genres = tape.gather_mean(*genre_emb_, batch.hist_genre_rows);
    hist = tape.concat_cols({hist, hist_genres});

    Tape::Id cand_rep = tape.repeat_rows_block(candidate, hist_cap);
    Tape::Id att_in = tape.concat_cols(
        {hist, cand_rep, tape.sub(hist, cand_rep), tape.mul(hist, cand_rep)});
    Tape::Id att_scores = run_mlp(tape, att_mlp_, att_in, train_mode, rng);
    Tape::Id scores = tape.reshape(att_scores, batch.batch_size, hist_cap);
    Tape::Id weights = tape.softmax_rows_masked(scores, batch.hist_mask);
    Tape::Id pooled = tape.weighted_pool(weights, hist);

    Tape::Id user_feats = tape.concat_cols({user_field, gender, age, occupation});
    Tape::Id out_in = tape.concat_cols({pooled, candidate, user_feats});
    Tape::Id logits = run_mlp(tape, mlp_, out_in, train_mode, rng);
    return tape.add(logits, tape.param(*bias_));
  }

  ModelConfig cfg_;
  ParamStore* params_;
  int field_dim_ = 0;
  int knowledge_dim_ = 0;

  std::unique_ptr<MoeAdapter> user_adapter_;
  std::unique_ptr<MoeAdapter> item_adapter_;
  Mat user_proj_;
  Mat item_proj_;

  Tensor* user_emb_ = nullptr;
  Tensor* item_emb_ = nullptr;
  Tensor* gender_emb_ = nullptr;
  Tensor* age_emb_ = nullptr;
  Tensor* occupation_emb_ = nullptr;
  Tensor* genre_emb_ = nullptr;

  Tensor* user_w_ = nullptr;
  Tensor* item_w_ = nullptr;
  Tensor* gender_w_ = nullptr;
  Tensor* age_w_ = nullptr;
  Tensor* occupation_w_ = nullptr;
  Tensor* genre_w_ = nullptr;

  std::vector<MlpLayer> mlp_;
  std::vector<MlpLayer> att_mlp_;
  Tensor* bias_ = nullptr;
};

// ---- checkpoints ---------------------------------------------------------
// magic "TRAWCKP1", config digest, seed, then named f64 tensors. Exact
// round-trip: doubles are stored bit-for-bit.

inline std::string params_checksum(const ParamStore& params) {
  util::Sha256 h;
  for (const auto& t : params.items()) {
    h.update(t->name);
    h.update(t->value.a.data(), t->value.a.size() * sizeof(double));
  }
  return h.hex_digest();
}

inline void save_checkpoint(const ParamStore& params, const std::string& config_digest,
                            std::uint64_t seed, const std::filesystem::path& path) {
  std::string buf;
  auto put = [&buf](const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); };
  buf.append("TRAWCKP1");
  std::uint32_t digest_len = static_cast<std::uint32_t>(config_digest.size());
  put(&digest_len, 4);
  buf.append(config_digest);
  put(&seed, 8);
  std::uint32_t count = static_cast<std::uint32_t>(params.items().size());
  put(&count, 4);
  for (const auto& t : params.items()) {
    std::uint32_t name_len = static_cast<std::uint32_t>(t->name.size());
    put(&name_len, 4);
    buf.append(t->name);
    std::uint32_t rows = static_cast<std::uint32_t>(t->value.rows);
    std::uint32_t cols = static_cast<std::uint32_t>(t->value.cols);
    put(&rows, 4);
    put(&cols, 4);
    put(t->value.a.data(), t->value.a.size() * sizeof(double));
  }
  util::atomic_write_file(path, buf);
}

struct CheckpointInfo {
  std::string config_digest;
  std::uint64_t seed = 0;
};

inline CheckpointInfo load_checkpoint(ParamStore& params, const std::filesystem::path& path) {
  std::string buf = util::read_file(path);
  std::size_t off = 0;
  auto get = [&](void* p, std::size_t n) {
    if (off + n > buf.size()) throw std::runtime_error("truncated checkpoint");
    std::memcpy(p, buf.data() + off, n);
    off += n;
  };
  if (buf.size() < 8 || buf.compare(0, 8, "TRAWCKP1") != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  off = 8;
  CheckpointInfo info;
  std::uint32_t digest_len = 0;
  get(&digest_len, 4);
  info.config_digest.resize(digest_len);
  get(info.config_digest.data(), digest_len);
  get(&info.seed, 8);
  std::uint32_t count = 0;
  get(&count, 4);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    get(&name_len, 4);
    std::string name(name_len, '\0');
    get(name.data(), name_len);
    std::uint32_t rows = 0, cols = 0;
    get(&rows, 4);
    get(&cols, 4);
    Tensor* t = params.find(name);
    if (t == nullptr) throw std::runtime_error("checkpoint has unknown tensor: " + name);
    if (t->value.rows != static_cast<int>(rows) || t->value.cols != static_cast<int>(cols))
      throw std::runtime_error("checkpoint shape mismatch for tensor: " + name);
    get(t->value.a.data(), t->value.a.size() * sizeof(double));
  }
  return info;
}

}  // namespace trawl::model
