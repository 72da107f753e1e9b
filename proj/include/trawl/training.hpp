#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "trawl/behavior.hpp"
#include "trawl/corpus.hpp"
#include "trawl/encoder.hpp"
#include "trawl/metrics.hpp"
#include "trawl/model.hpp"
#include "trawl/nn/optim.hpp"

namespace trawl::training {

using corpus::ItemId;
using corpus::UserId;
using model::BatchFeatures;
using model::CtrModel;
using model::FeatureSpace;
using nn::Mat;
using nn::ParamStore;
using nn::Tape;

// ---- losses ---------------------------------------------------------------

namespace detail {

inline double infonce_unchecked(const Mat& anchors, const Mat& positives, double tau,
                                bool batch_mean) {
  const int b = anchors.rows;
  double loss = 0.0;
  std::vector<double> sims(static_cast<std::size_t>(b));
  for (int j = 0; j < b; ++j) {
    double mx = -1e300;
    for (int k = 0; k < b; ++k) {
      sims[static_cast<std::size_t>(k)] = nn::dot(anchors.row(j), positives.row(k), anchors.cols) / tau;
      mx = std::max(mx, sims[static_cast<std::size_t>(k)]);
    }
    double denom = 0.0;
    for (int k = 0; k < b; ++k) denom += std::exp(sims[static_cast<std::size_t>(k)] - mx);
    loss += mx + std::log(denom) - sims[static_cast<std::size_t>(j)];
  }
  return batch_mean ? loss / b : loss;
}

}  // namespace detail

// InfoNCE with in-batch negatives:
//   loss = sum_j [ logsumexp_j'(a_j . p_j' / tau) - a_j . p_j / tau ]
// Anchors and positives must arrive unit-normalized (deviation > 1e-4 is an
// error). `batch_mean` divides by B.
inline double infonce(const Mat& anchors, const Mat& positives, double tau,
                      bool batch_mean = false) {
  if (tau <= 0.0) throw std::invalid_argument("infonce: tau must be positive");
  if (anchors.rows < 1 || !anchors.same_shape(positives))
    throw std::invalid_argument("infonce: anchors/positives must be non-empty and same shape");
  for (int r = 0; r < anchors.rows; ++r) {
    if (std::abs(nn::l2_norm(anchors.row(r), anchors.cols) - 1.0) > 1e-4 ||
        std::abs(nn::l2_norm(positives.row(r), positives.cols) - 1.0) > 1e-4)
      throw std::invalid_argument("infonce: inputs must be L2-normalized");
  }
  return detail::infonce_unchecked(anchors, positives, tau, batch_mean);
}

struct InfonceGrad {
  double loss = 0.0;
  Mat danchors;
  Mat dpositives;
};

inline InfonceGrad infonce_with_grad(const Mat& anchors, const Mat& positives, double tau,
                                     bool batch_mean = false) {
  InfonceGrad out;
  out.loss = infonce(anchors, positives, tau, batch_mean);
  const int b = anchors.rows;
  const int d = anchors.cols;
  out.danchors = Mat(b, d);
  out.dpositives = Mat(b, d);
  double scale = (batch_mean ? 1.0 / b : 1.0) / tau;
  std::vector<double> soft(static_cast<std::size_t>(b));
  for (int j = 0; j < b; ++j) {
    double mx = -1e300;
    for (int k = 0; k < b; ++k) {
      soft[static_cast<std::size_t>(k)] = nn::dot(anchors.row(j), positives.row(k), d) / tau;
      mx = std::max(mx, soft[static_cast<std::size_t>(k)]);
    }
    double denom = 0.0;
    for (int k = 0; k < b; ++k) {
      soft[static_cast<std::size_t>(k)] = std::exp(soft[static_cast<std::size_t>(k)] - mx);
      denom += soft[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < b; ++k) soft[static_cast<std::size_t>(k)] /= denom;
    // d loss_j / d a_j = (sum_k soft_k p_k - p_j) / tau
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int k = 0; k < b; ++k) acc += soft[static_cast<std::size_t>(k)] * positives.at(k, c);
      out.danchors.at(j, c) += scale * (acc - positives.at(j, c));
    }
    // d loss_j / d p_k = soft_k a_j / tau, minus a_j for k == j
    for (int k = 0; k < b; ++k) {
      double w = soft[static_cast<std::size_t>(k)] - (k == j ? 1.0 : 0.0);
      for (int c = 0; c < d; ++c) out.dpositives.at(k, c) += scale * w * anchors.at(j, c);
    }
  }
  return out;
}

// Mean binary cross-entropy over probabilities (clamped to [1e-7, 1-1e-7]).
inline double rec_loss(const std::vector<double>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw std::invalid_argument("rec_loss: size mismatch or empty");
  double total = 0.0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    double p = std::clamp(predictions[k], 1e-7, 1.0 - 1e-7);
    total += labels[k] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(predictions.size());
}

inline double total_loss(double l_rec, double l_uu, double l_ii, double w1, double w2) {
  return l_rec + w1 * l_uu + w2 * l_ii;
}

// ---- training data bundle ---------------------------------------------

struct Sample {
  int user_row = 0;
  int item_row = 0;
  int label = 0;
  std::int64_t timestamp = 0;
};

// Everything the trainer needs, resolved to dense vocabulary rows once.
struct TrainingBundle {
  FeatureSpace features;
  std::vector<Sample> train;
  std::vector<Sample> valid;
  std::vector<Sample> test;

  // semantic embeddings indexed by vocabulary row (row 0 = zeros)
  Mat user_sem;
  Mat item_sem;
  int user_sem_dim = 0;
  int item_sem_dim = 0;
  bool has_knowledge = false;

  // mined positive partner per vocabulary row (-1 when absent)
  std::vector<int> user_partner;
  std::vector<int> item_partner;

  // per user row: positive-label (timestamp, item_row), ascending
  std::vector<std::vector<std::pair<std::int64_t, int>>> user_history;
};

inline TrainingBundle build_bundle(
    const std::vector<corpus::LabeledInteraction>& interactions, const corpus::DatasetSplit& split,
    const std::vector<corpus::ItemMeta>& item_meta, const std::vector<corpus::UserMeta>& user_meta,
    const encoder::EmbeddingTable* user_table, const encoder::EmbeddingTable* item_table,
    const behavior::PositivePairIndex* user_pairs, const behavior::PositivePairIndex* item_pairs) {
  TrainingBundle bundle;

  std::vector<UserId> users;
  std::vector<ItemId> items;
  for (const auto& r : interactions) {
    users.push_back(r.user_id);
    items.push_back(r.item_id);
  }
  for (const auto& m : item_meta) items.push_back(m.item_id);
  bundle.features = FeatureSpace::build(users, items, item_meta, user_meta);

  auto bucket_of = [&](UserId id) -> int {
    if (std::binary_search(split.train_users.begin(), split.train_users.end(), id)) return 0;
    if (std::binary_search(split.valid_users.begin(), split.valid_users.end(), id)) return 1;
    if (std::binary_search(split.test_users.begin(), split.test_users.end(), id)) return 2;
    return -1;
  };

  bundle.user_history.assign(static_cast<std::size_t>(bundle.features.user_count()), {});
  for (const auto& r : interactions) {
    Sample s;
    s.user_row = bundle.features.user_row(r.user_id);
    s.item_row = bundle.features.item_row(r.item_id);
    s.label = r.label;
    s.timestamp = r.timestamp;
    switch (bucket_of(r.user_id)) {
      case 0: bundle.train.push_back(s); break;
      case 1: bundle.valid.push_back(s); break;
      case 2: bundle.test.push_back(s); break;
      default: break;
    }
    if (r.label == 1)
      bundle.user_history[static_cast<std::size_t>(s.user_row)].push_back(
          {r.timestamp, s.item_row});
  }
  for (auto& h : bundle.user_history) std::sort(h.begin(), h.end());

  bundle.has_knowledge = user_table != nullptr && item_table != nullptr;
  if (bundle.has_knowledge) {
    bundle.user_sem_dim = user_table->dim;
    bundle.item_sem_dim = item_table->dim;
    bundle.user_sem = Mat(bundle.features.user_count(), user_table->dim);
    bundle.item_sem = Mat(bundle.features.item_count(), item_table->dim);
    for (const auto& [id, row] : user_table->rows) {
      int r = bundle.features.user_row(id);
      if (r == 0) continue;
      for (int c = 0; c < user_table->dim; ++c) bundle.user_sem.at(r, c) = row[static_cast<std::size_t>(c)];
    }
    for (const auto& [id, row] : item_table->rows) {
      int r = bundle.features.item_row(id);
      if (r == 0) continue;
      for (int c = 0; c < item_table->dim; ++c) bundle.item_sem.at(r, c) = row[static_cast<std::size_t>(c)];
    }
  }

  bundle.user_partner.assign(static_cast<std::size_t>(bundle.features.user_count()), -1);
  bundle.item_partner.assign(static_cast<std::size_t>(bundle.features.item_count()), -1);
  if (user_pairs != nullptr) {
    for (const auto& [subject, partner] : user_pairs->partner) {
      int sr = bundle.features.user_row(subject);
      int pr = bundle.features.user_row(partner);
      if (sr > 0 && pr > 0) bundle.user_partner[static_cast<std::size_t>(sr)] = pr;
    }
  }
  if (item_pairs != nullptr) {
    for (const auto& [subject, partner] : item_pairs->partner) {
      int sr = bundle.features.item_row(subject);
      int pr = bundle.features.item_row(partner);
      if (sr > 0 && pr > 0) bundle.item_partner[static_cast<std::size_t>(sr)] = pr;
    }
  }
  return bundle;
}

// ---- batch assembly -----------------------------------------------------

struct ContrastiveBatch {
  std::vector<int> anchor_sel;    // rows into the distinct semantic matrix
  std::vector<int> positive_sel;
};

struct AssembledBatch {
  BatchFeatures features;
  ContrastiveBatch user_cl;
  ContrastiveBatch item_cl;
};

namespace detail {

class DistinctIndexer {
 public:
  int intern(int row) {
    auto it = index_.find(row);
    if (it != index_.end()) return it->second;
    int idx = static_cast<int>(order_.size());
    index_.emplace(row, idx);
    order_.push_back(row);
    return idx;
  }
  const std::vector<int>& rows() const { return order_; }

 private:
  std::unordered_map<int, int> index_;
  std::vector<int> order_;
};

inline Mat gather_rows(const Mat& src, const std::vector<int>& rows) {
  Mat out(static_cast<int>(rows.size()), src.cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(src.row(rows[r]), src.row(rows[r]) + src.cols, out.row(static_cast<int>(r)));
  return out;
}

}  // namespace detail

inline AssembledBatch assemble_batch(const TrainingBundle& bundle, const model::ModelConfig& cfg,
                                     const std::vector<Sample>& samples,
                                     const std::vector<std::size_t>& indices, bool with_cl) {
  AssembledBatch out;
  BatchFeatures& bf = out.features;
  const bool din = cfg.backbone.kind == model::BackboneKind::din;
  const bool knowledge = cfg.mode != model::KnowledgeMode::none && bundle.has_knowledge;
  const int hist_cap = cfg.backbone.history_len_cap;

  bf.batch_size = static_cast<int>(indices.size());
  bf.labels = Mat(bf.batch_size, 1);

  detail::DistinctIndexer users, items;
  std::vector<int> batch_user_rows;  // dedup in first-appearance order
  std::vector<int> batch_item_rows;
  {
    std::unordered_map<int, bool> seen_user, seen_item;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const Sample& s = samples[indices[i]];
      if (!seen_user.count(s.user_row)) {
        seen_user.emplace(s.user_row, true);
        batch_user_rows.push_back(s.user_row);
      }
      if (!seen_item.count(s.item_row)) {
        seen_item.emplace(s.item_row, true);
        batch_item_rows.push_back(s.item_row);
      }
    }
  }

  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples[indices[i]];
    bf.user_rows.push_back(s.user_row);
    bf.item_rows.push_back(s.item_row);
    const auto& side = bundle.features.user_side[static_cast<std::size_t>(s.user_row)];
    bf.gender_rows.push_back(side[0]);
    bf.age_rows.push_back(side[1]);
    bf.occupation_rows.push_back(side[2]);
    bf.item_genre_rows.push_back(
        bundle.features.item_genre_lists[static_cast<std::size_t>(s.item_row)]);
    bf.labels.at(static_cast<int>(i), 0) = s.label;
    if (knowledge) {
      bf.user_sem_sel.push_back(users.intern(s.user_row));
      bf.item_sem_sel.push_back(items.intern(s.item_row));
    }

    if (din) {
      const auto& hist = bundle.user_history[static_cast<std::size_t>(s.user_row)];
      // items strictly before this interaction, newest last
      auto end = std::lower_bound(hist.begin(), hist.end(),
                                  std::make_pair(s.timestamp, -1));
      std::size_t len = static_cast<std::size_t>(end - hist.begin());
      std::size_t take = std::min<std::size_t>(len, static_cast<std::size_t>(hist_cap));
      if (bf.hist_mask.empty()) bf.hist_mask = Mat(bf.batch_size, hist_cap);
      for (int h = 0; h < hist_cap; ++h) {
        std::size_t pos = len - take + static_cast<std::size_t>(h);
        if (static_cast<std::size_t>(h) < take) {
          int item_row = hist[pos].second;
          bf.hist_item_rows.push_back(item_row);
          bf.hist_genre_rows.push_back(
              bundle.features.item_genre_lists[static_cast<std::size_t>(item_row)]);
          bf.hist_sem_sel.push_back(knowledge ? items.intern(item_row) : 0);
          bf.hist_mask.at(static_cast<int>(i), h) = 1.0;
        } else {
          bf.hist_item_rows.push_back(0);
          bf.hist_genre_rows.push_back({});
          bf.hist_sem_sel.push_back(0);
        }
      }
    }
  }
  if (din && bf.hist_mask.empty()) bf.hist_mask = Mat(bf.batch_size, hist_cap);

  if (with_cl && knowledge) {
    for (int row : batch_user_rows) {
      int partner = bundle.user_partner[static_cast<std::size_t>(row)];
      if (partner < 0) continue;
      out.user_cl.anchor_sel.push_back(users.intern(row));
      out.user_cl.positive_sel.push_back(users.intern(partner));
    }
    for (int row : batch_item_rows) {
      int partner = bundle.item_partner[static_cast<std::size_t>(row)];
      if (partner < 0) continue;
      out.item_cl.anchor_sel.push_back(items.intern(row));
      out.item_cl.positive_sel.push_back(items.intern(partner));
    }
  }

  if (knowledge) {
    bf.user_sem = detail::gather_rows(bundle.user_sem, users.rows());
    bf.item_sem = detail::gather_rows(bundle.item_sem, items.rows());
  }
  return out;
}

// ---- joint trainer --------------------------------------------------------

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 1e-4;
  double temperature = 0.15;
  double cl_weight_user = 0.004;  // w1
  double cl_weight_item = 0.008;  // w2
  int max_epochs = 20;
  int patience = 3;
  std::uint64_t seed = 42;
  bool cl_batch_mean = false;       // Eq-style sum by default
  bool log_cl_when_disabled = true; // still compute CL values when weights are 0

  void validate() const {
    if (temperature <= 0.0) throw std::invalid_argument("train config: temperature must be > 0");
    if (cl_weight_user < 0.0 || cl_weight_item < 0.0)
      throw std::invalid_argument("train config: contrastive weights must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  }
};

struct StepLog {
  long step = 0;
  double l_rec = 0.0;
  double l_uu = 0.0;
  double l_ii = 0.0;
  double total = 0.0;
};

struct TrainState {
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val_auc = 0.0;
  std::vector<double> val_auc_per_epoch;
  std::vector<std::string> epoch_param_checksums;
  std::vector<StepLog> history;
  std::vector<std::string> warnings;
};

inline std::vector<double> score_samples(const CtrModel& model, const TrainingBundle& bundle,
                                         const std::vector<Sample>& samples,
                                         int eval_batch = 1024) {
  std::vector<double> scores;
  scores.reserve(samples.size());
  std::vector<std::size_t> indices;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(eval_batch)) {
    std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(eval_batch));
    indices.clear();
    for (std::size_t i = start; i < end; ++i) indices.push_back(i);
    AssembledBatch batch = assemble_batch(bundle, model.config(), samples, indices, false);
    Tape tape;
    auto fwd = model.forward(tape, batch.features, false, nullptr);
    Tape::Id probs = tape.sigmoid(fwd.logits);
    const Mat& p = tape.value(probs);
    for (int r = 0; r < p.rows; ++r) scores.push_back(p.at(r, 0));
  }
  return scores;
}

inline std::optional<double> evaluate_auc(const CtrModel& model, const TrainingBundle& bundle,
                                          const std::vector<Sample>& samples) {
  if (samples.empty()) return std::nullopt;
  auto scores = score_samples(model, bundle, samples);
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) labels.push_back(s.label);
  return eval::auc(scores, labels);
}

// One simultaneous optimization of the recommendation loss and both
// contrastive losses. Only adapter + backbone parameters (the ParamStore)
// are updated; the encoder never appears here. Restores the best-validation
// snapshot before returning.
inline TrainState train_joint(CtrModel& model, ParamStore& params, const TrainingBundle& bundle,
                              const TrainConfig& cfg) {
  cfg.validate();
  TrainState state;
  if (bundle.train.empty()) throw std::runtime_error("train_joint: empty training split");
  if (model.config().mode != model::KnowledgeMode::none && !bundle.has_knowledge)
    throw std::runtime_error("train_joint: model expects semantic embeddings, bundle has none");

  const double w1 = cfg.cl_weight_user;
  const double w2 = cfg.cl_weight_item;
  const bool adapter_mode = model.config().mode == model::KnowledgeMode::adapter;

  bool any_pairs = false;
  for (int p : bundle.user_partner)
    if (p >= 0) any_pairs = true;
  for (int p : bundle.item_partner)
    if (p >= 0) any_pairs = true;
  if (adapter_mode && !any_pairs && (w1 > 0.0 || w2 > 0.0))
    state.warnings.push_back(
        "no mined positive pairs: contrastive terms contribute zero this run");

  nn::Adam adam({cfg.learning_rate});
  util::Rng rng(cfg.seed);

  std::vector<std::size_t> order(bundle.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<Mat> best_snapshot;
  int epochs_since_best = 0;
  long step = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
      AssembledBatch batch = assemble_batch(bundle, model.config(), bundle.train, indices,
                                            adapter_mode);

      Tape tape;
      auto fwd = model.forward(tape, batch.features, true, &rng);
      Tape::Id l_rec_id = tape.bce_with_logits_mean(fwd.logits, batch.features.labels);

      auto cl_branch = [&](const ContrastiveBatch& cl, Tape::Id adapted) -> Tape::Id {
        if (cl.anchor_sel.empty() || adapted < 0) return -1;
        Tape::Id anchors = tape.l2_normalize_rows(tape.select_rows(adapted, cl.anchor_sel));
        Tape::Id positives = tape.l2_normalize_rows(tape.select_rows(adapted, cl.positive_sel));
        Tape::Id sims = tape.scale(tape.matmul_nt(anchors, positives), 1.0 / cfg.temperature);
        Tape::Id per_anchor = tape.sub(tape.logsumexp_rows(sims), tape.diag_col(sims));
        return cfg.cl_batch_mean ? tape.mean_all(per_anchor) : tape.sum_all(per_anchor);
      };

      // CL terms with zero weight are kept out of the gradient graph entirely;
      // their values are still computed for the log.
      double l_uu = 0.0, l_ii = 0.0;
      Tape::Id total_id = l_rec_id;
      if (adapter_mode) {
        Tape::Id uu_id = -1, ii_id = -1;
        if (w1 > 0.0) {
          uu_id = cl_branch(batch.user_cl, fwd.user_adapted);
          if (uu_id >= 0) total_id = tape.add(total_id, tape.scale(uu_id, w1));
        }
        if (w2 > 0.0) {
          ii_id = cl_branch(batch.item_cl, fwd.item_adapted);
          if (ii_id >= 0) total_id = tape.add(total_id, tape.scale(ii_id, w2));
        }
        auto detached_cl = [&](const ContrastiveBatch& cl, Tape::Id adapted) -> double {
          if (cl.anchor_sel.empty() || adapted < 0) return 0.0;
          const Mat& all = tape.value(adapted);
          Mat anchors = detail::gather_rows(all, cl.anchor_sel);
          Mat positives = detail::gather_rows(all, cl.positive_sel);
          auto normalize = [](Mat& m) {
            for (int r = 0; r < m.rows; ++r) {
              double n = nn::l2_norm(m.row(r), m.cols);
              if (n < 1e-12) continue;
              for (int c = 0; c < m.cols; ++c) m.at(r, c) /= n;
            }
          };
          normalize(anchors);
          normalize(positives);
          return detail::infonce_unchecked(anchors, positives, cfg.temperature, cfg.cl_batch_mean);
        };
        l_uu = uu_id >= 0 ? tape.scalar(uu_id)
                          : (cfg.log_cl_when_disabled ? detached_cl(batch.user_cl, fwd.user_adapted)
                                                      : 0.0);
        l_ii = ii_id >= 0 ? tape.scalar(ii_id)
                          : (cfg.log_cl_when_disabled ? detached_cl(batch.item_cl, fwd.item_adapted)
                                                      : 0.0);
      }

      tape.backward(total_id);
      adam.step(params);
      params.zero_grad();

      double l_rec_value = tape.scalar(l_rec_id);
      state.history.push_back({step, l_rec_value, l_uu, l_ii,
                               total_loss(l_rec_value, l_uu, l_ii, w1, w2)});
      ++step;
    }

    ++state.epochs_run;
    state.epoch_param_checksums.push_back(model::params_checksum(params));
    auto val_auc = evaluate_auc(model, bundle, bundle.valid);
    double auc_value = val_auc.value_or(0.5);
    state.val_auc_per_epoch.push_back(auc_value);

    if (state.best_epoch < 0 || auc_value > state.best_val_auc) {
      state.best_val_auc = auc_value;
      state.best_epoch = epoch;
      best_snapshot = params.snapshot_values();
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= cfg.patience) break;
    }
  }

  if (!best_snapshot.empty()) params.restore_values(best_snapshot);
  return state;
}

}  // namespace trawl::training
