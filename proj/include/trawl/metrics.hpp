#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

namespace trawl::eval {

// Rank-statistic AUC (Mann-Whitney U with average ranks, so ties count 1/2).
// Returns nullopt when labels are single-class.
inline std::optional<double> auc(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  std::size_t n_pos = 0;
  for (int y : labels) n_pos += (y == 1);
  std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie groups, ranks are 1-based
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  double u = pos_rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Mean negative log-likelihood with scores clamped to [1e-7, 1 - 1e-7].
inline double logloss(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("logloss: size mismatch");
  if (scores.empty()) throw std::invalid_argument("logloss: empty input");
  double total = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    double p = std::clamp(scores[k], 1e-7, 1.0 - 1e-7);
    total += labels[k] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(scores.size());
}

}  // namespace trawl::eval
