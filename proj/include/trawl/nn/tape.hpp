#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "trawl/nn/mat.hpp"

namespace trawl::nn {

// Named trainable parameter. Gradients accumulate across one optimizer step;
// Adam moments live here so snapshot/restore stays a plain copy.
struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

class ParamStore {
 public:
  Tensor& create(const std::string& name, int rows, int cols) {
    for (const auto& t : items_)
      if (t->name == name) throw std::runtime_error("duplicate parameter name: " + name);
    items_.push_back(std::make_unique<Tensor>());
    Tensor& t = *items_.back();
    t.name = name;
    t.value = Mat(rows, cols);
    return t;
  }

  Tensor* find(const std::string& name) {
    for (const auto& t : items_)
      if (t->name == name) return t.get();
    return nullptr;
  }

  std::vector<std::unique_ptr<Tensor>>& items() { return items_; }
  const std::vector<std::unique_ptr<Tensor>>& items() const { return items_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : items_) n += t->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : items_) {
      if (t->grad.empty()) t->grad = Mat(t->value.rows, t->value.cols);
      t->grad.zero();
    }
  }

  // parameter values only (no optimizer state)
  std::vector<Mat> snapshot_values() const {
    std::vector<Mat> out;
    out.reserve(items_.size());
    for (const auto& t : items_) out.push_back(t->value);
    return out;
  }

  void restore_values(const std::vector<Mat>& vals) {
    if (vals.size() != items_.size()) throw std::runtime_error("snapshot size mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) items_[i]->value = vals[i];
  }

 private:
  std::vector<std::unique_ptr<Tensor>> items_;
};

// Reverse-mode tape over Mat. A fresh Tape is built per training step; nodes
// are created in topological order, so backward() is a reverse sweep. Nodes
// whose grad was never touched are skipped.
class Tape {
 public:
  using Id = int;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat& value(Id id) const { return nodes_[id].val; }
  const Mat& grad(Id id) const { return nodes_[id].grad; }
  double scalar(Id id) const { return nodes_[id].val.at(0, 0); }

  Id leaf(Mat v) {
    return push(std::move(v), nullptr);
  }

  Id param(Tensor& t) {
    Id id = push(t.value, nullptr);
    Tensor* tp = &t;
    nodes_[id].back = [id, tp](Tape& g) {
      if (tp->grad.empty()) tp->grad = Mat(tp->value.rows, tp->value.cols);
      const Mat& dg = g.nodes_[id].grad;
      for (std::size_t k = 0; k < dg.a.size(); ++k) tp->grad.a[k] += dg.a[k];
    };
    return id;
  }

  // rows of a parameter table; backward scatters into the table grad
  Id gather(Tensor& t, std::vector<int> rows) {
    Mat v(static_cast<int>(rows.size()), t.value.cols);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(t.value.row(rows[r]), t.value.row(rows[r]) + t.value.cols, v.row(static_cast<int>(r)));
    Id id = push(std::move(v), nullptr);
    Tensor* tp = &t;
    nodes_[id].back = [id, tp, rows = std::move(rows)](Tape& g) {
      if (tp->grad.empty()) tp->grad = Mat(tp->value.rows, tp->value.cols);
      const Mat& dg = g.nodes_[id].grad;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        double* dst = tp->grad.row(rows[r]);
        const double* src = dg.row(static_cast<int>(r));
        for (int c = 0; c < dg.cols; ++c) dst[c] += src[c];
      }
    };
    return id;
  }

  // row r = mean of table rows lists[r]; an empty list yields a zero row
  Id gather_mean(Tensor& t, std::vector<std::vector<int>> lists) {
    Mat v(static_cast<int>(lists.size()), t.value.cols);
    for (std::size_t r = 0; r < lists.size(); ++r) {
      if (lists[r].empty()) continue;
      double inv = 1.0 / static_cast<double>(lists[r].size());
      double* dst = v.row(static_cast<int>(r));
      for (int src_row : lists[r]) {
        const double* src = t.value.row(src_row);
        for (int c = 0; c < t.value.cols; ++c) dst[c] += src[c] * inv;
      }
    }
    Id id = push(std::move(v), nullptr);
    Tensor* tp = &t;
    nodes_[id].back = [id, tp, lists = std::move(lists)](Tape& g) {
      if (tp->grad.empty()) tp->grad = Mat(tp->value.rows, tp->value.cols);
      const Mat& dg = g.nodes_[id].grad;
      for (std::size_t r = 0; r < lists.size(); ++r) {
        if (lists[r].empty()) continue;
        double inv = 1.0 / static_cast<double>(lists[r].size());
        const double* src = dg.row(static_cast<int>(r));
        for (int dst_row : lists[r]) {
          double* dst = tp->grad.row(dst_row);
          for (int c = 0; c < dg.cols; ++c) dst[c] += src[c] * inv;
        }
      }
    };
    return id;
  }

  Id select_rows(Id a, std::vector<int> rows) {
    const Mat& av = nodes_[a].val;
    Mat v(static_cast<int>(rows.size()), av.cols);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(av.row(rows[r]), av.row(rows[r]) + av.cols, v.row(static_cast<int>(r)));
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, rows = std::move(rows)](Tape& g) {
      Mat& da = g.grad_ref(a);
      const Mat& dg = g.nodes_[id].grad;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        double* dst = da.row(rows[r]);
        const double* src = dg.row(static_cast<int>(r));
        for (int c = 0; c < dg.cols; ++c) dst[c] += src[c];
      }
    };
    return id;
  }

  Id matmul(Id a, Id b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (A.cols != B.rows) throw std::runtime_error("matmul shape mismatch");
    Mat v(A.rows, B.cols);
    matmul_acc(A, B, v);
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, b](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      matmul_nt_acc(dC, g.nodes_[b].val, g.grad_ref(a));
      matmul_tn_acc(g.nodes_[a].val, dC, g.grad_ref(b));
    };
    return id;
  }

  // A * B^T, used for pairwise similarity matrices
  Id matmul_nt(Id a, Id b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (A.cols != B.cols) throw std::runtime_error("matmul_nt shape mismatch");
    Mat v(A.rows, B.rows);
    matmul_nt_acc(A, B, v);
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, b](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      matmul_acc(dC, g.nodes_[b].val, g.grad_ref(a));
      matmul_tn_acc(dC, g.nodes_[a].val, g.grad_ref(b));
    };
    return id;
  }

  // same-shape add, or bias add when b is 1 x C
  Id add(Id a, Id b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    Mat v = A;
    if (A.same_shape(B)) {
      for (std::size_t k = 0; k < v.a.size(); ++k) v.a[k] += B.a[k];
    } else if (B.rows == 1 && B.cols == A.cols) {
      for (int r = 0; r < v.rows; ++r) {
        double* row = v.row(r);
        for (int c = 0; c < v.cols; ++c) row[c] += B.a[c];
      }
    } else {
      throw std::runtime_error("add shape mismatch");
    }
    Id id = push(std::move(v), nullptr);
    bool broadcast = !A.same_shape(B);
    nodes_[id].back = [id, a, b, broadcast](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (std::size_t k = 0; k < dC.a.size(); ++k) da.a[k] += dC.a[k];
      Mat& db = g.grad_ref(b);
      if (!broadcast) {
        for (std::size_t k = 0; k < dC.a.size(); ++k) db.a[k] += dC.a[k];
      } else {
        for (int r = 0; r < dC.rows; ++r) {
          const double* row = dC.row(r);
          for (int c = 0; c < dC.cols; ++c) db.a[c] += row[c];
        }
      }
    };
    return id;
  }

  Id sub(Id a, Id b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (!A.same_shape(B)) throw std::runtime_error("sub shape mismatch");
    Mat v = A;
    for (std::size_t k = 0; k < v.a.size(); ++k) v.a[k] -= B.a[k];
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, b](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      Mat& db = g.grad_ref(b);
      for (std::size_t k = 0; k < dC.a.size(); ++k) {
        da.a[k] += dC.a[k];
        db.a[k] -= dC.a[k];
      }
    };
    return id;
  }

  Id mul(Id a, Id b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (!A.same_shape(B)) throw std::runtime_error("mul shape mismatch");
    Mat v = A;
    for (std::size_t k = 0; k < v.a.size(); ++k) v.a[k] *= B.a[k];
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, b](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      Mat& db = g.grad_ref(b);
      const Mat& A2 = g.nodes_[a].val;
      const Mat& B2 = g.nodes_[b].val;
      for (std::size_t k = 0; k < dC.a.size(); ++k) {
        da.a[k] += dC.a[k] * B2.a[k];
        db.a[k] += dC.a[k] * A2.a[k];
      }
    };
    return id;
  }

  // scale each row of a by the per-row scalar g (N x 1)
  Id mul_colvec(Id a, Id colvec) {
    const Mat& A = nodes_[a].val;
    const Mat& G = nodes_[colvec].val;
    if (G.rows != A.rows || G.cols != 1) throw std::runtime_error("mul_colvec shape mismatch");
    Mat v = A;
    for (int r = 0; r < v.rows; ++r) {
      double s = G.at(r, 0);
      double* row = v.row(r);
      for (int c = 0; c < v.cols; ++c) row[c] *= s;
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, colvec](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& A2 = g.nodes_[a].val;
      const Mat& G2 = g.nodes_[colvec].val;
      Mat& da = g.grad_ref(a);
      Mat& dg = g.grad_ref(colvec);
      for (int r = 0; r < dC.rows; ++r) {
        const double* drow = dC.row(r);
        const double* arow = A2.row(r);
        double* darow = da.row(r);
        double s = G2.at(r, 0);
        double acc = 0.0;
        for (int c = 0; c < dC.cols; ++c) {
          darow[c] += drow[c] * s;
          acc += drow[c] * arow[c];
        }
        dg.at(r, 0) += acc;
      }
    };
    return id;
  }

  Id scale(Id a, double s) {
    Mat v = nodes_[a].val;
    for (auto& x : v.a) x *= s;
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, s](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (std::size_t k = 0; k < dC.a.size(); ++k) da.a[k] += dC.a[k] * s;
    };
    return id;
  }

  // x * sigmoid(x) — the smooth ReLU-family nonlinearity used throughout
  Id silu(Id a) {
    Mat v = nodes_[a].val;
    for (auto& x : v.a) x = x / (1.0 + std::exp(-x));
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& X = g.nodes_[a].val;
      Mat& da = g.grad_ref(a);
      for (std::size_t k = 0; k < dC.a.size(); ++k) {
        double s = 1.0 / (1.0 + std::exp(-X.a[k]));
        da.a[k] += dC.a[k] * s * (1.0 + X.a[k] * (1.0 - s));
      }
    };
    return id;
  }

  Id sigmoid(Id a) {
    Mat v = nodes_[a].val;
    for (auto& x : v.a) x = 1.0 / (1.0 + std::exp(-x));
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& Y = g.nodes_[id].val;
      Mat& da = g.grad_ref(a);
      for (std::size_t k = 0; k < dC.a.size(); ++k)
        da.a[k] += dC.a[k] * Y.a[k] * (1.0 - Y.a[k]);
    };
    return id;
  }

  Id softmax_rows(Id a) { return softmax_impl(a, nullptr); }

  // mask: 1 keeps a position, 0 removes it; an all-masked row yields zeros
  Id softmax_rows_masked(Id a, const Mat& mask) {
    if (!nodes_[a].val.same_shape(mask)) throw std::runtime_error("softmax mask shape mismatch");
    return softmax_impl(a, &mask);
  }

  Id logsumexp_rows(Id a) {
    const Mat& X = nodes_[a].val;
    Mat v(X.rows, 1);
    for (int r = 0; r < X.rows; ++r) {
      const double* row = X.row(r);
      double m = row[0];
      for (int c = 1; c < X.cols; ++c) m = std::max(m, row[c]);
      double s = 0.0;
      for (int c = 0; c < X.cols; ++c) s += std::exp(row[c] - m);
      v.at(r, 0) = m + std::log(s);
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& X = g.nodes_[a].val;
      const Mat& Y = g.nodes_[id].val;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < X.rows; ++r) {
        const double* xrow = X.row(r);
        double* darow = da.row(r);
        double dy = dC.at(r, 0);
        double lse = Y.at(r, 0);
        for (int c = 0; c < X.cols; ++c) darow[c] += dy * std::exp(xrow[c] - lse);
      }
    };
    return id;
  }

  // main diagonal of a square matrix as a column
  Id diag_col(Id a) {
    const Mat& X = nodes_[a].val;
    if (X.rows != X.cols) throw std::runtime_error("diag_col needs a square matrix");
    Mat v(X.rows, 1);
    for (int r = 0; r < X.rows; ++r) v.at(r, 0) = X.at(r, r);
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < dC.rows; ++r) da.at(r, r) += dC.at(r, 0);
    };
    return id;
  }

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols of nothing");
    int rows = nodes_[parts[0]].val.rows;
    int cols = 0;
    for (Id p : parts) {
      if (nodes_[p].val.rows != rows) throw std::runtime_error("concat_cols row mismatch");
      cols += nodes_[p].val.cols;
    }
    Mat v(rows, cols);
    int off = 0;
    for (Id p : parts) {
      const Mat& P = nodes_[p].val;
      for (int r = 0; r < rows; ++r)
        std::copy(P.row(r), P.row(r) + P.cols, v.row(r) + off);
      off += P.cols;
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, parts](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      int off2 = 0;
      for (Id p : parts) {
        Mat& dp = g.grad_ref(p);
        for (int r = 0; r < dC.rows; ++r) {
          const double* src = dC.row(r) + off2;
          double* dst = dp.row(r);
          for (int c = 0; c < dp.cols; ++c) dst[c] += src[c];
        }
        off2 += dp.cols;
      }
    };
    return id;
  }

  Id slice_cols(Id a, int c0, int c1) {
    const Mat& X = nodes_[a].val;
    if (c0 < 0 || c1 > X.cols || c0 >= c1) throw std::runtime_error("slice_cols out of range");
    Mat v(X.rows, c1 - c0);
    for (int r = 0; r < X.rows; ++r)
      std::copy(X.row(r) + c0, X.row(r) + c1, v.row(r));
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, c0](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < dC.rows; ++r) {
        const double* src = dC.row(r);
        double* dst = da.row(r) + c0;
        for (int c = 0; c < dC.cols; ++c) dst[c] += src[c];
      }
    };
    return id;
  }

  Id row_sum(Id a) {
    const Mat& X = nodes_[a].val;
    Mat v(X.rows, 1);
    for (int r = 0; r < X.rows; ++r) {
      double s = 0.0;
      const double* row = X.row(r);
      for (int c = 0; c < X.cols; ++c) s += row[c];
      v.at(r, 0) = s;
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < da.rows; ++r) {
        double dy = dC.at(r, 0);
        double* row = da.row(r);
        for (int c = 0; c < da.cols; ++c) row[c] += dy;
      }
    };
    return id;
  }

  Id sum_all(Id a) {
    const Mat& X = nodes_[a].val;
    Mat v(1, 1);
    for (double x : X.a) v.a[0] += x;
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      double dy = g.nodes_[id].grad.a[0];
      Mat& da = g.grad_ref(a);
      for (auto& x : da.a) x += dy;
    };
    return id;
  }

  Id mean_all(Id a) {
    Id s = sum_all(a);
    return scale(s, 1.0 / static_cast<double>(nodes_[a].val.size()));
  }

  // same data, new shape (row-major layout is unchanged)
  Id reshape(Id a, int rows, int cols) {
    const Mat& X = nodes_[a].val;
    if (static_cast<std::size_t>(rows) * cols != X.size())
      throw std::runtime_error("reshape size mismatch");
    Mat v(rows, cols);
    v.a = X.a;
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (std::size_t k = 0; k < dC.a.size(); ++k) da.a[k] += dC.a[k];
    };
    return id;
  }

  // row b repeated `times` consecutive rows
  Id repeat_rows_block(Id a, int times) {
    const Mat& X = nodes_[a].val;
    Mat v(X.rows * times, X.cols);
    for (int r = 0; r < X.rows; ++r)
      for (int k = 0; k < times; ++k)
        std::copy(X.row(r), X.row(r) + X.cols, v.row(r * times + k));
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a, times](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < da.rows; ++r) {
        double* dst = da.row(r);
        for (int k = 0; k < times; ++k) {
          const double* src = dC.row(r * times + k);
          for (int c = 0; c < da.cols; ++c) dst[c] += src[c];
        }
      }
    };
    return id;
  }

  // pooled[b] = sum_h w[b,h] * seq[b*H + h]; w is B x H, seq is (B*H) x C
  Id weighted_pool(Id w, Id seq) {
    const Mat& W = nodes_[w].val;
    const Mat& S = nodes_[seq].val;
    if (S.rows != W.rows * W.cols) throw std::runtime_error("weighted_pool shape mismatch");
    const int H = W.cols;
    Mat v(W.rows, S.cols);
    for (int b = 0; b < W.rows; ++b) {
      double* dst = v.row(b);
      for (int h = 0; h < H; ++h) {
        double wv = W.at(b, h);
        if (wv == 0.0) continue;
        const double* src = S.row(b * H + h);
        for (int c = 0; c < S.cols; ++c) dst[c] += wv * src[c];
      }
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, w, seq, H](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& W2 = g.nodes_[w].val;
      const Mat& S2 = g.nodes_[seq].val;
      Mat& dw = g.grad_ref(w);
      Mat& ds = g.grad_ref(seq);
      for (int b = 0; b < W2.rows; ++b) {
        const double* dp = dC.row(b);
        for (int h = 0; h < H; ++h) {
          const double* srow = S2.row(b * H + h);
          double* dsrow = ds.row(b * H + h);
          double wv = W2.at(b, h);
          double acc = 0.0;
          for (int c = 0; c < dC.cols; ++c) {
            acc += dp[c] * srow[c];
            dsrow[c] += wv * dp[c];
          }
          dw.at(b, h) += acc;
        }
      }
    };
    return id;
  }

  // rows scaled to unit L2 norm; rows with norm below 1e-12 stay zero
  Id l2_normalize_rows(Id a) {
    const Mat& X = nodes_[a].val;
    Mat v(X.rows, X.cols);
    for (int r = 0; r < X.rows; ++r) {
      double n = l2_norm(X.row(r), X.cols);
      if (n < 1e-12) continue;
      const double* src = X.row(r);
      double* dst = v.row(r);
      for (int c = 0; c < X.cols; ++c) dst[c] = src[c] / n;
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& X = g.nodes_[a].val;
      const Mat& Y = g.nodes_[id].val;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < X.rows; ++r) {
        double n = l2_norm(X.row(r), X.cols);
        if (n < 1e-12) continue;
        const double* dy = dC.row(r);
        const double* y = Y.row(r);
        double proj = dot(dy, y, X.cols);
        double* dst = da.row(r);
        for (int c = 0; c < X.cols; ++c) dst[c] += (dy[c] - y[c] * proj) / n;
      }
    };
    return id;
  }

  // mean binary cross-entropy from logits (numerically stable)
  Id bce_with_logits_mean(Id logits, Mat labels) {
    const Mat& Z = nodes_[logits].val;
    if (!Z.same_shape(labels)) throw std::runtime_error("bce label shape mismatch");
    Mat v(1, 1);
    double total = 0.0;
    for (std::size_t k = 0; k < Z.a.size(); ++k) {
      double z = Z.a[k], y = labels.a[k];
      total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    v.a[0] = total / static_cast<double>(Z.a.size());
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, logits, labels = std::move(labels)](Tape& g) {
      double dy = g.nodes_[id].grad.a[0];
      const Mat& Z = g.nodes_[logits].val;
      Mat& dz = g.grad_ref(logits);
      double inv = 1.0 / static_cast<double>(Z.a.size());
      for (std::size_t k = 0; k < Z.a.size(); ++k) {
        double s = 1.0 / (1.0 + std::exp(-Z.a[k]));
        dz.a[k] += dy * (s - labels.a[k]) * inv;
      }
    };
    return id;
  }

  void backward(Id root) {
    const Mat& rv = nodes_[root].val;
    if (rv.rows != 1 || rv.cols != 1) throw std::runtime_error("backward root must be scalar");
    grad_ref(root).a[0] = 1.0;
    for (Id i = static_cast<Id>(nodes_.size()) - 1; i >= 0; --i) {
      if (nodes_[i].grad.empty() || !nodes_[i].back) continue;
      nodes_[i].back(*this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Tape&)> back;
  };

  Id push(Mat v, std::nullptr_t) {
    nodes_.push_back(Node{std::move(v), Mat{}, nullptr});
    return static_cast<Id>(nodes_.size()) - 1;
  }

  Mat& grad_ref(Id id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Mat(n.val.rows, n.val.cols);
    return n.grad;
  }

  Id softmax_impl(Id a, const Mat* mask) {
    const Mat& X = nodes_[a].val;
    Mat v(X.rows, X.cols);
    for (int r = 0; r < X.rows; ++r) {
      const double* row = X.row(r);
      double m = -1e300;
      for (int c = 0; c < X.cols; ++c)
        if (!mask || mask->at(r, c) != 0.0) m = std::max(m, row[c]);
      if (m == -1e300) continue;  // fully masked row stays zero
      double s = 0.0;
      double* dst = v.row(r);
      for (int c = 0; c < X.cols; ++c) {
        if (mask && mask->at(r, c) == 0.0) continue;
        dst[c] = std::exp(row[c] - m);
        s += dst[c];
      }
      for (int c = 0; c < X.cols; ++c) dst[c] /= s;
    }
    Id id = push(std::move(v), nullptr);
    nodes_[id].back = [id, a](Tape& g) {
      const Mat& dC = g.nodes_[id].grad;
      const Mat& Y = g.nodes_[id].val;
      Mat& da = g.grad_ref(a);
      for (int r = 0; r < Y.rows; ++r) {
        const double* y = Y.row(r);
        const double* dy = dC.row(r);
        double proj = dot(dy, y, Y.cols);
        double* dst = da.row(r);
        for (int c = 0; c < Y.cols; ++c) dst[c] += y[c] * (dy[c] - proj);
      }
    };
    return id;
  }

  std::vector<Node> nodes_;
};

}  // namespace trawl::nn
