#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace trawl::nn {

// Dense row-major double matrix. Small and boring on purpose: the training
// graphs here are batches of a few hundred rows by a few dozen columns.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}
  Mat(int r, int c, double fill) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {}

  bool empty() const { return a.empty(); }
  std::size_t size() const { return a.size(); }
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }

  void zero() { std::fill(a.begin(), a.end(), 0.0); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// C += A * B
inline void matmul_acc(const Mat& A, const Mat& B, Mat& C) {
  assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    double* crow = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = B.row(k);
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T
inline void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C) {
  assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    double* crow = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* brow = B.row(j);
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      crow[j] += s;
    }
  }
}

// C += A^T * B
inline void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
  assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* arow = A.row(k);
    const double* brow = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = C.row(i);
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double dot(const double* x, const double* y, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

inline double l2_norm(const double* x, int n) { return std::sqrt(dot(x, x, n)); }

}  // namespace trawl::nn
