#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace peftdebias {

// Dense row-major matrix of doubles. Vectors are 1xN matrices.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::int64_t size() const { return static_cast<std::int64_t>(rows) * cols; }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void check_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch: ") + what);
}

// out = a . b
inline void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
  check_shape(a.cols == b.rows, "matmul inner");
  out = Matrix(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* oi = out.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      const double* bk = b.row(k);
      for (int j = 0; j < b.cols; ++j) oi[j] += aik * bk[j];
    }
  }
}

// out = a . b^T
inline void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  check_shape(a.cols == b.cols, "matmul_nt inner");
  out = Matrix(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* oi = out.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      oi[j] = s;
    }
  }
}

// out += a^T . b  (gradient accumulation form)
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  check_shape(a.rows == b.rows, "matmul_tn outer");
  check_shape(out.rows == a.cols && out.cols == b.cols, "matmul_tn out");
  for (int k = 0; k < a.rows; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      double* oi = out.row(i);
      for (int j = 0; j < b.cols; ++j) oi[j] += aki * bk[j];
    }
  }
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  check_shape(a.same_shape(b), "add");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline void scale_inplace(Matrix& a, double s) {
  for (double& v : a.data) v *= s;
}

// Numerically stable in-place softmax over each row.
inline void softmax_rows(Matrix& a) {
  for (int i = 0; i < a.rows; ++i) {
    double* r = a.row(i);
    double mx = r[0];
    for (int j = 1; j < a.cols; ++j) mx = std::max(mx, r[j]);
    double sum = 0.0;
    for (int j = 0; j < a.cols; ++j) {
      r[j] = std::exp(r[j] - mx);
      sum += r[j];
    }
    for (int j = 0; j < a.cols; ++j) r[j] /= sum;
  }
}

// log(softmax(row))[index], computed without materialising the softmax.
inline double log_softmax_at(const double* row, int n, int index) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
  return row[index] - mx - std::log(sum);
}

}  // namespace peftdebias
