#include "attnlab/matcore.hpp"

#include <cmath>

namespace attnlab {

namespace {

void check_same_shape(const Matrix& s, const AdditiveMask& mask, const char* op) {
  if (s.rows != mask.rows || s.cols != mask.cols) {
    throw std::invalid_argument(std::string(op) + ": matrix is " +
                                std::to_string(s.rows) + "x" + std::to_string(s.cols) +
                                " but mask is " + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.cols));
  }
}

}  // namespace

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool AdditiveMask::row_has_allowed(std::size_t i) const {
  const std::uint8_t* r = allowed.data() + i * cols;
  for (std::size_t j = 0; j < cols; ++j) {
    if (r[j]) return true;
  }
  return false;
}

std::size_t AdditiveMask::count_allowed() const {
  std::size_t n = 0;
  for (std::uint8_t v : allowed) n += v != 0;
  return n;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      t(j, i) = a(i, j);
    }
  }
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: shape mismatch " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " * " + std::to_string(b.rows) +
                                "x" + std::to_string(b.cols));
  }
  Matrix c(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch " +
                                std::to_string(a.cols) + " vs " + std::to_string(b.cols));
  }
  Matrix c(a.rows, b.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += arow[k] * brow[k];
      }
      crow[j] = acc;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw std::invalid_argument("matmul_tn: inner dimension mismatch " +
                                std::to_string(a.rows) + " vs " + std::to_string(b.rows));
  }
  Matrix c(a.cols, b.cols, 0.0);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aki * brow[j];
      }
    }
  }
  return c;
}

Matrix masked_softmax_rows(const Matrix& s, const AdditiveMask& mask, double scale) {
  check_same_shape(s, mask, "masked_softmax_rows");
  if (!(scale > 0.0)) {
    throw std::invalid_argument("masked_softmax_rows: scale must be > 0");
  }
  Matrix p(s.rows, s.cols, 0.0);
  std::vector<double> scaled(s.cols);
  for (std::size_t i = 0; i < s.rows; ++i) {
    const double* srow = s.row(i);
    const std::uint8_t* mrow = mask.allowed.data() + i * mask.cols;
    double row_max = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (!mrow[j]) continue;
      scaled[j] = srow[j] / scale;
      if (!any || scaled[j] > row_max) row_max = scaled[j];
      any = true;
    }
    if (!any) {
      throw DegenerateRowError("masked_softmax_rows: row " + std::to_string(i) +
                               " has no allowed entries");
    }
    double z = 0.0;
    double* prow = p.row(i);
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (!mrow[j]) continue;
      prow[j] = std::exp(scaled[j] - row_max);
      z += prow[j];
    }
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (mrow[j]) prow[j] /= z;
    }
  }
  return p;
}

double max_abs_entries(const Matrix& s) {
  double m = 0.0;
  for (double v : s.data) {
    const double a = std::fabs(v);
    if (a > m) m = a;
  }
  return m;
}

double max_abs_entries(const Matrix& s, const AdditiveMask& mask) {
  check_same_shape(s, mask, "max_abs_entries");
  double m = 0.0;
  for (std::size_t idx = 0; idx < s.data.size(); ++idx) {
    if (!mask.allowed[idx]) continue;
    const double a = std::fabs(s.data[idx]);
    if (a > m) m = a;
  }
  return m;
}

double global_l2_norm(std::span<const Matrix> tensors) {
  double sq = 0.0;
  for (const Matrix& m : tensors) {
    for (double v : m.data) sq += v * v;
  }
  return std::sqrt(sq);
}

double global_l2_norm(std::span<const Matrix* const> tensors) {
  double sq = 0.0;
  for (const Matrix* m : tensors) {
    for (double v : m->data) sq += v * v;
  }
  return std::sqrt(sq);
}

}  // namespace attnlab
