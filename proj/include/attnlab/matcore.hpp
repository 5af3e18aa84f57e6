#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnlab {

// Dense row-major matrix of doubles. Every numeric object in the project
// (inputs, weights, scores, probabilities, gradients) is one of these.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }

  static Matrix identity(std::size_t n);
};

// Boolean attention mask: at(i,j) true means query i may attend to key j.
// The -inf of the additive mask formulation is applied logically, never stored.
struct AdditiveMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  AdditiveMask() = default;
  AdditiveMask(std::size_t r, std::size_t c, bool allow_all = false)
      : rows(r), cols(c), allowed(r * c, allow_all ? 1 : 0) {}

  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allowed[i * cols + j] = v ? 1 : 0; }

  bool row_has_allowed(std::size_t i) const;
  std::size_t count_allowed() const;
};

// A softmax row with no allowed entries. Callers that want a fallback policy
// (e.g. attend-to-self) must apply it before reaching this layer.
struct DegenerateRowError : std::runtime_error {
  explicit DegenerateRowError(const std::string& what) : std::runtime_error(what) {}
};

Matrix transpose(const Matrix& a);

// C = A * B. Fixed i,k,j loop order: the summation over k for every output
// entry happens in ascending k order, so repeated runs are bit-identical.
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A * B^T without materializing the transpose. Same fixed summation order.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// C = A^T * B without materializing the transpose. Same fixed summation order.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

// Row-wise softmax of S/scale restricted to allowed entries. Disallowed
// entries of the result are exactly zero. Each row subtracts its allowed
// maximum before exponentiation, so overflow is impossible regardless of
// logit magnitude. Throws DegenerateRowError on a row with no allowed entry.
Matrix masked_softmax_rows(const Matrix& s, const AdditiveMask& mask, double scale);

// Largest |S[i,j]| over all entries.
double max_abs_entries(const Matrix& s);

// Largest |S[i,j]| over allowed entries; 0 for an all-disallowed mask.
double max_abs_entries(const Matrix& s, const AdditiveMask& mask);

// sqrt of the sum of squares of every entry across all matrices.
double global_l2_norm(std::span<const Matrix> tensors);
double global_l2_norm(std::span<const Matrix* const> tensors);

}  // namespace attnlab
