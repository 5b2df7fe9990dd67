#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#ifndef KINFUSE_REAL
#define KINFUSE_REAL double
#endif

namespace kinfuse {

/// Scalar type of every tensor. The library is 64-bit; the gradient checker
/// also compiles it with `long double` to evaluate finite differences.
using Real = KINFUSE_REAL;

/// Dense row-major matrix of Reals.
///
/// Vectors are represented as 1×n matrices. Construction through
/// `Matrix::checked` rejects NaN/Inf entries; the plain constructors do not
/// scan the data, so hot paths stay cheap.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data);

  static Matrix checked(std::size_t rows, std::size_t cols, std::vector<Real> data);
  static Matrix from_rows(std::initializer_list<std::initializer_list<Real>> rows);
  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const Real> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  const std::vector<Real>& values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const noexcept;
  void fill(Real v) noexcept;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(Real s) noexcept;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

std::string shape_str(const Matrix& m);

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, Real s);

/// A·B
Matrix matmul(const Matrix& a, const Matrix& b);
/// A·Bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// Aᵀ·B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// out += A·B, out += A·Bᵀ, out += Aᵀ·B. `out` must already have the result shape.
void add_matmul(Matrix& out, const Matrix& a, const Matrix& b);
void add_matmul_nt(Matrix& out, const Matrix& a, const Matrix& b);
void add_matmul_tn(Matrix& out, const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);
/// Adds a 1×cols row vector to every row.
void add_row_inplace(Matrix& m, const Matrix& row);
/// Column sums as a 1×cols row vector.
Matrix col_sums(const Matrix& m);
/// out += column sums of m.
void add_col_sums(Matrix& out, const Matrix& m);
/// Horizontal concatenation [A | B].
Matrix hconcat(const Matrix& a, const Matrix& b);
Real dot(std::span<const Real> a, std::span<const Real> b);
Real max_abs_diff(const Matrix& a, const Matrix& b);

Real sigmoid(Real x) noexcept;
Matrix sigmoid(const Matrix& m);
Matrix tanh(const Matrix& m);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);
/// Column-wise softmax with max subtraction.
Matrix softmax_cols(const Matrix& m);
/// Given Y = softmax_rows(X) and dL/dY, returns dL/dX.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy);
Matrix softmax_cols_backward(const Matrix& y, const Matrix& dy);

/// Seeded generator; std::mt19937_64 engine with hand-rolled distributions so
/// that the stream of derived values is identical on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  Real uniform();
  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);
  bool bernoulli(Real p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Uniform(−a, a) with a = sqrt(6 / (rows + cols)).
Matrix glorot_init(std::size_t rows, std::size_t cols, Rng& rng);
Matrix zeros(std::size_t rows, std::size_t cols);

using ParamId = std::size_t;

/// Named trainable tensors with gradients, iterated in insertion order.
class ParamStore {
 public:
  ParamId add(std::string name, Matrix value);

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  std::optional<ParamId> find(std::string_view name) const;
  ParamId at(std::string_view name) const;

  Matrix& value(ParamId id) { return values_.at(id); }
  const Matrix& value(ParamId id) const { return values_.at(id); }
  Matrix& grad(ParamId id) { return grads_.at(id); }
  const Matrix& grad(ParamId id) const { return grads_.at(id); }

  std::vector<Matrix>& grads() noexcept { return grads_; }
  const std::vector<Matrix>& grads() const noexcept { return grads_; }

  void zero_grad();
  /// Zero-filled tensors shaped like every parameter, in store order.
  std::vector<Matrix> zeros_like() const;
  std::size_t num_scalars() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::vector<Matrix> grads_;
};

/// Gradient accumulator indexed like a ParamStore.
using GradBuffer = std::vector<Matrix>;

/// Computes a scalar loss over the store. When `with_grads` is set, the
/// closure must also write dLoss/dθ into `params.grad(...)`. The closure must
/// be deterministic (dropout disabled or masks frozen).
using LossFn = std::function<Real(ParamStore& params, bool with_grads)>;

struct TensorGradCheck {
  std::string name;
  Real max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Real analytic = 0.0;
  Real numeric = 0.0;
  std::size_t refined = 0;  ///< entries re-evaluated by the refine hook
};

struct GradCheckReport {
  std::vector<TensorGradCheck> tensors;
  Real max_rel_error = 0.0;
  Real tol = 0.0;
  std::size_t entries = 0;
  std::size_t refined = 0;
  bool passed() const noexcept { return max_rel_error < tol; }
};

/// |a − n| / max(1e-8, |a| + |n|)
Real grad_rel_error(Real analytic, Real numeric) noexcept;

/// Central difference of one entry from a more precise evaluation of the same
/// loss; nullopt keeps the first estimate.
using RefineFn = std::function<std::optional<Real>(ParamId id, std::size_t index)>;

/// Called before the entries of a tensor are perturbed.
using TensorHook = std::function<void(ParamId id)>;

/// Central finite differences over every scalar of every parameter. Entries
/// whose error reaches tol/10 are passed to `refine` when given, and the
/// refined difference replaces the first one.
GradCheckReport check_gradients(const LossFn& loss_fn, ParamStore& params, Real eps,
                                Real tol, const RefineFn& refine = {},
                                const TensorHook& begin_tensor = {});

}  // namespace kinfuse
