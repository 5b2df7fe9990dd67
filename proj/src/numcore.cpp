#include "kinfuse/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kinfuse/error.hpp"

namespace kinfuse {

namespace {

void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, Real fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix Matrix::checked(std::size_t rows, std::size_t cols, std::vector<Real> data) {
  Matrix m(rows, cols, std::move(data));
  if (!m.all_finite()) throw NumericError("Matrix: non-finite entry");
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<Real> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::span<const Real> values) {
  return Matrix(1, values.size(), std::vector<Real>(values.begin(), values.end()));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

void Matrix::fill(Real v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Matrix& Matrix::operator+=(const Matrix& other) {
  require(same_shape(other), "operator+=", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require(same_shape(other), "operator-=", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(Real s) noexcept {
  for (Real& v : data_) v *= s;
  return *this;
}

std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + ")";
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, Real s) { return a *= s; }

namespace {

#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define KINFUSE_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define KINFUSE_CLONES
#endif

// out[n x m] += a[n x k] * b[k x m], all row-major with the given strides.
KINFUSE_CLONES
void gemm_kernel(Real* __restrict out, std::size_t ld_out, const Real* __restrict a,
                 std::size_t ld_a, const Real* __restrict b, std::size_t ld_b, std::size_t n,
                 std::size_t k, std::size_t m) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    Real* __restrict o0 = out + i * ld_out;
    Real* __restrict o1 = o0 + ld_out;
    Real* __restrict o2 = o1 + ld_out;
    Real* __restrict o3 = o2 + ld_out;
    const Real* ar = a + i * ld_a;
    for (std::size_t p = 0; p < k; ++p) {
      const Real a0 = ar[p], a1 = ar[ld_a + p], a2 = ar[2 * ld_a + p], a3 = ar[3 * ld_a + p];
      const Real* __restrict br = b + p * ld_b;
      for (std::size_t j = 0; j < m; ++j) {
        o0[j] += a0 * br[j];
        o1[j] += a1 * br[j];
        o2[j] += a2 * br[j];
        o3[j] += a3 * br[j];
      }
    }
  }
  for (; i < n; ++i) {
    Real* __restrict o = out + i * ld_out;
    const Real* ar = a + i * ld_a;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ar[p];
      const Real* __restrict br = b + p * ld_b;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace

void add_matmul(Matrix& out, const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols(), "matmul", a,
          b);
  gemm_kernel(out.data().data(), out.cols(), a.data().data(), a.cols(), b.data().data(), b.cols(),
              a.rows(), a.cols(), b.cols());
}

void add_matmul_nt(Matrix& out, const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows(), "matmul_nt",
          a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (n >= 4) {
    // same per-element summation order as the dot-product form, but vectorizable
    thread_local std::vector<Real> bt;
    bt.resize(k * m);
    for (std::size_t j = 0; j < m; ++j) {
      const Real* br = b.row(j).data();
      for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = br[p];
    }
    gemm_kernel(out.data().data(), m, a.data().data(), k, bt.data(), m, n, k, m);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Real* ar = a.row(i).data();
    for (std::size_t j = 0; j < m; ++j) {
      const Real* br = b.row(j).data();
      Real s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) += s;
    }
  }
}

void add_matmul_tn(Matrix& out, const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn",
          a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* ar = a.row(r).data();
    const Real* br = b.row(r).data();
    for (std::size_t i = 0; i < k; ++i) {
      const Real av = ar[i];
      if (av == 0.0) continue;
      Real* o = out.row(i).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  add_matmul(out, a, b);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt", a, b);
  Matrix out(a.rows(), b.rows());
  add_matmul_nt(out, a, b);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn", a, b);
  Matrix out(a.cols(), b.cols());
  add_matmul_tn(out, a, b);
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "hadamard", a, b);
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

void add_row_inplace(Matrix& m, const Matrix& row) {
  require(row.rows() == 1 && row.cols() == m.cols(), "add_row", m, row);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Real* r = m.row(i).data();
    for (std::size_t j = 0; j < m.cols(); ++j) r[j] += row[j];
  }
}

Matrix col_sums(const Matrix& m) {
  Matrix out(1, m.cols());
  add_col_sums(out, m);
  return out;
}

void add_col_sums(Matrix& out, const Matrix& m) {
  require(out.rows() == 1 && out.cols() == m.cols(), "col_sums", out, m);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m(i, j);
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "hconcat", a, b);
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + a.cols());
  }
  return out;
}

Real dot(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  Real s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Real max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "max_abs_diff", a, b);
  Real m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Real sigmoid(Real x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& m) {
  Matrix out = m;
  for (Real& v : out.data()) v = sigmoid(v);
  return out;
}

Matrix tanh(const Matrix& m) {
  Matrix out = m;
  for (Real& v : out.data()) v = std::tanh(v);
  return out;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const Real mx = *std::max_element(r.begin(), r.end());
    Real sum = 0.0;
    for (Real& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (Real& v : r) v /= sum;
  }
  return out;
}

Matrix softmax_cols(const Matrix& m) {
  Matrix out = m;
  for (std::size_t j = 0; j < out.cols(); ++j) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t i = 0; i < out.rows(); ++i) mx = std::max(mx, out(i, j));
    Real sum = 0.0;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      out(i, j) = std::exp(out(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t i = 0; i < out.rows(); ++i) out(i, j) /= sum;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  require(y.same_shape(dy), "softmax_rows_backward", y, dy);
  Matrix dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const Real inner = dot(y.row(i), dy.row(i));
    for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - inner);
  }
  return dx;
}

Matrix softmax_cols_backward(const Matrix& y, const Matrix& dy) {
  require(y.same_shape(dy), "softmax_cols_backward", y, dy);
  Matrix dx(y.rows(), y.cols());
  for (std::size_t j = 0; j < y.cols(); ++j) {
    Real inner = 0.0;
    for (std::size_t i = 0; i < y.rows(); ++i) inner += y(i, j) * dy(i, j);
    for (std::size_t i = 0; i < y.rows(); ++i) dx(i, j) = y(i, j) * (dy(i, j) - inner);
  }
  return dx;
}

Real Rng::uniform() { return static_cast<Real>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

Matrix glorot_init(std::size_t rows, std::size_t cols, Rng& rng) {
  if (rows == 0 || cols == 0) throw ShapeError("glorot_init: dimensions must be positive");
  const Real a = std::sqrt(6.0 / static_cast<Real>(rows + cols));
  Matrix m(rows, cols);
  for (Real& v : m.data()) v = rng.uniform(-a, a);
  return m;
}

Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

ParamId ParamStore::add(std::string name, Matrix value) {
  if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  names_.push_back(std::move(name));
  grads_.emplace_back(value.rows(), value.cols());
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<ParamId> ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

ParamId ParamStore::at(std::string_view name) const {
  auto id = find(name);
  if (!id) throw std::out_of_range("ParamStore: no parameter '" + std::string(name) + "'");
  return *id;
}

void ParamStore::zero_grad() {
  for (Matrix& g : grads_) g.fill(0.0);
}

std::vector<Matrix> ParamStore::zeros_like() const {
  std::vector<Matrix> out;
  out.reserve(values_.size());
  for (const Matrix& v : values_) out.emplace_back(v.rows(), v.cols());
  return out;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const Matrix& v : values_) n += v.size();
  return n;
}

Real grad_rel_error(Real analytic, Real numeric) noexcept {
  return std::abs(analytic - numeric) / std::max(Real(1e-8), std::abs(analytic) + std::abs(numeric));
}

GradCheckReport check_gradients(const LossFn& loss_fn, ParamStore& params, Real eps,
                                Real tol, const RefineFn& refine,
                                const TensorHook& begin_tensor) {
  GradCheckReport report;
  report.tol = tol;
  params.zero_grad();
  const Real base = loss_fn(params, true);
  if (!std::isfinite(base)) throw NumericError("check_gradients: non-finite loss");
  const std::vector<Matrix> analytic = params.grads();

  for (ParamId id = 0; id < params.size(); ++id) {
    TensorGradCheck tc;
    tc.name = params.name(id);
    if (begin_tensor) begin_tensor(id);
    Matrix& value = params.value(id);
    for (std::size_t k = 0; k < value.size(); ++k) {
      const Real saved = value[k];
      value[k] = saved + eps;
      const Real plus = loss_fn(params, false);
      value[k] = saved - eps;
      const Real minus = loss_fn(params, false);
      value[k] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("check_gradients: non-finite loss while perturbing " + tc.name);
      }
      Real numeric = (plus - minus) / (2.0 * eps);
      Real err = grad_rel_error(analytic[id][k], numeric);
      if (refine && err >= tol / 10) {
        if (const auto better = refine(id, k)) {
          numeric = *better;
          err = grad_rel_error(analytic[id][k], numeric);
          ++tc.refined;
        }
      }
      if (err > tc.max_rel_error || k == 0) {
        tc.max_rel_error = err;
        tc.worst_index = k;
        tc.analytic = analytic[id][k];
        tc.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    report.entries += value.size();
    report.refined += tc.refined;
    report.tensors.push_back(std::move(tc));
  }
  params.grads() = analytic;
  return report;
}

}  // namespace kinfuse
