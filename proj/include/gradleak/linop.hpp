#pragma once

// Matricized convolution operators and the dense linear-algebra kernel.
//
// Convolution operators are materialized as dense row-major matrices. The
// largest system met by the CNN3 experiments is U = 7542 x 5400 (~330 MB),
// plus a 5400 x 5400 Gram matrix (~230 MB) when the full-rank certificate is
// attempted; everything else is far smaller.
//
// Factorizations go through LAPACK (dgesdd, dgelsd, dpotrf, dgeqrf). Rank and
// minimum-norm least squares are defined by the singular values: a singular
// value counts iff sigma > rel_tol * max(rows, cols) * sigma_max. Before paying
// for a dense SVD, both try a shifted-Cholesky certificate on the Gram matrix
// that proves every singular value clears that threshold; when it succeeds the
// answer is the same as the SVD route would give.

#include <cblas.h>
#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/error.hpp"
#include "gradleak/tensor.hpp"

namespace gradleak::linop {

inline constexpr double kDefaultRankTolerance = std::numeric_limits<double>::epsilon();

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}
  DenseMatrix(std::size_t rows, std::size_t cols, Vector values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw std::invalid_argument("DenseMatrix: " + std::to_string(values_.size()) + " entries for a " +
                                  std::to_string(rows_) + "x" + std::to_string(cols_) + " matrix");
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    DenseMatrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("DenseMatrix::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), m.values_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  Vector multiply(std::span<const double> x) const {
    if (x.size() != cols_) throw std::invalid_argument("DenseMatrix::multiply: length mismatch");
    Vector y(rows_, 0.0);
    if (!empty()) {
      cblas_dgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(rows_), static_cast<int>(cols_), 1.0,
                  values_.data(), static_cast<int>(cols_), x.data(), 1, 0.0, y.data(), 1);
    }
    return y;
  }

  Vector multiply_transposed(std::span<const double> y) const {
    if (y.size() != rows_) throw std::invalid_argument("DenseMatrix::multiply_transposed: length mismatch");
    Vector x(cols_, 0.0);
    if (!empty()) {
      cblas_dgemv(CblasRowMajor, CblasTrans, static_cast<int>(rows_), static_cast<int>(cols_), 1.0,
                  values_.data(), static_cast<int>(cols_), y.data(), 1, 0.0, x.data(), 1);
    }
    return x;
  }

  DenseMatrix multiply(const DenseMatrix& other) const {
    if (cols_ != other.rows_) throw std::invalid_argument("DenseMatrix::multiply: inner dimension mismatch");
    DenseMatrix out(rows_, other.cols_);
    if (rows_ && other.cols_ && cols_) {
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(rows_),
                  static_cast<int>(other.cols_), static_cast<int>(cols_), 1.0, values_.data(),
                  static_cast<int>(cols_), other.values_.data(), static_cast<int>(other.cols_), 0.0,
                  out.values_.data(), static_cast<int>(other.cols_));
    }
    return out;
  }

  DenseMatrix transposed() const {
    DenseMatrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  // Stacks `top` over `bottom`; column counts must agree.
  static DenseMatrix vstack(const DenseMatrix& top, const DenseMatrix& bottom) {
    if (top.cols_ != bottom.cols_) throw std::invalid_argument("DenseMatrix::vstack: column mismatch");
    DenseMatrix m(top.rows_ + bottom.rows_, top.cols_);
    std::copy(top.values_.begin(), top.values_.end(), m.values_.begin());
    std::copy(bottom.values_.begin(), bottom.values_.end(),
              m.values_.begin() + static_cast<std::ptrdiff_t>(top.values_.size()));
    return m;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector values_;
};

// Square-kernel convolution geometry without padding.
struct ConvGeometry {
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_size = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;

  std::size_t out_height() const { return (in_height - kernel_size) / stride + 1; }
  std::size_t out_width() const { return (in_width - kernel_size) / stride + 1; }
  Shape3 input_shape() const { return {in_channels, in_height, in_width}; }
  Shape3 output_shape() const { return {out_channels, out_height(), out_width()}; }
  std::size_t input_size() const { return input_shape().size(); }
  std::size_t output_size() const { return output_shape().size(); }
  std::size_t kernel_entries() const { return out_channels * in_channels * kernel_size * kernel_size; }

  void validate() const {
    if (in_height == 0 || in_width == 0 || in_channels == 0 || kernel_size == 0 || out_channels == 0) {
      throw std::invalid_argument("ConvGeometry: all counts must be positive");
    }
    if (stride == 0) throw std::invalid_argument("ConvGeometry: stride must be >= 1");
    if (kernel_size > in_height || kernel_size > in_width) {
      throw std::invalid_argument("ConvGeometry: kernel " + std::to_string(kernel_size) +
                                  " does not fit input " + input_shape().str());
    }
  }

  bool operator==(const ConvGeometry&) const = default;
};

// Kernel array indexed [out_channel, in_channel, ky, kx], row-major.
struct Kernel {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t size = 0;
  Vector values;

  static Kernel zeros(std::size_t out_ch, std::size_t in_ch, std::size_t k) {
    return {out_ch, in_ch, k, Vector(out_ch * in_ch * k * k, 0.0)};
  }
  static Kernel zeros(const ConvGeometry& g) { return zeros(g.out_channels, g.in_channels, g.kernel_size); }

  std::size_t index(std::size_t o, std::size_t c, std::size_t ky, std::size_t kx) const {
    return ((o * in_channels + c) * size + ky) * size + kx;
  }
  double& at(std::size_t o, std::size_t c, std::size_t ky, std::size_t kx) { return values[index(o, c, ky, kx)]; }
  double at(std::size_t o, std::size_t c, std::size_t ky, std::size_t kx) const {
    return values[index(o, c, ky, kx)];
  }

  bool matches(const ConvGeometry& g) const {
    return out_channels == g.out_channels && in_channels == g.in_channels && size == g.kernel_size &&
           values.size() == g.kernel_entries();
  }
};

struct SvdFactors {
  DenseMatrix left_basis;   // m x m
  Vector singular_values;   // min(m, n), descending
  DenseMatrix right_basis;  // n x n
};

// Compressed-row view of a matrix, used for the matrix-vector products inside
// iterative solvers and for assembling Gram matrices of structured operators.
class SparseRows {
 public:
  static SparseRows from_dense(const DenseMatrix& m) {
    SparseRows s;
    s.rows_ = m.rows();
    s.cols_ = m.cols();
    s.row_start_.assign(s.rows_ + 1, 0);
    for (std::size_t r = 0; r < s.rows_; ++r) {
      const auto row = m.row(r);
      for (std::size_t c = 0; c < s.cols_; ++c) {
        if (row[c] != 0.0) {
          s.col_index_.push_back(c);
          s.values_.push_back(row[c]);
        }
      }
      s.row_start_[r + 1] = s.values_.size();
    }
    return s;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return values_.size(); }

  Vector multiply(std::span<const double> x) const {
    if (x.size() != cols_) throw std::invalid_argument("SparseRows::multiply: length mismatch");
    Vector y(rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
      double acc = 0.0;
      for (std::size_t p = row_start_[r]; p < row_start_[r + 1]; ++p) acc += values_[p] * x[col_index_[p]];
      y[r] = acc;
    }
    return y;
  }

  Vector multiply_transposed(std::span<const double> y) const {
    if (y.size() != rows_) throw std::invalid_argument("SparseRows::multiply_transposed: length mismatch");
    Vector x(cols_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
      const double yr = y[r];
      if (yr == 0.0) continue;
      for (std::size_t p = row_start_[r]; p < row_start_[r + 1]; ++p) x[col_index_[p]] += values_[p] * yr;
    }
    return x;
  }

  SparseRows transposed() const {
    SparseRows t;
    t.rows_ = cols_;
    t.cols_ = rows_;
    t.row_start_.assign(cols_ + 1, 0);
    for (std::size_t c : col_index_) ++t.row_start_[c + 1];
    for (std::size_t c = 0; c < cols_; ++c) t.row_start_[c + 1] += t.row_start_[c];
    t.col_index_.resize(nnz());
    t.values_.resize(nnz());
    std::vector<std::size_t> fill(t.row_start_.begin(), t.row_start_.end() - 1);
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t p = row_start_[r]; p < row_start_[r + 1]; ++p) {
        const std::size_t dst = fill[col_index_[p]]++;
        t.col_index_[dst] = r;
        t.values_[dst] = values_[p];
      }
    }
    return t;
  }

  // Dense cols x cols matrix A^T A (both triangles filled).
  Vector gram() const {
    Vector g(cols_ * cols_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
      const std::size_t begin = row_start_[r];
      const std::size_t end = row_start_[r + 1];
      for (std::size_t a = begin; a < end; ++a) {
        const double va = values_[a];
        double* grow = g.data() + col_index_[a] * cols_;
        for (std::size_t b = a; b < end; ++b) grow[col_index_[b]] += va * values_[b];
      }
    }
    for (std::size_t i = 0; i < cols_; ++i)
      for (std::size_t j = i + 1; j < cols_; ++j) g[j * cols_ + i] = g[i * cols_ + j];
    return g;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return std::sqrt(s);
  }

  std::size_t max_column_count() const {
    std::vector<std::size_t> counts(cols_, 0);
    for (std::size_t c : col_index_) ++counts[c];
    return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_start_;
  std::vector<std::size_t> col_index_;
  Vector values_;
};

namespace detail {

inline void require_finite(const DenseMatrix& m, const char* what) {
  if (!m.all_finite()) throw NumericalError(std::string(what) + ": matrix has non-finite entries");
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline std::size_t count_above(std::span<const double> sigma, std::size_t rows, std::size_t cols,
                               double rel_tolerance) {
  if (sigma.empty()) return 0;
  const double smax = *std::max_element(sigma.begin(), sigma.end());
  const double threshold = rel_tolerance * static_cast<double>(std::max(rows, cols)) * smax;
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > threshold && s > 0.0; }));
}

}  // namespace detail

// M such that M * vec(X) = vec(conv(X, kernel, stride)), no padding.
inline DenseMatrix weight_circulant(const Kernel& kernel, const ConvGeometry& geom) {
  geom.validate();
  if (!kernel.matches(geom)) {
    throw std::invalid_argument("weight_circulant: kernel [" + std::to_string(kernel.out_channels) + "," +
                                std::to_string(kernel.in_channels) + "," + std::to_string(kernel.size) +
                                "] does not match geometry");
  }
  const std::size_t oh = geom.out_height(), ow = geom.out_width();
  const std::size_t h = geom.in_height, w = geom.in_width, k = geom.kernel_size, s = geom.stride;
  DenseMatrix m(geom.output_size(), geom.input_size());
  for (std::size_t o = 0; o < geom.out_channels; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        auto row = m.row((o * oh + y) * ow + x);
        for (std::size_t c = 0; c < geom.in_channels; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              row[(c * h + s * y + ky) * w + s * x + kx] = kernel.at(o, c, ky, kx);
      }
  return m;
}

// G such that G * vec(X) = vec(dJ/dKernel) when grad_z = dJ/dZ for the layer
// output Z. Row index follows the kernel layout (o, c, ky, kx).
inline DenseMatrix gradient_circulant(std::span<const double> grad_z, const ConvGeometry& geom) {
  geom.validate();
  if (grad_z.size() != geom.output_size()) {
    throw std::invalid_argument("gradient_circulant: grad_z has " + std::to_string(grad_z.size()) +
                                " entries, geometry output has " + std::to_string(geom.output_size()));
  }
  for (double v : grad_z)
    if (!std::isfinite(v)) throw NumericalError("gradient_circulant: grad_z has non-finite entries");
  const std::size_t oh = geom.out_height(), ow = geom.out_width();
  const std::size_t h = geom.in_height, w = geom.in_width, k = geom.kernel_size, s = geom.stride;
  const std::size_t cin = geom.in_channels;
  DenseMatrix g(geom.kernel_entries(), geom.input_size());
  for (std::size_t o = 0; o < geom.out_channels; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          auto row = g.row(((o * cin + c) * k + ky) * k + kx);
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
              row[(c * h + s * y + ky) * w + s * x + kx] += grad_z[(o * oh + y) * ow + x];
        }
  return g;
}

inline SvdFactors svd(const DenseMatrix& m) {
  if (m.empty()) throw std::invalid_argument("svd: empty matrix");
  detail::require_finite(m, "svd");
  const auto rows = static_cast<lapack_int>(m.rows());
  const auto cols = static_cast<lapack_int>(m.cols());
  Vector a(m.values().begin(), m.values().end());
  SvdFactors f{DenseMatrix(m.rows(), m.rows()), Vector(std::min(m.rows(), m.cols())),
               DenseMatrix(m.cols(), m.cols())};
  DenseMatrix vt(m.cols(), m.cols());
  const lapack_int info = LAPACKE_dgesdd(LAPACK_ROW_MAJOR, 'A', rows, cols, a.data(), cols,
                                         f.singular_values.data(), f.left_basis.data(), rows, vt.data(), cols);
  if (info != 0) throw NumericalError("svd: dgesdd failed with info " + std::to_string(info));
  f.right_basis = vt.transposed();
  return f;
}

inline Vector singular_values(const DenseMatrix& m) {
  if (m.empty()) throw std::invalid_argument("singular_values: empty matrix");
  detail::require_finite(m, "singular_values");
  // The row-major buffer is the column-major transpose; both share singular values.
  Vector a(m.values().begin(), m.values().end());
  Vector sigma(std::min(m.rows(), m.cols()));
  const auto lda = static_cast<lapack_int>(m.cols());
  const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'N', static_cast<lapack_int>(m.cols()),
                                         static_cast<lapack_int>(m.rows()), a.data(), lda, sigma.data(),
                                         nullptr, 1, nullptr, 1);
  if (info != 0) throw NumericalError("singular_values: dgesdd failed with info " + std::to_string(info));
  return sigma;
}

// Proof that every singular value of A exceeds the rank threshold, obtained
// from a Cholesky factorization of the shifted Gram matrix. For rows >= cols
// the Gram is A^T A, otherwise A A^T. The bound uses ||A||_F >= sigma_max,
// the standard rounding bounds for inner products (gamma_k ||A||_F^2) and for
// Cholesky (gamma_{n+1} trace), inflated by 4.
class FullRankCertificate {
 public:
  static std::optional<FullRankCertificate> attempt(const SparseRows& a, double rel_tolerance) {
    const bool wide = a.rows() < a.cols();
    const SparseRows gram_source = wide ? a.transposed() : a;
    const std::size_t n = gram_source.cols();
    if (n == 0) return std::nullopt;

    const double fro = a.frobenius_norm();
    if (!(fro > 0.0) || !std::isfinite(fro)) return std::nullopt;

    FullRankCertificate cert;
    cert.wide_ = wide;
    cert.order_ = n;
    cert.factor_ = gram_source.gram();

    const double u = std::numeric_limits<double>::epsilon() / 2.0;
    auto gamma = [u](double k) { return k * u / (1.0 - k * u); };
    const double terms = static_cast<double>(std::max<std::size_t>(gram_source.max_column_count(), 1));
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += cert.factor_[i * n + i];
    const double tau = rel_tolerance * static_cast<double>(std::max(a.rows(), a.cols())) * fro;
    const double gram_error = gamma(terms) * fro * fro;
    const double cholesky_error = gamma(static_cast<double>(n) + 1.0) * trace / (1.0 - gamma(n + 1.0));
    cert.shift_ = tau * tau + 4.0 * (gram_error + cholesky_error);
    for (std::size_t i = 0; i < n; ++i) cert.factor_[i * n + i] -= cert.shift_;

    const lapack_int info = LAPACKE_dpotrf(LAPACK_COL_MAJOR, 'L', static_cast<lapack_int>(n),
                                           cert.factor_.data(), static_cast<lapack_int>(n));
    if (info != 0) return std::nullopt;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(cert.factor_[i * n + i] > 0.0)) return std::nullopt;
    }
    return cert;
  }

  bool wide() const { return wide_; }
  std::size_t order() const { return order_; }
  double shift() const { return shift_; }

  // Solves (Gram - shift I) d = rhs with the stored factor.
  Vector solve(std::span<const double> rhs) const {
    Vector d(rhs.begin(), rhs.end());
    const auto n = static_cast<lapack_int>(order_);
    const lapack_int info = LAPACKE_dpotrs(LAPACK_COL_MAJOR, 'L', n, 1, factor_.data(), n, d.data(), n);
    if (info != 0) throw NumericalError("FullRankCertificate::solve: dpotrs failed");
    return d;
  }

  // Least squares (tall) or minimum-norm (wide) solution, refined from the
  // shifted normal equations until corrections stall.
  Vector least_squares(const SparseRows& a, std::span<const double> b) const {
    const double stop = 4.0 * std::numeric_limits<double>::epsilon();
    if (!wide_) {
      Vector x(a.cols(), 0.0);
      for (int it = 0; it < 60; ++it) {
        Vector r = a.multiply(x);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = b[i] - r[i];
        const Vector d = solve(a.multiply_transposed(r));
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += d[i];
        if (detail::norm2(d) <= stop * detail::norm2(x)) break;
      }
      return x;
    }
    Vector y(a.rows(), 0.0);
    Vector x(a.cols(), 0.0);
    for (int it = 0; it < 60; ++it) {
      Vector r = a.multiply(x);
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = b[i] - r[i];
      const Vector d = solve(r);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += d[i];
      const Vector dx = a.multiply_transposed(d);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += dx[i];
      if (detail::norm2(dx) <= stop * detail::norm2(x)) break;
    }
    return x;
  }

 private:
  bool wide_ = false;
  std::size_t order_ = 0;
  double shift_ = 0.0;
  Vector factor_;
};

inline std::size_t numerical_rank(const DenseMatrix& m, double rel_tolerance = kDefaultRankTolerance) {
  if (m.empty()) throw std::invalid_argument("numerical_rank: empty matrix");
  if (!(rel_tolerance > 0.0 && rel_tolerance < 1.0)) {
    throw std::invalid_argument("numerical_rank: rel_tolerance must lie in (0, 1)");
  }
  detail::require_finite(m, "numerical_rank");
  if (FullRankCertificate::attempt(SparseRows::from_dense(m), rel_tolerance)) {
    return std::min(m.rows(), m.cols());
  }
  const Vector sigma = singular_values(m);
  return detail::count_above(sigma, m.rows(), m.cols(), rel_tolerance);
}

// Minimum-Euclidean-norm minimizer of ||a x - b||^2; singular values at or
// below the numerical_rank threshold are treated as zero.
inline Vector lstsq_min_norm(const DenseMatrix& a, std::span<const double> b,
                             double rel_tolerance = kDefaultRankTolerance) {
  if (a.empty()) throw std::invalid_argument("lstsq_min_norm: empty matrix");
  if (b.size() != a.rows()) {
    throw std::invalid_argument("lstsq_min_norm: rhs has " + std::to_string(b.size()) + " entries, matrix has " +
                                std::to_string(a.rows()) + " rows");
  }
  detail::require_finite(a, "lstsq_min_norm");
  const SparseRows sparse = SparseRows::from_dense(a);
  if (auto cert = FullRankCertificate::attempt(sparse, rel_tolerance)) return cert->least_squares(sparse, b);

  const auto m = static_cast<lapack_int>(a.rows());
  const auto n = static_cast<lapack_int>(a.cols());
  Vector work(a.values().begin(), a.values().end());
  Vector rhs(static_cast<std::size_t>(std::max(m, n)), 0.0);
  std::copy(b.begin(), b.end(), rhs.begin());
  Vector sigma(static_cast<std::size_t>(std::min(m, n)));
  lapack_int rank = 0;
  const double rcond = rel_tolerance * static_cast<double>(std::max(m, n));
  const lapack_int info =
      LAPACKE_dgelsd(LAPACK_ROW_MAJOR, m, n, 1, work.data(), n, rhs.data(), 1, sigma.data(), rcond, &rank);
  if (info != 0) throw NumericalError("lstsq_min_norm: dgelsd failed with info " + std::to_string(info));
  rhs.resize(static_cast<std::size_t>(n));
  return rhs;
}

// Orthonormal basis (m x n) of the column space of a full-column-rank m x n
// matrix, via Householder QR.
inline DenseMatrix orthonormal_column_basis(const DenseMatrix& a) {
  if (a.rows() < a.cols() || a.empty()) {
    throw std::invalid_argument("orthonormal_column_basis: need a nonempty matrix with rows >= cols");
  }
  detail::require_finite(a, "orthonormal_column_basis");
  const auto m = static_cast<lapack_int>(a.rows());
  const auto n = static_cast<lapack_int>(a.cols());
  Vector q(a.values().begin(), a.values().end());
  Vector tau(a.cols());
  lapack_int info = LAPACKE_dgeqrf(LAPACK_ROW_MAJOR, m, n, q.data(), n, tau.data());
  if (info != 0) throw NumericalError("orthonormal_column_basis: dgeqrf failed");
  info = LAPACKE_dorgqr(LAPACK_ROW_MAJOR, m, n, n, q.data(), n, tau.data());
  if (info != 0) throw NumericalError("orthonormal_column_basis: dorgqr failed");
  return DenseMatrix(a.rows(), a.cols(), std::move(q));
}

}  // namespace gradleak::linop
