#include <gtest/gtest.h>

#include <cmath>

#include "gradleak/linop.hpp"
#include "oracles.hpp"

using namespace gradleak;
using namespace gradleak::linop;

namespace {

DenseMatrix to_dense(const oracle::Mat& a) {
  DenseMatrix m(a.size(), a[0].size());
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c) m(r, c) = a[r][c];
  return m;
}

oracle::Mat to_mat(const DenseMatrix& m) {
  oracle::Mat a(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) a[r][c] = m(r, c);
  return a;
}

// m x n matrix of rank r.
oracle::Mat low_rank(std::size_t m, std::size_t n, std::size_t r, std::uint64_t seed) {
  return oracle::matmul(oracle::random_matrix(m, r, seed), oracle::random_matrix(r, n, seed + 1));
}

Kernel random_kernel(const ConvGeometry& g, std::uint64_t seed) {
  Kernel k = Kernel::zeros(g);
  k.values = oracle::random_vector(k.values.size(), seed);
  return k;
}

const ConvGeometry kGeometries[] = {
    {7, 7, 2, 3, 3, 1},
    {8, 9, 3, 2, 4, 2},
    {9, 9, 1, 4, 2, 3},
    {6, 5, 2, 1, 2, 1},
};

}  // namespace

TEST(DenseMatrix, ProductsMatchLoops) {
  const auto a = oracle::random_matrix(5, 4, 1);
  const auto b = oracle::random_matrix(4, 3, 2);
  const auto x = oracle::random_vector(4, 3);
  const auto y = oracle::random_vector(5, 4);
  const DenseMatrix da = to_dense(a);
  EXPECT_LT(oracle::rel_diff(da.multiply(x), oracle::matvec(a, x)), 1e-14);
  EXPECT_LT(oracle::rel_diff(da.multiply_transposed(y), oracle::matvec(oracle::transpose(a), y)), 1e-14);
  const auto ab = to_mat(da.multiply(to_dense(b)));
  const auto ref = oracle::matmul(a, b);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_LT(oracle::rel_diff(ab[r], ref[r]), 1e-14);
}

TEST(DenseMatrix, RejectsWrongSize) { EXPECT_THROW(DenseMatrix(2, 3, Vector(5)), std::invalid_argument); }

TEST(DenseMatrix, VstackKeepsRowOrder) {
  const auto a = DenseMatrix::from_rows({{1, 2}, {3, 4}});
  const auto b = DenseMatrix::from_rows({{5, 6}});
  const auto s = DenseMatrix::vstack(a, b);
  ASSERT_EQ(s.rows(), 3u);
  EXPECT_EQ(s(2, 1), 6.0);
  EXPECT_EQ(s(1, 0), 3.0);
}

TEST(ConvGeometry, ShapesAndValidation) {
  const ConvGeometry g{32, 32, 3, 4, 6, 2};
  EXPECT_EQ(g.out_height(), 15u);
  EXPECT_EQ(g.output_size(), 6u * 15 * 15);
  EXPECT_EQ(g.kernel_entries(), 6u * 3 * 4 * 4);
  EXPECT_THROW((ConvGeometry{3, 3, 1, 4, 1, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((ConvGeometry{8, 8, 1, 3, 1, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((ConvGeometry{8, 8, 0, 3, 1, 1}.validate()), std::invalid_argument);
}

TEST(WeightCirculant, MatchesDirectConvolution) {
  std::uint64_t seed = 10;
  for (const auto& g : kGeometries) {
    const Kernel k = random_kernel(g, seed++);
    const auto x = oracle::random_vector(g.input_size(), seed++);
    const auto m = weight_circulant(k, g);
    ASSERT_EQ(m.rows(), g.output_size());
    ASSERT_EQ(m.cols(), g.input_size());
    const auto ref = oracle::conv(x, k.values, g.in_channels, g.in_height, g.in_width, g.out_channels,
                                  g.kernel_size, g.stride);
    EXPECT_LT(oracle::rel_diff(m.multiply(x), ref), 1e-14);
  }
}

TEST(WeightCirculant, RejectsMismatchedKernel) {
  const ConvGeometry g{7, 7, 2, 3, 3, 1};
  EXPECT_THROW(weight_circulant(Kernel::zeros(3, 1, 3), g), std::invalid_argument);
}

TEST(GradientCirculant, MatchesKernelGradient) {
  std::uint64_t seed = 40;
  for (const auto& g : kGeometries) {
    const auto gz = oracle::random_vector(g.output_size(), seed++);
    const auto x = oracle::random_vector(g.input_size(), seed++);
    const auto m = gradient_circulant(gz, g);
    ASSERT_EQ(m.rows(), g.kernel_entries());
    ASSERT_EQ(m.cols(), g.input_size());
    const auto ref = oracle::conv_kernel_grad(x, gz, g.in_channels, g.in_height, g.in_width, g.out_channels,
                                              g.kernel_size, g.stride);
    EXPECT_LT(oracle::rel_diff(m.multiply(x), ref), 1e-14);
  }
}

TEST(GradientCirculant, RejectsWrongLengthAndNonFinite) {
  const ConvGeometry g{7, 7, 2, 3, 3, 1};
  Vector gz(g.output_size() - 1, 1.0);
  EXPECT_THROW(gradient_circulant(gz, g), std::invalid_argument);
  gz.assign(g.output_size(), 1.0);
  gz[3] = std::nan("");
  EXPECT_THROW(gradient_circulant(gz, g), NumericalError);
}

TEST(Svd, ReconstructsAndIsOrthogonal) {
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{9, 5}, {5, 9}, {6, 6}}) {
    const auto a = oracle::random_matrix(m, n, m * 31 + n);
    const auto f = svd(to_dense(a));
    const auto ref = oracle::singular_values(a);
    ASSERT_EQ(f.singular_values.size(), std::min(m, n));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(f.singular_values[i], ref[i], 1e-12);

    // R [S; 0] S^T
    DenseMatrix sigma(m, n);
    for (std::size_t i = 0; i < std::min(m, n); ++i) sigma(i, i) = f.singular_values[i];
    const auto rec = f.left_basis.multiply(sigma).multiply(f.right_basis.transposed());
    double err = 0, den = 0;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        err += std::pow(rec(r, c) - a[r][c], 2);
        den += a[r][c] * a[r][c];
      }
    EXPECT_LT(std::sqrt(err / den), 1e-10);
    const auto rtr = f.left_basis.transposed().multiply(f.left_basis);
    const auto sts = f.right_basis.transposed().multiply(f.right_basis);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(rtr(i, j), i == j ? 1.0 : 0.0, 1e-10);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(sts(i, j), i == j ? 1.0 : 0.0, 1e-10);
  }
}

TEST(SingularValues, MatchJacobiOracle) {
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{12, 7}, {7, 12}, {1, 5}, {5, 1}}) {
    const auto a = oracle::random_matrix(m, n, 100 + m + n);
    auto sv = singular_values(to_dense(a));
    std::sort(sv.rbegin(), sv.rend());
    const auto ref = oracle::singular_values(a);
    ASSERT_EQ(sv.size(), ref.size());
    for (std::size_t i = 0; i < sv.size(); ++i) EXPECT_NEAR(sv[i], ref[i], 1e-12);
  }
}

TEST(NumericalRank, KnownRanks) {
  EXPECT_EQ(numerical_rank(DenseMatrix::identity(5)), 5u);
  EXPECT_EQ(numerical_rank(DenseMatrix::from_rows({{1, 2}, {2, 4}})), 1u);
  EXPECT_EQ(numerical_rank(DenseMatrix(3, 4)), 0u);
  for (auto [m, n, r] : {std::tuple<std::size_t, std::size_t, std::size_t>{30, 12, 7}, {12, 30, 9}, {20, 20, 20},
                         {25, 10, 10}, {10, 25, 10}}) {
    const DenseMatrix a = to_dense(low_rank(m, n, r, m * n + r));
    EXPECT_EQ(numerical_rank(a), r) << m << "x" << n << " rank " << r;
  }
}

// Two routes to the same rank: the Gram-matrix certificate (full rank) and
// counting singular values above the threshold.
TEST(NumericalRank, CertificateAgreesWithSingularValueCount) {
  for (auto [m, n, r] : {std::tuple<std::size_t, std::size_t, std::size_t>{40, 15, 15}, {15, 40, 15}, {40, 15, 11}}) {
    const DenseMatrix a = to_dense(low_rank(m, n, r, 7 * m + r));
    const auto sigma = singular_values(a);
    const auto counted = detail::count_above(sigma, m, n, kDefaultRankTolerance);
    EXPECT_EQ(numerical_rank(a), counted);
    const bool certified = FullRankCertificate::attempt(SparseRows::from_dense(a), kDefaultRankTolerance).has_value();
    EXPECT_EQ(certified, r == std::min(m, n));
  }
}

TEST(NumericalRank, CirculantRankFromOracle) {
  // Strided layer with more unknowns than equations: rank = row count.
  const ConvGeometry g{10, 10, 3, 4, 3, 2};
  const auto w = weight_circulant(random_kernel(g, 5), g);
  const auto ref = oracle::singular_values(to_mat(w));
  const double thr = kDefaultRankTolerance * std::max(w.rows(), w.cols()) * ref.front();
  const auto expected = std::count_if(ref.begin(), ref.end(), [&](double s) { return s > thr; });
  EXPECT_EQ(numerical_rank(w), static_cast<std::size_t>(expected));
}

TEST(NumericalRank, RejectsBadInput) {
  EXPECT_THROW(numerical_rank(DenseMatrix::identity(3), 0.0), std::invalid_argument);
  EXPECT_THROW(numerical_rank(DenseMatrix::identity(3), 1.0), std::invalid_argument);
  auto m = DenseMatrix::identity(3);
  m(1, 2) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(numerical_rank(m), NumericalError);
}

TEST(LstsqMinNorm, FullColumnRankMatchesNormalEquations) {
  const auto a = oracle::random_matrix(20, 8, 3);
  const auto b = oracle::random_vector(20, 4);
  EXPECT_LT(oracle::rel_diff(lstsq_min_norm(to_dense(a), b), oracle::lstsq_full_rank(a, b)), 1e-10);
}

TEST(LstsqMinNorm, WideReturnsMinimumNormSolution) {
  const auto a = oracle::random_matrix(6, 15, 5);
  const auto b = oracle::random_vector(6, 6);
  const auto x = lstsq_min_norm(to_dense(a), b);
  EXPECT_LT(oracle::rel_diff(x, oracle::lstsq_full_rank(a, b)), 1e-10);
  EXPECT_LT(oracle::rel_diff(oracle::matvec(a, x), b), 1e-12);
}

TEST(LstsqMinNorm, RankDeficientIsOrthogonalToNullSpace) {
  // a = L R with rank 4; the min-norm solution lies in range(R^T) and solves
  // the projected normal equations.
  const auto l = oracle::random_matrix(12, 4, 8);
  const auto r = oracle::random_matrix(4, 9, 9);
  const auto a = oracle::matmul(l, r);
  const auto b = oracle::random_vector(12, 10);
  const auto x = lstsq_min_norm(to_dense(a), b);
  // Reference: x = R^T (R R^T)^-1 (L^T L)^-1 L^T b
  const auto lt = oracle::transpose(l);
  const auto y = oracle::solve(oracle::matmul(lt, l), oracle::matvec(lt, b));
  const auto rt = oracle::transpose(r);
  const auto ref = oracle::matvec(rt, oracle::solve(oracle::matmul(r, rt), y));
  EXPECT_LT(oracle::rel_diff(x, ref), 1e-9);
}

TEST(LstsqMinNorm, ConsistentCirculantSystemIsSolvedExactly) {
  const ConvGeometry g{9, 9, 2, 3, 4, 1};
  const auto k = random_kernel(g, 12);
  const auto x = oracle::random_vector(g.input_size(), 13);
  const auto gz = oracle::random_vector(g.output_size(), 14);
  const auto u = DenseMatrix::vstack(weight_circulant(k, g), gradient_circulant(gz, g));
  const auto v = u.multiply(x);
  EXPECT_LT(oracle::rel_diff(lstsq_min_norm(u, v), x), 1e-10);
}

TEST(LstsqMinNorm, RejectsMismatchedRhs) {
  EXPECT_THROW(lstsq_min_norm(DenseMatrix::identity(3), Vector(2)), std::invalid_argument);
}

TEST(SparseRows, MatchesDense) {
  auto a = oracle::random_matrix(9, 6, 20);
  for (auto& row : a)
    for (std::size_t c = 0; c < row.size(); c += 2) row[c] = 0.0;
  const auto d = to_dense(a);
  const auto s = SparseRows::from_dense(d);
  EXPECT_EQ(s.nnz(), 9u * 3);
  const auto x = oracle::random_vector(6, 21);
  const auto y = oracle::random_vector(9, 22);
  EXPECT_LT(oracle::rel_diff(s.multiply(x), d.multiply(x)), 1e-15);
  EXPECT_LT(oracle::rel_diff(s.multiply_transposed(y), d.multiply_transposed(y)), 1e-15);
  const auto gram = s.gram();
  const auto ref = oracle::matmul(oracle::transpose(a), a);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(gram[i * 6 + j], ref[i][j], 1e-13);
  EXPECT_NEAR(s.frobenius_norm(), d.frobenius_norm(), 1e-13);
}

TEST(OrthonormalColumnBasis, SpansColumns) {
  const auto a = oracle::random_matrix(14, 5, 30);
  const auto q = orthonormal_column_basis(to_dense(a));
  const auto qtq = q.transposed().multiply(q);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(qtq(i, j), i == j ? 1.0 : 0.0, 1e-12);
  // Each column of a equals Q Q^T applied to it.
  for (std::size_t c = 0; c < 5; ++c) {
    Vector col(14);
    for (std::size_t r = 0; r < 14; ++r) col[r] = a[r][c];
    EXPECT_LT(oracle::rel_diff(q.multiply(q.multiply_transposed(col)), col), 1e-12);
  }
  EXPECT_THROW(orthonormal_column_basis(to_dense(oracle::random_matrix(3, 5, 1))), std::invalid_argument);
}
