#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flame/numerics.hpp"
#include "flame/random.hpp"

using namespace flame;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = rng.normal(0.0, sd);
  return m;
}

// Reference product, independent of matmul's loop order.
Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  return out;
}

double orthonormality_error_cols(const Matrix& u) {
  double worst = 0.0;
  for (std::size_t p = 0; p < u.cols(); ++p)
    for (std::size_t q = 0; q < u.cols(); ++q) {
      double d = 0.0;
      for (std::size_t i = 0; i < u.rows(); ++i) d += u(i, p) * u(i, q);
      worst = std::max(worst, std::abs(d - (p == q ? 1.0 : 0.0)));
    }
  return worst;
}

Matrix reconstruct(const SvdResult& s) {
  Matrix us = s.u;
  for (std::size_t i = 0; i < us.rows(); ++i)
    for (std::size_t k = 0; k < us.cols(); ++k) us(i, k) *= s.singular_values[k];
  return matmul(us, s.vt);
}

}  // namespace

// --- matmul ----------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m{{1, 2}, {3, 4}};
  EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, RowTimesColumn) {
  const Matrix r = matmul(Matrix{{1, 2}}, Matrix{{3}, {4}});
  ASSERT_EQ(r.rows(), 1u);
  ASSERT_EQ(r.cols(), 1u);
  EXPECT_EQ(r(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(7);
  const Matrix a = random_matrix(5, 4, rng);
  const Matrix b = random_matrix(4, 3, rng);
  const Matrix got = matmul(a, b);
  const Matrix want = naive_product(a, b);
  ASSERT_EQ(got.rows(), 5u);
  ASSERT_EQ(got.cols(), 3u);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.data()[i], want.data()[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
  }
}

TEST(Matmul, AssociativityOnRandomTriples) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 1 + rng.below(6), q = 1 + rng.below(6), r = 1 + rng.below(6), s = 1 + rng.below(6);
    const Matrix a = random_matrix(p, q, rng), b = random_matrix(q, r, rng), c = random_matrix(r, s, rng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    const double scale_ref = std::max(frobenius_norm(left), 1e-300);
    EXPECT_LE(frobenius_distance(left, right) / scale_ref, 1e-9);
  }
}

// --- softmax ---------------------------------------------------------------

TEST(Softmax, SymmetricInput) {
  const Vector p = softmax(Vector{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
  const Vector p = softmax(Vector{1000.0, 1000.0, 1000.0});
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, DirectExpSumValues) {
  const Vector p = softmax(Vector{1.0, 3.0, 2.0});
  const double z = std::exp(1.0) + std::exp(3.0) + std::exp(2.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(p[0], 0.0900, 1e-4);
  EXPECT_NEAR(p[1], 0.6652, 1e-4);
  EXPECT_NEAR(p[2], 0.2447, 1e-4);
}

TEST(Softmax, EmptyIsDomainError) { EXPECT_THROW(softmax(Vector{}), DomainError); }

TEST(Softmax, SumsToOneAcrossMagnitudes) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    const double mag = std::pow(10.0, -3.0 + 9.0 * rng.uniform());  // up to 1e6
    Vector v(n);
    for (auto& x : v) x = (2.0 * rng.uniform() - 1.0) * mag;
    const Vector p = softmax(v);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    EXPECT_NEAR(total, 1.0, 1e-12);
    for (double x : p) EXPECT_GE(x, 0.0);
  }
}

// --- topk ------------------------------------------------------------------

TEST(TopK, HandCheckable) { EXPECT_EQ(topk_indices(Vector{1, 3, 2}, 2), (std::vector<std::size_t>{1, 2})); }

TEST(TopK, TieBreaksToLowestIndex) { EXPECT_EQ(topk_indices(Vector{5, 5, 0}, 1), (std::vector<std::size_t>{0})); }

TEST(TopK, OutOfRangeKIsDomainError) {
  EXPECT_THROW(topk_indices(Vector{1, 2}, 0), DomainError);
  EXPECT_THROW(topk_indices(Vector{1, 2}, 3), DomainError);
}

TEST(TopK, MatchesFullSortOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Vector v(16);
    // Coarse values force ties regularly.
    for (auto& x : v) x = static_cast<double>(rng.below(6));
    const std::size_t k = 1 + rng.below(16);
    std::vector<std::size_t> order(16);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<long>(k));
    std::sort(want.begin(), want.end());
    const auto got = topk_indices(v, k);
    EXPECT_EQ(got, want);

    double min_sel = 1e300, max_unsel = -1e300;
    for (std::size_t i = 0; i < 16; ++i) {
      if (std::find(got.begin(), got.end(), i) != got.end()) min_sel = std::min(min_sel, v[i]);
      else max_unsel = std::max(max_unsel, v[i]);
    }
    if (k < 16) {
      EXPECT_GE(min_sel, max_unsel);
    }
  }
}

// --- SVD -------------------------------------------------------------------

TEST(Svd, FactorsAreOrthonormalAndReconstruct) {
  Rng rng(21);
  for (auto [r, c] : {std::pair{6, 4}, std::pair{4, 6}, std::pair{5, 5}, std::pair{1, 3}, std::pair{7, 1}}) {
    const Matrix m = random_matrix(r, c, rng);
    const SvdResult s = svd(m);
    EXPECT_LE(orthonormality_error_cols(s.u), 1e-8);
    EXPECT_LE(orthonormality_error_cols(transpose(s.vt)), 1e-8);
    EXPECT_TRUE(std::is_sorted(s.singular_values.rbegin(), s.singular_values.rend()));
    EXPECT_LE(frobenius_distance(reconstruct(s), m), 1e-6);
  }
}

TEST(Svd, RankDeficientInputStillHasOrthonormalU) {
  const Matrix m{{1, 2}, {2, 4}, {3, 6}};
  const SvdResult s = svd(m);
  EXPECT_NEAR(s.singular_values[1], 0.0, 1e-12);
  EXPECT_LE(orthonormality_error_cols(s.u), 1e-8);
  EXPECT_LE(frobenius_distance(reconstruct(s), m), 1e-10);
}

TEST(Svd, ZeroMatrix) {
  const SvdResult s = svd(Matrix(3, 2));
  EXPECT_EQ(s.singular_values, (std::vector<double>{0.0, 0.0}));
  EXPECT_LE(orthonormality_error_cols(s.u), 1e-12);
}

TEST(SvdTruncate, RankOneInputIsExact) {
  const Matrix m{{1, 2}, {2, 4}};
  const auto f = svd_truncate(m, 1);
  EXPECT_LT(frobenius_distance(matmul(f.left, f.right), m), 1e-10);
}

TEST(SvdTruncate, DiagonalDropsSmallerValue) {
  const Matrix m{{3, 0}, {0, 1}};
  const auto f = svd_truncate(m, 1);
  const Matrix approx = matmul(f.left, f.right);
  EXPECT_NEAR(approx(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(approx(1, 1), 0.0, 1e-12);
  EXPECT_NEAR(frobenius_distance(approx, m), 1.0, 1e-12);
}

TEST(SvdTruncate, RankOutOfRange) {
  EXPECT_THROW(svd_truncate(Matrix(3, 2, 1.0), 0), DomainError);
  EXPECT_THROW(svd_truncate(Matrix(3, 2, 1.0), 3), DomainError);
}

TEST(SvdTruncate, FullRankReconstructs) {
  Rng rng(8);
  const Matrix m = random_matrix(5, 3, rng);
  const auto f = svd_truncate(m, 3);
  EXPECT_LE(frobenius_distance(matmul(f.left, f.right), m), 1e-8);
}

TEST(SvdTruncate, EckartYoungErrorMatchesDroppedSpectrum) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix m = random_matrix(6, 4, rng);
    const SvdResult s = svd(m);
    for (std::size_t rank = 1; rank <= 4; ++rank) {
      double dropped = 0.0;
      for (std::size_t k = rank; k < s.singular_values.size(); ++k) dropped += s.singular_values[k] * s.singular_values[k];
      const auto f = svd_truncate(m, rank);
      EXPECT_NEAR(frobenius_distance(matmul(f.left, f.right), m), std::sqrt(dropped), 1e-8);
    }
  }
}

TEST(SvdTruncate, BeatsRandomSameRankFactorizations) {
  Rng rng(17);
  const Matrix m = random_matrix(6, 4, rng);
  const auto f = svd_truncate(m, 2);
  const double best = frobenius_distance(matmul(f.left, f.right), m);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix l = random_matrix(6, 2, rng), r = random_matrix(2, 4, rng);
    EXPECT_LE(best, frobenius_distance(matmul(l, r), m));
  }
}

// --- Adam ------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameter) {
  Rng rng(1);
  const Matrix p = random_matrix(3, 2, rng);
  const AdamState st = AdamState::for_param(p);
  const AdamStep out = adam_step(p, Matrix(3, 2), st);
  EXPECT_EQ(out.param, p);
  EXPECT_EQ(out.state.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  const Matrix p(1, 1, 0.5);
  const AdamState st = AdamState::for_param(p);
  const AdamStep out = adam_step(p, Matrix(1, 1, 1.0), st);
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(0.5 - out.param(0, 0), st.lr / (1.0 + st.eps), 1e-16);
  EXPECT_NEAR(0.5 - out.param(0, 0), 1.5e-4, 1e-11);
}

TEST(Adam, PureAndDeterministic) {
  Rng rng(2);
  const Matrix p = random_matrix(2, 2, rng), g = random_matrix(2, 2, rng);
  const AdamState st = AdamState::for_param(p, 1e-2);
  const AdamStep once = adam_step(p, g, st);
  const AdamStep twice = adam_step(p, g, st);
  EXPECT_EQ(once.param, twice.param);
  EXPECT_EQ(once.state.first_moment, twice.state.first_moment);
  EXPECT_EQ(st.step_count, 0u);

  const AdamStep chained = adam_step(once.param, g, once.state);
  const AdamState replay = once.state;
  const AdamStep replayed = adam_step(once.param, g, replay);
  EXPECT_EQ(chained.param, replayed.param);
  EXPECT_EQ(chained.state.step_count, 2u);
}

TEST(Adam, ShapeMismatch) {
  const Matrix p(2, 2);
  EXPECT_THROW(adam_step(p, Matrix(2, 3), AdamState::for_param(p)), DimensionError);
}

// --- Rng -------------------------------------------------------------------

TEST(Rng, SameSeedSameStream) {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(a.next_u64(), b.next_u64());
    EXPECT_EQ(a.normal(), b.normal());
    EXPECT_EQ(a.gamma(0.5), b.gamma(0.5));
  }
}

TEST(Rng, GammaMeanMatchesShape) {
  Rng rng(4);
  for (double shape : {0.5, 1.0, 5.0}) {
    double acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += rng.gamma(shape);
    EXPECT_NEAR(acc / n, shape, 0.05 * std::max(1.0, shape));
  }
}

TEST(Rng, BelowStaysInRange) {
  Rng rng(6);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 7000; ++i) ++hist[rng.below(7)];
  for (int h : hist) EXPECT_GT(h, 800);
}
