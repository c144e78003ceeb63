#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "milr/linalg.hpp"
#include "milr/rng.hpp"

using namespace milr;

namespace {

template <Scalar T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      T s = 0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  return c;
}

/// Direct evaluation of a valid/same convolution, loop order (fy, fx, z) per output.
template <Scalar T>
Tensor<T> naive_conv(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad, std::size_t g) {
  const std::size_t m = x.dim(0), f = w.dim(0), z = w.dim(2), y = w.dim(3);
  Tensor<T> out({g, g, y});
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < g; ++c)
      for (std::size_t o = 0; o < y; ++o) {
        T s = 0;
        for (std::size_t fy = 0; fy < f; ++fy)
          for (std::size_t fx = 0; fx < f; ++fx)
            for (std::size_t k = 0; k < z; ++k) {
              const long iy = static_cast<long>(r * stride + fy) - static_cast<long>(pad);
              const long ix = static_cast<long>(c * stride + fx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(m) || ix >= static_cast<long>(m)) continue;
              s += x.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), k) * w.at(fy, fx, k, o);
            }
        out.at(r, c, o) = s;
      }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
  Tensor<double> i2({2, 2}, {1, 0, 0, 1});
  Tensor<double> b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(matmul(i2, b), b);
}

TEST(Matmul, RowTimesColumn) {
  Tensor<float> a({1, 2}, {1, 2});
  Tensor<float> b({2, 1}, {3, 4});
  EXPECT_EQ(matmul(a, b)[0], 11.0f);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  auto a = Tensor<float>::random({5, 7}, rng);
  auto b = Tensor<float>::random({7, 3}, rng);
  EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
}

TEST(Matmul, AssociativeWithinTolerance) {
  Rng rng(11);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 1 + rng.next_below(8), n = 1 + rng.next_below(8), p = 1 + rng.next_below(8), q = 1 + rng.next_below(8);
    auto a = Tensor<double>::random({m, n}, rng);
    auto b = Tensor<double>::random({n, p}, rng);
    auto c = Tensor<double>::random({p, q}, rng);
    EXPECT_LE(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-10);
  }
}

TEST(Conv2d, ValidOutputSize) {
  Tensor<float> x({28, 28, 1});
  Tensor<float> w({3, 3, 1, 32});
  EXPECT_EQ(conv2d(x, w, 1, Padding::valid).shape(), (Shape{26, 26, 32}));
}

TEST(Conv2d, SameOutputSize) {
  Tensor<float> x({32, 32, 3});
  Tensor<float> w({3, 3, 3, 32});
  EXPECT_EQ(conv2d(x, w, 1, Padding::same).shape(), (Shape{32, 32, 32}));
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(5);
  auto x = Tensor<float>::random({6, 6, 1}, rng);
  Tensor<float> w({1, 1, 1, 1}, {1.0f});
  EXPECT_EQ(conv2d(x, w, 1, Padding::valid), x);
}

TEST(Conv2d, NonIntegralOutputThrows) {
  EXPECT_THROW(conv2d(Tensor<float>({6, 6, 1}), Tensor<float>({3, 3, 1, 1}), 2, Padding::valid), ShapeError);
}

TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(8);
  for (int t = 0; t < 30; ++t) {
    const std::size_t f = 1 + rng.next_below(3), m = f + rng.next_below(6), z = 1 + rng.next_below(3), y = 1 + rng.next_below(4);
    auto x = Tensor<double>::random({m, m, z}, rng);
    auto w = Tensor<double>::random({f, f, z, y}, rng);
    const auto got = conv2d(x, w, 1, Padding::valid);
    EXPECT_LE(max_abs_diff(got, naive_conv(x, w, 1, 0, m - f + 1)), 1e-12);
    const auto same = conv2d(x, w, 1, Padding::same);
    EXPECT_LE(max_abs_diff(same, naive_conv(x, w, 1, (f - 1) / 2, m)), 1e-12);
  }
}

TEST(Im2col, SingleFieldIsFlattenedInput) {
  Rng rng(1);
  auto x = Tensor<float>::random({3, 3, 1}, rng);
  const auto cols = im2col(x, 3, 1, Padding::valid);
  ASSERT_EQ(cols.shape(), (Shape{1, 9}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(cols[i], x[i]);
}

TEST(Im2col, ProductWithFilterIsConv) {
  Rng rng(2);
  auto x = Tensor<float>::random({4, 4, 1}, rng);
  auto w = Tensor<float>::random({3, 3, 1, 1}, rng);
  const auto cols = im2col(x, 3, 1, Padding::valid);
  ASSERT_EQ(cols.shape(), (Shape{4, 9}));
  const auto prod = matmul(cols, w.reshaped({9, 1}));
  EXPECT_EQ(prod.reshaped({2, 2, 1}), conv2d(x, w, 1, Padding::valid));
}

TEST(Im2col, SamePaddingFillsZeros) {
  Tensor<float> x({2, 2, 1}, {1, 2, 3, 4});
  const auto cols = im2col(x, 3, 1, Padding::same);
  ASSERT_EQ(cols.shape(), (Shape{4, 9}));
  // Output (0,0) sees rows -1..1 and cols -1..1: the whole top row and left column are padding.
  const float row0[9] = {0, 0, 0, 0, 1, 2, 0, 3, 4};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(cols.at(0, i), row0[i]);
}

TEST(Im2col, ConvEqualsMatmulOfIm2colProperty) {
  Rng rng(21);
  for (int t = 0; t < 300; ++t) {
    const std::size_t f = 1 + rng.next_below(3), m = f + rng.next_below(9 - f), z = 1 + rng.next_below(3), y = 1 + rng.next_below(4);
    const Padding pad = rng.next_below(2) ? Padding::same : Padding::valid;
    auto x = Tensor<float>::random({m, m, z}, rng);
    auto w = Tensor<float>::random({f, f, z, y}, rng);
    const auto conv = conv2d(x, w, 1, pad);
    const auto prod = matmul(im2col(x, f, 1, pad), w.reshaped({f * f * z, y}));
    ASSERT_EQ(prod.reshaped(conv.shape()), conv) << "M=" << m << " F=" << f << " Z=" << z << " Y=" << y;
  }
}

TEST(LeastSquares, IdentitySystem) {
  Tensor<double> a({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<double> c({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_LE(max_abs_diff(solve_least_squares(a, c), c), 0.0);
}

TEST(LeastSquares, OverdeterminedRecoversConstruction) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    auto a = Tensor<double>::random({8, 4}, rng);
    auto x0 = Tensor<double>::random({4, 3}, rng);
    const auto x = solve_least_squares(a, naive_matmul(a, x0), true);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], x0[i], 1e-8 * std::max(1.0, std::abs(x0[i])));
  }
}

TEST(LeastSquares, BadlyScaledSquareSystemIsFullRank) {
  // row 7 scaled by 2^100, column 3 by 2^-100 (and x[3] by 2^100 so it still matters):
  // singular-looking to an unscaled LU, well posed after scaling
  Rng rng(6);
  auto a = Tensor<double>::random({40, 40}, rng);
  for (std::size_t j = 0; j < 40; ++j) a.at(7, j) *= 0x1p100;
  for (std::size_t i = 0; i < 40; ++i) a.at(i, 3) *= 0x1p-100;
  auto x0 = Tensor<double>::random({40, 1}, rng);
  x0[3] *= 0x1p100;
  const auto s = least_squares(a, naive_matmul(a, x0));
  EXPECT_FALSE(s.rank_deficient);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_NEAR(s.x[i], x0[i], 1e-8 * std::abs(x0[i])) << i;
}

TEST(LeastSquares, UnderdeterminedBeatsRandomCandidates) {
  Rng rng(6);
  auto a = Tensor<double>::random({2, 4}, rng);
  auto c = Tensor<double>::random({2, 1}, rng);
  const auto x = solve_least_squares(a, c);
  auto residual = [&](const Tensor<double>& cand) {
    const auto r = naive_matmul(a, cand);
    double s = 0;
    for (std::size_t i = 0; i < r.size(); ++i) s += (r[i] - c[i]) * (r[i] - c[i]);
    return s;
  };
  const double best = residual(x);
  for (int k = 0; k < 1000; ++k) EXPECT_LE(best, residual(Tensor<double>::random({4, 1}, rng, 3.0)) + 1e-15);
}

TEST(LeastSquares, MinimumNormForUnderdetermined) {
  // x1 + x2 = 2: the minimum-norm solution is (1, 1).
  Tensor<double> a({1, 2}, {1, 1});
  Tensor<double> c({1, 1}, {2});
  const auto x = solve_least_squares(a, c);
  EXPECT_NEAR(x[0], 1.0, 1e-12);
  EXPECT_NEAR(x[1], 1.0, 1e-12);
}

TEST(LeastSquares, RankDeficientThrowsWhenFullRankRequired) {
  Tensor<double> a({3, 2}, {1, 2, 2, 4, 3, 6});
  Tensor<double> c({3, 1}, {1, 2, 3});
  EXPECT_THROW(solve_least_squares(a, c, true), SingularSystemError);
  EXPECT_NO_THROW(solve_least_squares(a, c, false));
  EXPECT_EQ(matrix_rank(a), 1u);
}

TEST(LeastSquares, SquareSingularStaysSingularAfterScaling) {
  Rng rng(7);
  auto a = Tensor<double>::random({6, 6}, rng);
  for (std::size_t j = 0; j < 6; ++j) a.at(5, j) = a.at(0, j) + a.at(1, j);
  const Tensor<double> c({6, 1});
  EXPECT_THROW(solve_least_squares(a, c, true), SingularSystemError);
  for (std::size_t j = 0; j < 6; ++j) a.at(2, j) *= 0x1p90;
  EXPECT_THROW(solve_least_squares(a, c, true), SingularSystemError);
}

TEST(LeastSquares, NonFiniteInputThrows) {
  Tensor<double> a({2, 2}, {1, 0, 0, 1});
  Tensor<double> c({2, 1}, {NAN, 1});
  EXPECT_THROW(solve_least_squares(a, c), SingularSystemError);
}

TEST(AccurateMatmul, MatchesLongDoubleReference) {
  Rng rng(9);
  auto a = Tensor<double>::random({17, 300}, rng);
  auto b = Tensor<double>::random({300, 5}, rng);
  const auto got = accurate_matmul(a, b);
  for (std::size_t i = 0; i < 17; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < 300; ++k) s += static_cast<long double>(a.at(i, k)) * b.at(k, j);
      EXPECT_LE(std::abs(static_cast<long double>(got.at(i, j)) - s), 1e-15L * std::abs(s) + 1e-300L);
    }
}

TEST(Rng, SplitMix64ReferenceValue) {
  // First SplitMix64 output from state 0 (reference implementation by Vigna).
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(std::bit_cast<std::uint64_t>(rng_next_unit(a)), std::bit_cast<std::uint64_t>(rng_next_unit(b)));
}

TEST(Rng, AdjacentSeedsDiffer) {
  Rng a(77), b(78);
  bool differ = false;
  for (int i = 0; i < 10; ++i) differ = differ || rng_next_unit(a) != rng_next_unit(b);
  EXPECT_TRUE(differ);
}

TEST(Rng, UnitRangeAndMean) {
  Rng r(99);
  double sum = 0;
  for (int i = 0; i < 100000; ++i) {
    const double v = r.next_unit();
    ASSERT_GE(v, -1.0);
    ASSERT_LT(v, 1.0);
    sum += v;
  }
  EXPECT_LE(std::abs(sum / 100000), 0.05);
}
