#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "milr/errors.hpp"
#include "milr/tensor.hpp"

namespace milr {

enum class Padding : std::uint8_t { valid = 0, same = 1 };

/// Output-size bookkeeping for a square convolution, G = ((M - F + 2P) / S) + 1.
struct ConvGeometry {
  std::size_t input = 0;
  std::size_t filter = 0;
  std::size_t stride = 1;
  std::size_t pad_before = 0;
  std::size_t output = 0;
};

inline ConvGeometry conv_geometry(std::size_t input, std::size_t filter, std::size_t stride, Padding padding) {
  if (stride == 0) throw ShapeError("convolution stride must be >= 1");
  if (filter == 0) throw ShapeError("convolution filter size must be >= 1");
  ConvGeometry g{input, filter, stride, 0, 0};
  if (padding == Padding::valid) {
    if (filter > input) {
      throw ShapeError("filter " + std::to_string(filter) + " larger than input " + std::to_string(input));
    }
    if ((input - filter) % stride != 0) {
      throw ShapeError("non-integral convolution output size for M=" + std::to_string(input) +
                       " F=" + std::to_string(filter) + " S=" + std::to_string(stride));
    }
    g.output = (input - filter) / stride + 1;
  } else {
    g.output = (input + stride - 1) / stride;
    const std::size_t span = (g.output - 1) * stride + filter;
    g.pad_before = span > input ? (span - input) / 2 : 0;
  }
  return g;
}

/// c[i,j] = sum_k a[i,k] * b[k,j], k ascending, accumulated in T.
template <Scalar T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  if (b.dim(0) != n) {
    throw DimensionError("matmul inner dimension mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> c({m, p});
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* cd = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = cd + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = ad[i * n + k];
      const T* brow = bd + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

namespace detail {

inline void check_conv_operands(const Shape& in, const Shape& filt) {
  if (in.size() != 3) throw DimensionError("conv input must be (M,M,Z), got " + shape_string(in));
  if (in[0] != in[1]) throw DimensionError("conv input must be square, got " + shape_string(in));
  if (filt.size() != 4 || filt[0] != filt[1]) {
    throw DimensionError("conv filters must be (F,F,Z,Y), got " + shape_string(filt));
  }
  if (filt[2] != in[2]) {
    throw DimensionError("filter channels " + std::to_string(filt[2]) + " != input channels " +
                         std::to_string(in[2]));
  }
}

}  // namespace detail

/// Out[i,j,k] = sum_{f1,f2,z} Filter[f1,f2,z,k] * In[i*S+f1-pad, j*S+f2-pad, z], zero outside the input.
/// Terms are summed in (f1, f2, z) order, which is the column order of im2col.
template <Scalar T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& filters, std::size_t stride, Padding padding) {
  detail::check_conv_operands(input.shape(), filters.shape());
  const std::size_t m = input.dim(0), z_count = input.dim(2);
  const std::size_t f = filters.dim(0), y_count = filters.dim(3);
  const ConvGeometry g = conv_geometry(m, f, stride, padding);
  Tensor<T> out({g.output, g.output, y_count});
  const T* in = input.data().data();
  const T* w = filters.data().data();
  T* o = out.data().data();
  for (std::size_t oi = 0; oi < g.output; ++oi) {
    for (std::size_t oj = 0; oj < g.output; ++oj) {
      T* acc = o + (oi * g.output + oj) * y_count;
      for (std::size_t f1 = 0; f1 < f; ++f1) {
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oi * stride + f1) - static_cast<std::ptrdiff_t>(g.pad_before);
        for (std::size_t f2 = 0; f2 < f; ++f2) {
          const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(oj * stride + f2) - static_cast<std::ptrdiff_t>(g.pad_before);
          const bool inside = r >= 0 && c >= 0 && r < static_cast<std::ptrdiff_t>(m) && c < static_cast<std::ptrdiff_t>(m);
          for (std::size_t z = 0; z < z_count; ++z) {
            const T v = inside ? in[(static_cast<std::size_t>(r) * m + static_cast<std::size_t>(c)) * z_count + z] : T{0};
            const T* wrow = w + ((f1 * f + f2) * z_count + z) * y_count;
            for (std::size_t y = 0; y < y_count; ++y) acc[y] += v * wrow[y];
          }
        }
      }
    }
  }
  return out;
}

/// Row r = flattened (f1, f2, z) receptive field of output position r = i*G + j.
template <Scalar T>
Tensor<T> im2col(const Tensor<T>& input, std::size_t filter, std::size_t stride, Padding padding) {
  if (input.rank() != 3 || input.dim(0) != input.dim(1)) {
    throw DimensionError("im2col input must be (M,M,Z), got " + shape_string(input.shape()));
  }
  const std::size_t m = input.dim(0), z_count = input.dim(2);
  const ConvGeometry g = conv_geometry(m, filter, stride, padding);
  const std::size_t cols = filter * filter * z_count;
  Tensor<T> out({g.output * g.output, cols});
  for (std::size_t oi = 0; oi < g.output; ++oi) {
    for (std::size_t oj = 0; oj < g.output; ++oj) {
      T* row = out.data().data() + (oi * g.output + oj) * cols;
      for (std::size_t f1 = 0; f1 < filter; ++f1) {
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oi * stride + f1) - static_cast<std::ptrdiff_t>(g.pad_before);
        for (std::size_t f2 = 0; f2 < filter; ++f2) {
          const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(oj * stride + f2) - static_cast<std::ptrdiff_t>(g.pad_before);
          const bool inside = r >= 0 && c >= 0 && r < static_cast<std::ptrdiff_t>(m) && c < static_cast<std::ptrdiff_t>(m);
          for (std::size_t z = 0; z < z_count; ++z) {
            row[(f1 * filter + f2) * z_count + z] =
                inside ? input.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), z) : T{0};
          }
        }
      }
    }
  }
  return out;
}

/// Inverse of im2col: every input cell is the mean of all receptive-field rows that cover it.
/// Padded cells are dropped. Throws ShapeError if some input cell is covered by no row.
template <Scalar T>
Tensor<T> col2im_average(const Tensor<T>& patches, std::size_t input_size, std::size_t channels,
                         std::size_t filter, std::size_t stride, Padding padding) {
  const ConvGeometry g = conv_geometry(input_size, filter, stride, padding);
  const std::size_t cols = filter * filter * channels;
  if (patches.rank() != 2 || patches.dim(0) != g.output * g.output || patches.dim(1) != cols) {
    throw DimensionError("col2im patch matrix has shape " + shape_string(patches.shape()));
  }
  Tensor<T> sum({input_size, input_size, channels});
  std::vector<std::size_t> count(input_size * input_size, 0);
  for (std::size_t oi = 0; oi < g.output; ++oi) {
    for (std::size_t oj = 0; oj < g.output; ++oj) {
      const T* row = patches.data().data() + (oi * g.output + oj) * cols;
      for (std::size_t f1 = 0; f1 < filter; ++f1) {
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(oi * stride + f1) - static_cast<std::ptrdiff_t>(g.pad_before);
        if (r < 0 || r >= static_cast<std::ptrdiff_t>(input_size)) continue;
        for (std::size_t f2 = 0; f2 < filter; ++f2) {
          const std::ptrdiff_t c = static_cast<std::ptrdiff_t>(oj * stride + f2) - static_cast<std::ptrdiff_t>(g.pad_before);
          if (c < 0 || c >= static_cast<std::ptrdiff_t>(input_size)) continue;
          const auto ur = static_cast<std::size_t>(r), uc = static_cast<std::size_t>(c);
          ++count[ur * input_size + uc];
          for (std::size_t z = 0; z < channels; ++z) sum.at(ur, uc, z) += row[(f1 * filter + f2) * channels + z];
        }
      }
    }
  }
  for (std::size_t p = 0; p < count.size(); ++p) {
    if (count[p] == 0) throw ShapeError("input cell not covered by any receptive field; conv is not invertible");
    for (std::size_t z = 0; z < channels; ++z) sum.data()[p * channels + z] /= static_cast<T>(count[p]);
  }
  return sum;
}

/// sigma_min / sigma_max below this is treated as singular.
inline constexpr double kRankTolerance = 1e-10;

struct LeastSquaresSolution {
  Tensor<double> x;
  std::size_t rank = 0;
  bool rank_deficient = false;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Tensor<double> to_tensor(const Eigen::MatrixXd& m) {
  Tensor<double> t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<RowMatrix>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

inline Eigen::Map<const RowMatrix> as_matrix(const Tensor<double>& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}

/// Splits m into slices whose entries, per row (or per column), are integer multiples of a
/// power-of-two unit with at most `bits` significant bits. m == sum of slices + remainder.
inline std::vector<RowMatrix> split_slices(const RowMatrix& m, int bits, int count, bool by_row) {
  std::vector<RowMatrix> out;
  RowMatrix rest = m;
  const Eigen::Index lines = by_row ? m.rows() : m.cols();
  std::vector<int> expo(static_cast<std::size_t>(lines));
  for (Eigen::Index l = 0; l < lines; ++l) {
    const double mx = by_row ? rest.row(l).cwiseAbs().maxCoeff() : rest.col(l).cwiseAbs().maxCoeff();
    expo[static_cast<std::size_t>(l)] = mx > 0 ? std::ilogb(mx) + 1 : 0;
  }
  std::vector<double> unit(expo.size()), inv(expo.size());
  for (int s = 0; s < count; ++s) {
    for (std::size_t l = 0; l < expo.size(); ++l) {
      unit[l] = std::ldexp(1.0, expo[l] - bits * (s + 1));
      inv[l] = std::ldexp(1.0, bits * (s + 1) - expo[l]);
    }
    RowMatrix slice(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const std::size_t l = static_cast<std::size_t>(by_row ? i : j);
        const double v = std::nearbyint(rest(i, j) * inv[l]) * unit[l];
        slice(i, j) = v;
        rest(i, j) -= v;
      }
    out.push_back(std::move(slice));
  }
  return out;
}

inline void two_sum_add(double& hi, double& lo, double v) {
  const double s = hi + v;
  const double bp = s - hi;
  const double err = (hi - (s - bp)) + (v - bp);
  hi = s;
  lo += err;
}

/// hi + lo += sign * a * b, with every slice product formed exactly by a plain GEMM.
inline void accumulate_product(RowMatrix& hi, RowMatrix& lo, const RowMatrix& a, const std::vector<RowMatrix>& b_slices,
                               int bits, double sign) {
  constexpr int kOrders = 4;
  const auto a_slices = split_slices(a, bits, 3, true);
  RowMatrix p;
  for (int k = kOrders - 1; k >= 0; --k) {
    for (int s = 0; s <= k && s < static_cast<int>(a_slices.size()); ++s) {
      const int t = k - s;
      if (t >= static_cast<int>(b_slices.size())) continue;
      p.noalias() = a_slices[static_cast<std::size_t>(s)] * b_slices[static_cast<std::size_t>(t)];
      for (Eigen::Index i = 0; i < p.size(); ++i) two_sum_add(hi.data()[i], lo.data()[i], sign * p.data()[i]);
    }
  }
}

inline int slice_bits(std::size_t inner) {
  const int log_n = static_cast<int>(std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(inner, 2)))));
  return std::max(1, (52 - log_n) / 2);
}

/// c - a*b evaluated (a rows in chunks) with error far below one f64 rounding of the result.
inline RowMatrix accurate_residual(const Eigen::Ref<const RowMatrix>& c, const Eigen::Ref<const RowMatrix>& a,
                                   const Eigen::Ref<const RowMatrix>& b, bool has_c = true) {
  const int bits = slice_bits(static_cast<std::size_t>(a.cols()));
  const auto b_slices = split_slices(b, bits, 4, false);
  RowMatrix out(a.rows(), b.cols());
  constexpr Eigen::Index kChunk = 512;
  for (Eigen::Index r0 = 0; r0 < a.rows(); r0 += kChunk) {
    const Eigen::Index m = std::min(kChunk, a.rows() - r0);
    RowMatrix hi = has_c ? RowMatrix(c.middleRows(r0, m)) : RowMatrix::Zero(m, b.cols());
    RowMatrix lo = RowMatrix::Zero(m, b.cols());
    accumulate_product(hi, lo, a.middleRows(r0, m), b_slices, bits, -1.0);
    out.middleRows(r0, m) = hi + lo;
  }
  return out;
}

}  // namespace detail

/// a*b rounded once: far more accurate than matmul for long inner dimensions.
inline Tensor<double> accurate_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("accurate_matmul shape mismatch: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const auto am = detail::as_matrix(a);
  const auto bm = detail::as_matrix(b);
  detail::RowMatrix r = -detail::accurate_residual(detail::RowMatrix(), am, bm, false);
  Tensor<double> t({a.dim(0), b.dim(1)});
  Eigen::Map<detail::RowMatrix>(t.data().data(), r.rows(), r.cols()) = r;
  return t;
}

/// Factorization reused for several right-hand sides (and refinement steps).
/// Square systems use partial-pivot LU; tall systems are reduced with Householder QR first;
/// wide or ill-conditioned systems fall back to a thresholded SVD (minimum-norm solution).
class LeastSquaresFactor {
 public:
  explicit LeastSquaresFactor(const Eigen::Ref<const detail::RowMatrix>& a) : rows_(a.rows()), cols_(a.cols()) {
    if (!a.allFinite()) throw SingularSystemError("linear system contains non-finite values");
    if (rows_ > cols_) {
      qr_.compute(a);
      Eigen::MatrixXd r = qr_.matrixQR().topRows(cols_).triangularView<Eigen::Upper>();
      factor_square(r, false);
      if (use_svd_) svd_.compute(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
      tall_ = !use_svd_;
    } else if (rows_ == cols_) {
      factor_square(a, true);
      if (use_svd_) svd_.compute(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    } else {
      use_svd_ = true;
      svd_.compute(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    }
    if (use_svd_) {
      svd_.setThreshold(kRankTolerance);
      rank_ = static_cast<std::size_t>(svd_.rank());
    } else {
      rank_ = static_cast<std::size_t>(cols_);
    }
  }

  Eigen::MatrixXd solve(const Eigen::Ref<const Eigen::MatrixXd>& c) const {
    if (use_svd_) return svd_.solve(c);
    if (tall_) {
      Eigen::MatrixXd qtc = qr_.householderQ().adjoint() * c;
      return lu_solve(qtc.topRows(cols_));
    }
    return lu_solve(c);
  }

  std::size_t rank() const noexcept { return rank_; }
  bool rank_deficient() const noexcept { return rank_ < static_cast<std::size_t>(std::min(rows_, cols_)); }

 private:
  // A few huge entries (flipped exponent bits) make a system badly scaled rather than
  // singular; retry LU on a power-of-two equilibrated copy before paying for an SVD.
  // Not for the R of a QR: scaling would blow its rounding-noise rows up into data.
  void factor_square(const Eigen::Ref<const Eigen::MatrixXd>& a, bool equilibrate) {
    lu_.compute(a);
    use_svd_ = !(lu_.rcond() > kRankTolerance);
    if (!use_svd_ || !equilibrate) return;
    const auto pow2 = [](double m) { return m > 0.0 && std::isfinite(m) ? std::exp2(-std::round(std::log2(m))) : 1.0; };
    row_scale_ = a.rowwise().lpNorm<Eigen::Infinity>().unaryExpr(pow2);
    col_scale_ = (row_scale_.asDiagonal() * a).colwise().lpNorm<Eigen::Infinity>().transpose().unaryExpr(pow2);
    lu_.compute(row_scale_.asDiagonal() * a * col_scale_.asDiagonal());
    use_svd_ = !(lu_.rcond() > kRankTolerance);
    scaled_ = !use_svd_;
  }

  Eigen::MatrixXd lu_solve(const Eigen::Ref<const Eigen::MatrixXd>& c) const {
    if (!scaled_) return lu_.solve(c);
    return col_scale_.asDiagonal() * lu_.solve(row_scale_.asDiagonal() * c);
  }

  Eigen::Index rows_, cols_;
  bool use_svd_ = false;
  bool tall_ = false;
  bool scaled_ = false;
  Eigen::VectorXd row_scale_, col_scale_;
  std::size_t rank_ = 0;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr_;
  Eigen::BDCSVD<Eigen::MatrixXd> svd_;
};

/// Minimum-norm least-squares X minimizing ||a X - c||, computed in f64. Each refinement step
/// solves for the correction against a residual evaluated with accurate_residual.
inline LeastSquaresSolution least_squares(const Tensor<double>& a, const Tensor<double>& c, int refine_steps = 0) {
  if (a.rank() != 2 || c.rank() != 2) throw DimensionError("least squares expects rank-2 operands");
  if (a.dim(0) != c.dim(0)) {
    throw DimensionError("least squares row mismatch: " + shape_string(a.shape()) + " vs " + shape_string(c.shape()));
  }
  const auto am = detail::as_matrix(a);
  const auto cm = detail::as_matrix(c);
  if (!cm.allFinite()) throw SingularSystemError("linear system contains non-finite values");
  const LeastSquaresFactor factor(am);
  Eigen::MatrixXd x = factor.solve(cm);
  for (int step = 0; step < refine_steps; ++step) {
    const detail::RowMatrix xr = x;
    const Eigen::MatrixXd r = detail::accurate_residual(cm, am, xr);
    x += factor.solve(r);
  }
  if (!x.allFinite()) throw SingularSystemError("least-squares solution is not finite");
  return {detail::to_tensor(x), factor.rank(), factor.rank_deficient()};
}

/// Least-squares solve. With require_full_rank the call throws SingularSystemError instead of
/// returning a minimum-norm solution of a rank-deficient system.
inline Tensor<double> solve_least_squares(const Tensor<double>& a, const Tensor<double>& c,
                                          bool require_full_rank = false) {
  LeastSquaresSolution s = least_squares(a, c);
  if (require_full_rank && s.rank_deficient) {
    throw SingularSystemError("system is rank deficient (rank " + std::to_string(s.rank) + " of " +
                              std::to_string(std::min(a.dim(0), a.dim(1))) + ")");
  }
  return std::move(s.x);
}

/// Numerical rank with the same sigma_min / sigma_max threshold as the solvers.
inline std::size_t matrix_rank(const Tensor<double>& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(detail::as_matrix(a));
  svd.setThreshold(kRankTolerance);
  return static_cast<std::size_t>(svd.rank());
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2");
  Tensor<T> t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

/// Rounds every value to the nearest representable value of `dtype` (no-op for f64).
inline void round_to_dtype(Tensor<double>& t, DType dtype) {
  if (dtype == DType::f64) return;
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

template <Scalar T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace milr
