#pragma once

// Row-stable matrix product for the forward pass. Every output element is a
// single fma chain over k in increasing order, whatever the row's position
// or the number of rows, so permuting input rows permutes output rows
// bit-exactly. Eigen's blocked GEMM does not promise that.

#include <cmath>
#include <cstddef>

#include <Eigen/Core>

namespace niab::detail {

using ConstRowRef = Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>, 0,
                               Eigen::OuterStride<>>;

template <int R, int T>
inline void gemm_tile(const double* x, std::size_t ldx, const double* w, std::size_t ldw, std::size_t k, double* y,
                      std::size_t ldy, std::size_t width) {
  double acc[R][T] = {};
  if (width == T) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* wr = w + kk * ldw;
      for (int r = 0; r < R; ++r) {
        const double xv = x[r * ldx + kk];
        for (int t = 0; t < T; ++t) acc[r][t] = std::fma(xv, wr[t], acc[r][t]);
      }
    }
  } else {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* wr = w + kk * ldw;
      for (int r = 0; r < R; ++r) {
        const double xv = x[r * ldx + kk];
        for (std::size_t t = 0; t < width; ++t) acc[r][t] = std::fma(xv, wr[t], acc[r][t]);
      }
    }
  }
  for (int r = 0; r < R; ++r) {
    for (std::size_t t = 0; t < width; ++t) y[r * ldy + t] = acc[r][t];
  }
}

// y (n × m, row-major, contiguous) = x (n × k) · w (k × m).
inline void gemm_rows(ConstRowRef x, ConstRowRef w, double* y) {
  constexpr int R = 4, T = 32;
  const auto n = static_cast<std::size_t>(x.rows()), k = static_cast<std::size_t>(x.cols());
  const auto m = static_cast<std::size_t>(w.cols());
  const auto ldx = static_cast<std::size_t>(x.outerStride()), ldw = static_cast<std::size_t>(w.outerStride());
  for (std::size_t j = 0; j < m; j += T) {
    const std::size_t width = std::min<std::size_t>(T, m - j);
    std::size_t i = 0;
    for (; i + R <= n; i += R) gemm_tile<R, T>(x.data() + i * ldx, ldx, w.data() + j, ldw, k, y + i * m + j, m, width);
    for (; i < n; ++i) gemm_tile<1, T>(x.data() + i * ldx, ldx, w.data() + j, ldw, k, y + i * m + j, m, width);
  }
}

}  // namespace niab::detail
