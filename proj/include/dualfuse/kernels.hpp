#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace dualfuse::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (m x n) [+]= op(A) * op(B), all buffers row-major.
/// op(A) is m x k; A is stored k x m when `trans_a`. Likewise for B.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b,
          bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  Eigen::Map<RowMat<T>> cm(c, mi, ni);
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  const Map am(a, trans_a ? ki : mi, trans_a ? mi : ki);
  const Map bm(b, trans_b ? ni : ki, trans_b ? ki : ni);
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

}  // namespace dualfuse::kernels
