#ifndef TLAB_GEMM_HPP_
#define TLAB_GEMM_HPP_

#include <cstddef>

namespace tlab::gemm {

// Row-major C[m x n] = alpha * op(A) * op(B) + beta * C, where op transposes
// when the corresponding flag is set. A is m x k after op, B is k x n after op.
//
// Determinism contract: for fixed operand shapes and a fixed thread count the
// result is bit-identical across calls. Output rows are sharded across the
// thread pool; each element's reduction runs in a single fixed order inside
// one shard.
void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
           double alpha, const double* a, std::size_t lda, const double* b,
           std::size_t ldb, double beta, double* c, std::size_t ldc);

// True when an external BLAS was loaded; false on the built-in kernels.
bool using_blas();
const char* backend_name();

}  // namespace tlab::gemm

#endif  // TLAB_GEMM_HPP_
