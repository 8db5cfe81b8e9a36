#include "tlab/gemm.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <string>

#include "tlab/parallel.hpp"

#if defined(__linux__)
#include <dlfcn.h>
#endif

namespace tlab::gemm {

namespace {

// cblas enums, fixed by the standard C interface.
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

using CblasDgemmFn = void (*)(int order, int trans_a, int trans_b, int m, int n, int k,
                              double alpha, const double* a, int lda, const double* b,
                              int ldb, double beta, double* c, int ldc);
using SetNumThreadsFn = void (*)(int);

CblasDgemmFn g_cblas_dgemm = nullptr;
std::string g_backend = "builtin";

#if defined(__x86_64__)
bool host_has_avx512() {
  return __builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512dq") &&
         __builtin_cpu_supports("avx512bw") && __builtin_cpu_supports("avx512vl");
}
#else
bool host_has_avx512() { return false; }
#endif

void load_backend() {
#if defined(__linux__)
  if (std::getenv("TLAB_NO_BLAS")) return;
  // OpenBLAS with DYNAMIC_ARCH picks its kernel set from OPENBLAS_CORETYPE at
  // library-init time. Shipped builds often predate the host CPU and fall
  // back to a slow generic kernel, so pin a compatible AVX-512 kernel before
  // loading. Loading via dlopen (instead of linking) is what makes this
  // ordering possible, and lets the build run without BLAS installed at all.
  if (host_has_avx512() && !std::getenv("OPENBLAS_CORETYPE"))
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (!handle) return;
  auto fn = reinterpret_cast<CblasDgemmFn>(dlsym(handle, "cblas_dgemm"));
  if (!fn) return;
  // One BLAS thread per call; parallelism happens in our row sharding.
  if (auto set_threads = reinterpret_cast<SetNumThreadsFn>(dlsym(handle, "openblas_set_num_threads")))
    set_threads(1);
  g_cblas_dgemm = fn;
  g_backend = "openblas";
#endif
}

void ensure_backend() {
  static std::once_flag once;
  std::call_once(once, load_backend);
}

// Built-in fallback kernels. Plain loops with a fixed k-order per element.
void builtin_dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                   double alpha, const double* a, std::size_t lda, const double* b,
                   std::size_t ldb, double beta, double* c, std::size_t ldc) {
  auto at = [&](std::size_t i, std::size_t p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (beta == 0.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    } else if (beta != 1.0) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    if (!trans_b) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = alpha * at(i, p);
        const double* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * ldb;
        double sum = 0.0;
        for (std::size_t p = 0; p < k; ++p) sum += at(i, p) * brow[p];
        crow[j] += alpha * sum;
      }
    }
  }
}

void dgemm_rows(bool trans_a, bool trans_b, std::size_t row0, std::size_t rows,
                std::size_t n, std::size_t k, double alpha, const double* a,
                std::size_t lda, const double* b, std::size_t ldb, double beta,
                double* c, std::size_t ldc) {
  // Shift the operands so the shard computes output rows [row0, row0+rows).
  const double* a_shard = trans_a ? a + row0 : a + row0 * lda;
  double* c_shard = c + row0 * ldc;
  if (g_cblas_dgemm) {
    g_cblas_dgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
                  static_cast<int>(rows), static_cast<int>(n), static_cast<int>(k), alpha,
                  a_shard, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c_shard,
                  static_cast<int>(ldc));
  } else {
    builtin_dgemm(trans_a, trans_b, rows, n, k, alpha, a_shard, lda, b, ldb, beta, c_shard, ldc);
  }
}

}  // namespace

void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
           double alpha, const double* a, std::size_t lda, const double* b,
           std::size_t ldb, double beta, double* c, std::size_t ldc) {
  ensure_backend();
  if (m == 0 || n == 0) return;
  // Shard output rows when there is enough work to amortize a dispatch.
  const std::size_t flops = 2 * m * n * k;
  if (flops >= (1u << 21) && m >= 2 * ThreadPool::instance().thread_count()) {
    parallel_for(m, 1, [&](std::size_t lo, std::size_t hi) {
      dgemm_rows(trans_a, trans_b, lo, hi - lo, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    });
  } else {
    dgemm_rows(trans_a, trans_b, 0, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

bool using_blas() {
  ensure_backend();
  return g_cblas_dgemm != nullptr;
}

const char* backend_name() {
  ensure_backend();
  return g_backend.c_str();
}

}  // namespace tlab::gemm
