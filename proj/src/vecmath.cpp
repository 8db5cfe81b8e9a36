#include "tlab/vecmath.hpp"

#include <cmath>
#include <mutex>

#if defined(__linux__)
#include <dlfcn.h>
#endif

namespace tlab::vecmath {

namespace {

#if defined(__x86_64__) && defined(__linux__)

typedef double Vec8 __attribute__((vector_size(64)));
typedef double Vec4 __attribute__((vector_size(32)));
using Tanh8Fn = Vec8 (*)(Vec8);
using Tanh4Fn = Vec4 (*)(Vec4);

Tanh8Fn g_tanh8 = nullptr;
Tanh4Fn g_tanh4 = nullptr;
const char* g_backend = "scalar";

void load_backend() {
  void* handle = dlopen("libmvec.so.1", RTLD_NOW | RTLD_LOCAL);
  if (!handle) handle = dlopen("libmvec.so", RTLD_NOW | RTLD_LOCAL);
  if (!handle) return;
  if (__builtin_cpu_supports("avx512f")) {
    if (auto fn = reinterpret_cast<Tanh8Fn>(dlsym(handle, "_ZGVeN8v_tanh"))) {
      g_tanh8 = fn;
      g_backend = "libmvec-avx512";
      return;
    }
  }
  if (__builtin_cpu_supports("avx2")) {
    if (auto fn = reinterpret_cast<Tanh4Fn>(dlsym(handle, "_ZGVdN4v_tanh"))) {
      g_tanh4 = fn;
      g_backend = "libmvec-avx2";
    }
  }
}

void ensure_backend() {
  static std::once_flag once;
  std::call_once(once, load_backend);
}

__attribute__((target("avx512f"))) void tanh8_loop(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    Vec8 v;
    __builtin_memcpy(&v, x + i, sizeof(v));
    v = g_tanh8(v);
    __builtin_memcpy(y + i, &v, sizeof(v));
  }
  for (; i < n; ++i) y[i] = std::tanh(x[i]);
}

__attribute__((target("avx2"))) void tanh4_loop(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    Vec4 v;
    __builtin_memcpy(&v, x + i, sizeof(v));
    v = g_tanh4(v);
    __builtin_memcpy(y + i, &v, sizeof(v));
  }
  for (; i < n; ++i) y[i] = std::tanh(x[i]);
}

#else
void ensure_backend() {}
const char* g_backend = "scalar";
#endif

}  // namespace

void tanh_array(const double* x, double* y, std::size_t n) {
  ensure_backend();
#if defined(__x86_64__) && defined(__linux__)
  if (g_tanh8) {
    tanh8_loop(x, y, n);
    return;
  }
  if (g_tanh4) {
    tanh4_loop(x, y, n);
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

const char* backend_name() {
  ensure_backend();
  return g_backend;
}

}  // namespace tlab::vecmath
