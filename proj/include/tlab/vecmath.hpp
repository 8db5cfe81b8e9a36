#ifndef TLAB_VECMATH_HPP_
#define TLAB_VECMATH_HPP_

#include <cstddef>

namespace tlab::vecmath {

// y[i] = tanh(x[i]). Uses the glibc vector-math library (libmvec) when
// available on this CPU, falling back to scalar std::tanh. Deterministic for
// a fixed machine and build.
void tanh_array(const double* x, double* y, std::size_t n);

const char* backend_name();

}  // namespace tlab::vecmath

#endif  // TLAB_VECMATH_HPP_
