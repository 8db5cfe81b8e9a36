#include "tlab/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "tlab/gemm.hpp"
#include "tlab/parallel.hpp"
#include "tlab/vecmath.hpp"

namespace tlab {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_matrix(const Tensor& t, const char* op) {
  require(t.defined() && t.ndim() == 2,
          std::string(op) + ": expected a 2-D tensor, got " +
              (t.defined() ? shape_string(t.shape()) : "an undefined tensor"));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// True when the op should register a backward step for this output.
bool track(Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

constexpr std::size_t kEltGrain = 8192;  // elementwise parallel grain

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
  os << "]";
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->values.assign(shape_product(shape), 0.0);
  t.s_->shape = std::move(shape);
  t.s_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::uninitialized(std::vector<std::size_t> shape) {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->values.resize(shape_product(shape));  // default-init: no zero fill
  t.s_->shape = std::move(shape);
  return t;
}

Tensor Tensor::filled(std::vector<std::size_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.s_->values) v = value;
  return t;
}

Tensor Tensor::of(std::vector<std::size_t> shape, std::vector<double> values,
                  bool requires_grad) {
  require(shape_product(shape) == values.size(),
          "Tensor::of: shape " + shape_string(shape) + " does not match " +
              std::to_string(values.size()) + " values");
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->values.assign(values.begin(), values.end());
  t.s_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return of({1}, {value}); }

double Tensor::value() const {
  require(defined() && size() == 1,
          "Tensor::value: expected a scalar, got " + (defined() ? shape_string(shape()) : "an undefined tensor"));
  return s_->values[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  s_->requires_grad = v;
  return *this;
}

void Tensor::ensure_grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = s_->shape;
  t.s_->values = s_->values;
  return t;
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss, Tape& tape) {
  require(loss.defined() && loss.size() == 1,
          "backward: loss must be a scalar, got " +
              (loss.defined() ? shape_string(loss.shape()) : "an undefined tensor"));
  require(loss.requires_grad(), "backward: loss does not require grad (not on the tape)");
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad()[0] += 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul");
  check_matrix(b, "matmul");
  require(a.cols() == b.rows(), "matmul: inner dimensions disagree: " + shape_string(a.shape()) +
                                    " x " + shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::uninitialized({m, n});
  gemm::dgemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, out.data(), n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      if (ac.requires_grad()) {
        ac.ensure_grad();  // dA += G * B^T
        gemm::dgemm(false, true, m, k, n, 1.0, g, n, bc.data(), n, 1.0, ac.grad(), k);
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();  // dB += A^T * G
        gemm::dgemm(true, false, k, n, m, 1.0, ac.data(), k, g, n, 1.0, bc.grad(), n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  check_matrix(a, "matmul_nt");
  check_matrix(b, "matmul_nt");
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions disagree: " +
                                    shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                                    "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::uninitialized({m, n});
  gemm::dgemm(false, true, m, n, k, 1.0, a.data(), k, b.data(), k, 0.0, out.data(), n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      if (ac.requires_grad()) {
        ac.ensure_grad();  // dA += G * B
        gemm::dgemm(false, false, m, k, n, 1.0, g, n, bc.data(), k, 1.0, ac.grad(), k);
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();  // dB += G^T * A
        gemm::dgemm(true, false, n, k, m, 1.0, g, n, ac.data(), k, 1.0, bc.grad(), k);
      }
    });
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const std::size_t n = a.size();
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  parallel_for(n, kEltGrain, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
  });
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      if (ac.requires_grad()) {
        ac.ensure_grad();
        double* da = ac.grad();
        parallel_for(n, kEltGrain, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) da[i] += g[i];
        });
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        double* db = bc.grad();
        parallel_for(n, kEltGrain, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) db[i] += g[i];
        });
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const std::size_t n = a.size();
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  parallel_for(n, kEltGrain, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
  });
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      if (ac.requires_grad()) {
        ac.ensure_grad();
        double* da = ac.grad();
        const double* vb = bc.data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * vb[i];
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        double* db = bc.grad();
        const double* va = ac.data();
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * va[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  const std::size_t n = a.size();
  Tensor out = Tensor::uninitialized(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  parallel_for(n, kEltGrain, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) po[i] = factor * pa[i];
  });
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc, factor, n]() mutable {
      if (!oc.has_grad() || !ac.requires_grad()) return;
      ac.ensure_grad();
      const double* g = oc.grad();
      double* da = ac.grad();
      for (std::size_t i = 0; i < n; ++i) da[i] += factor * g[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;  // fixed sequential order
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) total += pa[i];
  Tensor out = Tensor::scalar(total);
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      if (!oc.has_grad() || !ac.requires_grad()) return;
      ac.ensure_grad();
      const double g = oc.grad()[0];
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += g;
    });
  }
  return out;
}

// ---- softmax ----------------------------------------------------------------

Tensor row_softmax(Tape& tape, const Tensor& a) {
  check_matrix(a, "row_softmax");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::uninitialized({m, n});
  const double* pa = a.data();
  double* po = out.data();
  // Validate rows up front so the error does not fire from a worker thread.
  for (std::size_t i = 0; i < m; ++i) {
    bool finite = false;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = pa[i * n + j];
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
        throw std::invalid_argument("row_softmax: entry (" + std::to_string(i) + ", " +
                                    std::to_string(j) + ") is not finite or -inf");
      if (std::isfinite(v)) finite = true;
    }
    if (!finite)
      throw std::domain_error("row_softmax: row " + std::to_string(i) +
                              " is fully masked (no finite entries)");
  }
  parallel_for(m, 8, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* row = pa + i * n;
      double* orow = po + i * n;
      double mx = kNegInf;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(row[j] - mx);  // exp(-inf) == 0 exactly
        orow[j] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
  });
  if (track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc, m, n]() mutable {
      if (!oc.has_grad() || !ac.requires_grad()) return;
      ac.ensure_grad();
      const double* g = oc.grad();
      const double* y = oc.data();
      double* da = ac.grad();
      parallel_for(m, 8, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          const double* gr = g + i * n;
          const double* yr = y + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          double* dr = da + i * n;
          for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
      });
    });
  }
  return out;
}

// ---- layer norm -------------------------------------------------------------

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  check_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), d = x.cols();
  require(d >= 1, "layer_norm: feature dimension must be >= 1");
  require(eps > 0.0, "layer_norm: eps must be positive");
  require(gain.size() == d && bias.size() == d,
          "layer_norm: gain/bias of size " + std::to_string(gain.size()) + "/" +
              std::to_string(bias.size()) + " do not match feature dimension " +
              std::to_string(d));
  Tensor out = Tensor::uninitialized({m, d});
  std::vector<double> mean(m), inv_std(m);
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  double* po = out.data();
  parallel_for(m, 8, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* row = px + i * d;
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean[i] = mu;
      inv_std[i] = inv;
      double* orow = po + i * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] = (row[j] - mu) * inv * pg[j] + pb[j];
    }
  });
  if (track(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gain, bc = bias, oc = out;
    tape.record([xc, gc, bc, oc, m, d, mean = std::move(mean),
                 inv_std = std::move(inv_std)]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      const double* px2 = xc.data();
      const double* pg2 = gc.data();
      if (xc.requires_grad()) {
        xc.ensure_grad();
        double* dx = xc.grad();
        parallel_for(m, 8, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) {
            const double* xr = px2 + i * d;
            const double* gr = g + i * d;
            const double mu = mean[i], inv = inv_std[i];
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mu) * inv;
              const double dxhat = gr[j] * pg2[j];
              s1 += dxhat;
              s2 += dxhat * xhat;
            }
            const double nd = static_cast<double>(d);
            double* dr = dx + i * d;
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mu) * inv;
              const double dxhat = gr[j] * pg2[j];
              dr[j] += inv * (dxhat - s1 / nd - xhat * s2 / nd);
            }
          }
        });
      }
      if (gc.requires_grad() || bc.requires_grad()) {
        if (gc.requires_grad()) gc.ensure_grad();
        if (bc.requires_grad()) bc.ensure_grad();
        double* dgain = gc.requires_grad() ? gc.grad() : nullptr;
        double* dbias = bc.requires_grad() ? bc.grad() : nullptr;
        // Column-parallel: the row reduction stays in one fixed order.
        parallel_for(d, 4, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t j = lo; j < hi; ++j) {
            double sg = 0.0, sb = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
              const double gv = g[i * d + j];
              sg += gv * (px2[i * d + j] - mean[i]) * inv_std[i];
              sb += gv;
            }
            if (dgain) dgain[j] += sg;
            if (dbias) dbias[j] += sb;
          }
        });
      }
    });
  }
  return out;
}

// ---- gelu -------------------------------------------------------------------

Tensor gelu(Tape& tape, const Tensor& x, bool exact) {
  const std::size_t n = x.size();
  Tensor out = Tensor::uninitialized(x.shape());
  std::vector<double> cache(n);  // tanh(u) or erf(x/sqrt2)
  const double* px = x.data();
  double* po = out.data();
  if (exact) {
    parallel_for(n, 2048, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        const double e = std::erf(px[i] * std::numbers::sqrt2 * 0.5);
        cache[i] = e;
        po[i] = 0.5 * px[i] * (1.0 + e);
      }
    });
  } else {
    constexpr double kC = 0.044715;
    const double s = std::sqrt(2.0 / std::numbers::pi);
    parallel_for(n, 2048, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        const double v = px[i];
        cache[i] = s * (v + kC * v * v * v);
      }
      vecmath::tanh_array(cache.data() + lo, cache.data() + lo, hi - lo);
      for (std::size_t i = lo; i < hi; ++i) po[i] = 0.5 * px[i] * (1.0 + cache[i]);
    });
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, n, exact, cache = std::move(cache)]() mutable {
      if (!oc.has_grad() || !xc.requires_grad()) return;
      xc.ensure_grad();
      const double* g = oc.grad();
      const double* px2 = xc.data();
      double* dx = xc.grad();
      if (exact) {
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        parallel_for(n, 2048, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) {
            const double v = px2[i];
            const double phi = inv_sqrt2pi * std::exp(-0.5 * v * v);
            dx[i] += g[i] * (0.5 * (1.0 + cache[i]) + v * phi);
          }
        });
      } else {
        constexpr double kC = 0.044715;
        const double s = std::sqrt(2.0 / std::numbers::pi);
        parallel_for(n, 2048, [&](std::size_t lo, std::size_t hi) {
          for (std::size_t i = lo; i < hi; ++i) {
            const double v = px2[i];
            const double t = cache[i];
            const double du = s * (1.0 + 3.0 * kC * v * v);
            dx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
          }
        });
      }
    });
  }
  return out;
}

// ---- embedding --------------------------------------------------------------

Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  check_matrix(table, "embedding_lookup");
  const std::size_t v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " out of range [0, " + std::to_string(v) + ")");
  const std::size_t n = ids.size();
  Tensor out = Tensor::uninitialized({n, d});
  const double* pt = table.data();
  double* po = out.data();
  parallel_for(n, 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* src = pt + static_cast<std::size_t>(ids[i]) * d;
      double* dst = po + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
  });
  if (track(tape, {&table})) {
    out.set_requires_grad(true);
    Tensor tc = table, oc = out;
    tape.record([tc, oc, ids, d]() mutable {
      if (!oc.has_grad() || !tc.requires_grad()) return;
      tc.ensure_grad();
      const double* g = oc.grad();
      double* dt = tc.grad();
      // Sequential scatter-add: duplicate ids accumulate in position order.
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* dst = dt + static_cast<std::size_t>(ids[i]) * d;
        const double* src = g + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// ---- cross entropy ----------------------------------------------------------

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<unsigned char>& mask) {
  check_matrix(logits, "cross_entropy");
  const std::size_t n = logits.rows(), v = logits.cols();
  require(targets.size() == n && mask.size() == n,
          "cross_entropy: got " + std::to_string(targets.size()) + " targets and " +
              std::to_string(mask.size()) + " mask entries for " + std::to_string(n) +
              " rows");
  std::size_t n_active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    ++n_active;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " at row " + std::to_string(i) + " out of range [0, " +
                              std::to_string(v) + ")");
  }
  if (n_active == 0) throw std::domain_error("cross_entropy: all positions are masked");

  std::vector<double> lse(n, 0.0);
  const double* pl = logits.data();
  parallel_for(n, 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      if (!mask[i]) continue;
      const double* row = pl + i * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double e = 0.0;
      for (std::size_t j = 0; j < v; ++j) e += std::exp(row[j] - mx);
      lse[i] = mx + std::log(e);
    }
  });
  double total = 0.0;  // fixed sequential order
  for (std::size_t i = 0; i < n; ++i)
    if (mask[i]) total += lse[i] - pl[i * v + static_cast<std::size_t>(targets[i])];
  Tensor out = Tensor::scalar(total / static_cast<double>(n_active));

  if (track(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor lc = logits, oc = out;
    tape.record([lc, oc, targets, mask, lse = std::move(lse), n, v, n_active]() mutable {
      if (!oc.has_grad() || !lc.requires_grad()) return;
      lc.ensure_grad();
      const double gscale = oc.grad()[0] / static_cast<double>(n_active);
      const double* pl2 = lc.data();
      double* dl = lc.grad();
      parallel_for(n, 16, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          if (!mask[i]) continue;
          const double* row = pl2 + i * v;
          double* drow = dl + i * v;
          const auto t = static_cast<std::size_t>(targets[i]);
          for (std::size_t j = 0; j < v; ++j) {
            double p = std::exp(row[j] - lse[i]);
            drow[j] += gscale * (p - (j == t ? 1.0 : 0.0));
          }
        }
      });
    });
  }
  return out;
}

// ---- concat -----------------------------------------------------------------

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    check_matrix(p, "concat_cols");
    require(p.rows() == m, "concat_cols: row mismatch " + shape_string(p.shape()) + " vs " +
                               shape_string(parts[0].shape()));
    total += p.cols();
  }
  Tensor out = Tensor::uninitialized({m, total});
  double* po = out.data();
  parallel_for(m, 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double* dst = po + i * total;
      for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        const double* src = p.data() + i * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] = src[j];
        dst += w;
      }
    }
  });
  bool any = false;
  for (const Tensor& p : parts) any = any || p.requires_grad();
  if (tape.recording() && any) {
    out.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    tape.record([pc, oc, m, total]() mutable {
      if (!oc.has_grad()) return;
      const double* g = oc.grad();
      std::size_t offset = 0;
      for (Tensor& p : pc) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          p.ensure_grad();
          double* dp = p.grad();
          parallel_for(m, 16, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i)
              for (std::size_t j = 0; j < w; ++j) dp[i * w + j] += g[i * total + offset + j];
          });
        }
        offset += w;
      }
    });
  }
  return out;
}

// ---- batched attention primitives --------------------------------------------

Tensor attn_scores(Tape& tape, const Tensor& q, const Tensor& k, std::size_t n_batch,
                   std::size_t n_seq, double scale, bool causal) {
  check_matrix(q, "attn_scores");
  check_matrix(k, "attn_scores");
  check_same_shape(q, k, "attn_scores");
  require(q.rows() == n_batch * n_seq, "attn_scores: " + shape_string(q.shape()) +
                                           " does not pack " + std::to_string(n_batch) + " x " +
                                           std::to_string(n_seq) + " rows");
  const std::size_t dh = q.cols();
  Tensor out = Tensor::uninitialized({n_batch * n_seq, n_seq});
  const double* pq = q.data();
  const double* pk = k.data();
  double* po = out.data();
  parallel_for(n_batch, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t b = lo; b < hi; ++b) {
      const double* qb = pq + b * n_seq * dh;
      const double* kb = pk + b * n_seq * dh;
      double* ob = po + b * n_seq * n_seq;
      for (std::size_t i = 0; i < n_seq; ++i) {
        const std::size_t jmax = causal ? i + 1 : n_seq;
        for (std::size_t j = 0; j < jmax; ++j) {
          double s = 0.0;
          const double* qr = qb + i * dh;
          const double* kr = kb + j * dh;
          for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
          ob[i * n_seq + j] = scale * s;
        }
        for (std::size_t j = jmax; j < n_seq; ++j) ob[i * n_seq + j] = kNegInf;
      }
    }
  });
  if (track(tape, {&q, &k})) {
    out.set_requires_grad(true);
    Tensor qc = q, kc = k, oc = out;
    tape.record([qc, kc, oc, n_batch, n_seq, scale, causal]() mutable {
      if (!oc.has_grad()) return;
      const std::size_t dh = qc.cols();
      const double* g = oc.grad();
      if (qc.requires_grad()) qc.ensure_grad();
      if (kc.requires_grad()) kc.ensure_grad();
      double* dq = qc.requires_grad() ? qc.grad() : nullptr;
      double* dk = kc.requires_grad() ? kc.grad() : nullptr;
      const double* pq2 = qc.data();
      const double* pk2 = kc.data();
      parallel_for(n_batch, 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
          const double* gb = g + b * n_seq * n_seq;
          const double* qb = pq2 + b * n_seq * dh;
          const double* kb = pk2 + b * n_seq * dh;
          if (dq) {
            double* dqb = dq + b * n_seq * dh;
            for (std::size_t i = 0; i < n_seq; ++i) {
              const std::size_t jmax = causal ? i + 1 : n_seq;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double gv = scale * gb[i * n_seq + j];
                const double* kr = kb + j * dh;
                double* dqr = dqb + i * dh;
                for (std::size_t c = 0; c < dh; ++c) dqr[c] += gv * kr[c];
              }
            }
          }
          if (dk) {
            double* dkb = dk + b * n_seq * dh;
            for (std::size_t i = 0; i < n_seq; ++i) {
              const std::size_t jmax = causal ? i + 1 : n_seq;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double gv = scale * gb[i * n_seq + j];
                const double* qr = qb + i * dh;
                double* dkr = dkb + j * dh;
                for (std::size_t c = 0; c < dh; ++c) dkr[c] += gv * qr[c];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor attn_mix(Tape& tape, const Tensor& p, const Tensor& v, std::size_t n_batch,
                std::size_t n_seq, bool causal) {
  check_matrix(p, "attn_mix");
  check_matrix(v, "attn_mix");
  require(p.rows() == n_batch * n_seq && p.cols() == n_seq,
          "attn_mix: weights " + shape_string(p.shape()) + " do not pack " +
              std::to_string(n_batch) + " x " + std::to_string(n_seq) + " rows");
  require(v.rows() == n_batch * n_seq, "attn_mix: values " + shape_string(v.shape()) +
                                           " do not pack " + std::to_string(n_batch) + " x " +
                                           std::to_string(n_seq) + " rows");
  const std::size_t dh = v.cols();
  Tensor out = Tensor::uninitialized({n_batch * n_seq, dh});
  const double* pp = p.data();
  const double* pv = v.data();
  double* po = out.data();
  parallel_for(n_batch, 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t b = lo; b < hi; ++b) {
      const double* pb = pp + b * n_seq * n_seq;
      const double* vb = pv + b * n_seq * dh;
      double* ob = po + b * n_seq * dh;
      for (std::size_t i = 0; i < n_seq; ++i) {
        double* orow = ob + i * dh;
        for (std::size_t c = 0; c < dh; ++c) orow[c] = 0.0;
        const std::size_t jmax = causal ? i + 1 : n_seq;
        for (std::size_t j = 0; j < jmax; ++j) {
          const double w = pb[i * n_seq + j];
          const double* vr = vb + j * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vr[c];
        }
      }
    }
  });
  if (track(tape, {&p, &v})) {
    out.set_requires_grad(true);
    Tensor pc = p, vc = v, oc = out;
    tape.record([pc, vc, oc, n_batch, n_seq, causal]() mutable {
      if (!oc.has_grad()) return;
      const std::size_t dh = vc.cols();
      const double* g = oc.grad();
      if (pc.requires_grad()) pc.ensure_grad();
      if (vc.requires_grad()) vc.ensure_grad();
      double* dp = pc.requires_grad() ? pc.grad() : nullptr;
      double* dv = vc.requires_grad() ? vc.grad() : nullptr;
      const double* pp2 = pc.data();
      const double* pv2 = vc.data();
      parallel_for(n_batch, 1, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t b = lo; b < hi; ++b) {
          const double* gb = g + b * n_seq * dh;
          const double* pb = pp2 + b * n_seq * n_seq;
          const double* vb = pv2 + b * n_seq * dh;
          if (dp) {
            double* dpb = dp + b * n_seq * n_seq;
            for (std::size_t i = 0; i < n_seq; ++i) {
              const std::size_t jmax = causal ? i + 1 : n_seq;
              const double* gr = gb + i * dh;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double* vr = vb + j * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gr[c] * vr[c];
                dpb[i * n_seq + j] += s;
              }
            }
          }
          if (dv) {
            double* dvb = dv + b * n_seq * dh;
            for (std::size_t i = 0; i < n_seq; ++i) {
              const std::size_t jmax = causal ? i + 1 : n_seq;
              const double* gr = gb + i * dh;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double w = pb[i * n_seq + j];
                double* dvr = dvb + j * dh;
                for (std::size_t c = 0; c < dh; ++c) dvr[c] += w * gr[c];
              }
            }
          }
        }
      });
    });
  }
  return out;
}

// ---- grad check -------------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h) {
  require(h > 0.0, "grad_check: step size must be positive");
  Tensor xa = x.clone();
  xa.set_requires_grad(true);
  Tape tape;
  Tensor y = f(tape, xa);
  require(y.size() == 1, "grad_check: function must be scalar-valued, got " +
                             shape_string(y.shape()));
  backward(y, tape);
  std::vector<double> analytic(xa.size(), 0.0);
  if (xa.has_grad())
    analytic.assign(xa.grad(), xa.grad() + xa.size());

  Tensor xf = x.clone();
  double max_err = 0.0;
  for (std::size_t i = 0; i < xf.size(); ++i) {
    const double saved = xf.at(i);
    Tape t_plus(false);
    xf.at(i) = saved + h;
    const double f_plus = f(t_plus, xf).value();
    Tape t_minus(false);
    xf.at(i) = saved - h;
    const double f_minus = f(t_minus, xf).value();
    xf.at(i) = saved;
    const double fd = (f_plus - f_minus) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace tlab
