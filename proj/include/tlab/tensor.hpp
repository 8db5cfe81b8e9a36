#ifndef TLAB_TENSOR_HPP_
#define TLAB_TENSOR_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tlab {

// Vector storage that default-initializes doubles (no zero fill). Operation
// outputs that are fully overwritten by their kernels use this to skip one
// redundant pass over multi-megabyte buffers.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  template <typename U>
  void construct(U* p) noexcept(noexcept(::new (static_cast<void*>(p)) U)) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};
using DoubleVec = std::vector<double, DefaultInitAllocator<double>>;

// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
// Copies of a Tensor are handles to the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  // Storage left default-initialized; caller must write every element.
  static Tensor uninitialized(std::vector<std::size_t> shape);
  static Tensor filled(std::vector<std::size_t> shape, double value);
  static Tensor of(std::vector<std::size_t> shape, std::vector<double> values,
                   bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return s_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return s_->shape; }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t size() const { return s_->values.size(); }
  std::size_t rows() const { return s_->shape.empty() ? 0 : s_->shape[0]; }
  std::size_t cols() const { return s_->shape.size() < 2 ? 1 : s_->shape[1]; }

  double* data() { return s_->values.data(); }
  const double* data() const { return s_->values.data(); }
  DoubleVec& values() { return s_->values; }
  const DoubleVec& values() const { return s_->values; }

  double& at(std::size_t i) { return s_->values[i]; }
  double at(std::size_t i) const { return s_->values[i]; }
  double& at(std::size_t r, std::size_t c) { return s_->values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return s_->values[r * cols() + c]; }

  // Value of a single-element tensor.
  double value() const;

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool v);

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  double* grad() { return s_->grad.data(); }
  const double* grad() const { return s_->grad.data(); }
  const DoubleVec& grad_values() const { return s_->grad; }

  // Allocates a zeroed gradient buffer if absent.
  void ensure_grad();
  void zero_grad();

  // Deep copy of the values; detached (no grad, requires_grad=false).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* storage_id() const { return s_.get(); }

 private:
  struct Storage {
    std::vector<std::size_t> shape;
    DoubleVec values;
    DoubleVec grad;  // empty = absent; otherwise same length as values
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Ordered record of executed operations. backward() replays the recorded
// steps in exact reverse append order; the tape is rebuilt for every forward
// pass. A non-recording tape makes every operation a plain evaluation.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t node_count() const { return nodes_.size(); }
  void record(std::function<void()> backward_step) { nodes_.push_back(std::move(backward_step)); }
  void clear() { nodes_.clear(); }

  friend void backward(const Tensor& loss, Tape& tape);

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
// requires_grad tensor reachable from the loss. Gradients add up across
// fan-out and across repeated calls; zero them first when re-running.
void backward(const Tensor& loss, Tape& tape);

// ---- differentiable operations ---------------------------------------------

// [m x k] * [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// [m x k] * [n x k]^T -> [m x n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);

// Row-wise softmax with max-subtraction. Entries may be -inf (masked, mapped
// to exactly 0); a row with no finite entry is an error.
Tensor row_softmax(Tape& tape, const Tensor& a);

// Per-row normalization over the last dimension of a 2-D tensor, then
// y = gain * xhat + bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

// Tanh-approximation GELU by default; exact=true uses the erf formulation.
Tensor gelu(Tape& tape, const Tensor& x, bool exact = false);

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds into table rows.
Tensor embedding_lookup(Tape& tape, const Tensor& table, const std::vector<int>& ids);

// Mean negative log-softmax probability of targets over unmasked positions.
// logits: [n x V], targets/mask: length n.
Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<unsigned char>& mask);

// Horizontal concatenation of equal-height matrices.
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);

// Batched attention primitives over packed rows ([n_batch*n_seq x d]).
// attn_scores: S[b,i,j] = scale * <q_{b,i}, k_{b,j}>, with j > i forced to
// -inf (and never computed) when causal. attn_mix: y_{b,i} = sum_j P[b,i,j] *
// v_{b,j}, skipping j > i when causal so future rows are never read.
Tensor attn_scores(Tape& tape, const Tensor& q, const Tensor& k, std::size_t n_batch,
                   std::size_t n_seq, double scale, bool causal);
Tensor attn_mix(Tape& tape, const Tensor& p, const Tensor& v, std::size_t n_batch,
                std::size_t n_seq, bool causal);

// ---- gradient checking ------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of x.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h);

}  // namespace tlab

#endif  // TLAB_TENSOR_HPP_
