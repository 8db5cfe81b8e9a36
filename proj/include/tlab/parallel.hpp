#ifndef TLAB_PARALLEL_HPP_
#define TLAB_PARALLEL_HPP_

#include <cstddef>
#include <functional>

namespace tlab {

// Persistent worker pool for data-parallel loops over index ranges.
//
// parallel_for splits [0, n) into contiguous chunks, one per participating
// thread (the calling thread runs the last chunk itself). Chunk boundaries
// never split an index, so any computation in which each output element is
// produced by exactly one index iteration is bit-deterministic for every
// thread count. Reductions must NOT be spread across chunks; do those
// sequentially in the caller.
//
// Nested calls degrade to serial execution on the calling thread.
class ThreadPool {
 public:
  static ThreadPool& instance();

  // Number of threads that participate in parallel_for (workers + caller).
  std::size_t thread_count() const { return workers_ + 1; }

  // Resize the pool. Must not be called concurrently with parallel_for.
  void set_thread_count(std::size_t n);

  // Runs body(begin, end) over a partition of [0, n). min_grain is the
  // smallest chunk worth dispatching; short loops run inline.
  void parallel_for(std::size_t n, std::size_t min_grain,
                    const std::function<void(std::size_t, std::size_t)>& body);

  ~ThreadPool();

 private:
  ThreadPool();
  void start(std::size_t workers);
  void stop();

  struct Impl;
  Impl* impl_;
  std::size_t workers_ = 0;
};

inline void parallel_for(std::size_t n, std::size_t min_grain,
                         const std::function<void(std::size_t, std::size_t)>& body) {
  ThreadPool::instance().parallel_for(n, min_grain, body);
}

}  // namespace tlab

#endif  // TLAB_PARALLEL_HPP_
