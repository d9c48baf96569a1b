#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace protoalign {

// Persistent worker pool for data-parallel kernels. Work is always
// partitioned by output index with a fixed per-element evaluation order,
// so results are bit-identical no matter how many workers run: threads
// never share an accumulator.
class ThreadPool {
 public:
  explicit ThreadPool(int threads);
  ~ThreadPool();

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  int size() const { return int(workers_.size()) + 1; }

  // Invokes fn(begin, end) on disjoint chunks covering [0, n). fn runs on
  // the calling thread when the pool has no workers or n is small.
  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

  // Pool used by tensor kernels. Sized from PROTOALIGN_THREADS (default:
  // hardware concurrency) on first use.
  static ThreadPool& global();
  // Replace the global pool; used by tests to prove thread-count
  // invariance and by the C API to honor thread caps.
  static void set_global_threads(int threads);

 private:
  struct Task {
    const std::function<void(int64_t, int64_t)>* fn = nullptr;
    int64_t begin = 0;
    int64_t end = 0;
  };

  void worker_loop(int idx);

  std::vector<std::thread> workers_;
  std::vector<Task> tasks_;
  std::mutex mu_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
};

}  // namespace protoalign
