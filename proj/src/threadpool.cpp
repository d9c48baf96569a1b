#include "protoalign/threadpool.hpp"

#include <algorithm>
#include <cstdlib>
#include <memory>
#include <string>

namespace protoalign {

ThreadPool::ThreadPool(int threads) {
  int extra = std::max(0, threads - 1);
  tasks_.resize(size_t(extra));
  workers_.reserve(size_t(extra));
  for (int i = 0; i < extra; ++i) {
    workers_.emplace_back([this, i] { worker_loop(i); });
  }
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_work_.notify_all();
  for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int idx) {
  uint64_t seen = 0;
  for (;;) {
    Task task;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_work_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      task = tasks_[size_t(idx)];
    }
    if (task.fn && task.begin < task.end) (*task.fn)(task.begin, task.end);
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (--pending_ == 0) cv_done_.notify_all();
    }
  }
}

void ThreadPool::parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int nw = int(workers_.size());
  if (nw == 0 || n < 2) {
    fn(0, n);
    return;
  }
  int parts = std::min<int64_t>(nw + 1, n);
  int64_t chunk = (n + parts - 1) / parts;
  {
    std::lock_guard<std::mutex> lk(mu_);
    pending_ = nw;
    for (int i = 0; i < nw; ++i) {
      int64_t b = std::min<int64_t>(n, int64_t(i + 1) * chunk);
      int64_t e = std::min<int64_t>(n, int64_t(i + 2) * chunk);
      tasks_[size_t(i)] = Task{&fn, b, e};
    }
    ++generation_;
  }
  cv_work_.notify_all();
  fn(0, std::min<int64_t>(n, chunk));
  {
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return pending_ == 0; });
  }
}

namespace {

std::unique_ptr<ThreadPool>& global_slot() {
  static std::unique_ptr<ThreadPool> pool;
  return pool;
}

int default_threads() {
  if (const char* env = std::getenv("PROTOALIGN_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : int(hc);
}

}  // namespace

ThreadPool& ThreadPool::global() {
  auto& slot = global_slot();
  if (!slot) slot = std::make_unique<ThreadPool>(default_threads());
  return *slot;
}

void ThreadPool::set_global_threads(int threads) {
  global_slot() = std::make_unique<ThreadPool>(std::max(1, threads));
}

}  // namespace protoalign
