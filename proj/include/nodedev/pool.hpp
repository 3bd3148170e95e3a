#pragma once

// In-kernel parallel runtime: a fixed-width worker pool with fork-join task
// groups and a statically chunked parallel_for.

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

namespace nodedev {

/// Threads-per-device: NODEDEV_THREADS if set and positive, otherwise the
/// number of hardware threads.
std::size_t default_pool_width();

class WorkerPool {
 public:
  /// width counts the calling thread: a width-w pool starts w-1 helpers and
  /// the thread that waits on a group runs queued tasks itself.
  explicit WorkerPool(std::size_t width);
  ~WorkerPool();

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  std::size_t width() const noexcept { return width_; }

 private:
  friend class TaskGroup;

  void submit(std::function<void()> task);
  void helper_loop(std::stop_token stop);

  std::size_t width_;
  std::mutex mu_;
  std::condition_variable_any cv_;
  std::deque<std::function<void()>> queue_;
  std::vector<std::jthread> helpers_;
};

/// Fork-join scope. wait() returns once every task spawned into the group,
/// including tasks spawned by those tasks, has finished, and rethrows the
/// first failure.
class TaskGroup {
 public:
  explicit TaskGroup(WorkerPool& pool) : pool_(pool) {}
  ~TaskGroup();

  TaskGroup(const TaskGroup&) = delete;
  TaskGroup& operator=(const TaskGroup&) = delete;

  void spawn(std::function<void()> task);
  void wait();

 private:
  void drain() noexcept;

  WorkerPool& pool_;
  std::atomic<std::size_t> pending_{0};
  std::mutex err_mu_;
  std::exception_ptr first_error_;
};

struct ChunkRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;
};

/// Contiguous blocks of ceil((hi-lo)/width) iterations; never returns empty
/// chunks.
std::vector<ChunkRange> static_chunks(std::int64_t lo, std::int64_t hi, std::size_t width);

/// Calls body(i) exactly once for every i in [lo, hi). The first chunk runs
/// on the calling thread.
template <typename Body>
void parallel_for(WorkerPool& pool, std::int64_t lo, std::int64_t hi, Body&& body) {
  if (lo >= hi) return;
  auto chunks = static_chunks(lo, hi, pool.width());
  TaskGroup group(pool);
  for (std::size_t c = 1; c < chunks.size(); ++c) {
    group.spawn([&body, r = chunks[c]] {
      for (auto i = r.lo; i < r.hi; ++i) body(i);
    });
  }
  try {
    for (auto i = chunks[0].lo; i < chunks[0].hi; ++i) body(i);
  } catch (...) {
    group.wait();  // let the other chunks stop before unwinding `body`
    throw;
  }
  group.wait();
}

}  // namespace nodedev
