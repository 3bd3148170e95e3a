#include "nodedev/pool.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

namespace nodedev {

std::size_t default_pool_width() {
  if (const char* env = std::getenv("NODEDEV_THREADS")) {
    try {
      long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

WorkerPool::WorkerPool(std::size_t width) : width_(std::max<std::size_t>(1, width)) {
  helpers_.reserve(width_ - 1);
  for (std::size_t i = 1; i < width_; ++i) {
    helpers_.emplace_back([this](std::stop_token st) { helper_loop(st); });
  }
}

WorkerPool::~WorkerPool() {
  for (auto& t : helpers_) t.request_stop();
  helpers_.clear();
}

void WorkerPool::submit(std::function<void()> task) {
  {
    std::lock_guard lk(mu_);
    queue_.push_back(std::move(task));
  }
  cv_.notify_all();
}

void WorkerPool::helper_loop(std::stop_token st) {
  std::unique_lock lk(mu_);
  while (true) {
    if (!cv_.wait(lk, st, [this] { return !queue_.empty(); })) return;
    auto task = std::move(queue_.front());
    queue_.pop_front();
    lk.unlock();
    task();
    lk.lock();
  }
}

TaskGroup::~TaskGroup() { drain(); }

void TaskGroup::spawn(std::function<void()> task) {
  pending_.fetch_add(1);
  WorkerPool* pool = &pool_;
  pool_.submit([this, pool, task = std::move(task)] {
    try {
      task();
    } catch (...) {
      std::lock_guard lk(err_mu_);
      if (!first_error_) first_error_ = std::current_exception();
    }
    // The group may be destroyed as soon as pending_ reaches zero.
    if (pending_.fetch_sub(1) == 1) {
      std::lock_guard lk(pool->mu_);
      pool->cv_.notify_all();
    }
  });
}

void TaskGroup::drain() noexcept {
  std::unique_lock lk(pool_.mu_);
  while (pending_.load() != 0) {
    if (!pool_.queue_.empty()) {
      auto task = std::move(pool_.queue_.front());
      pool_.queue_.pop_front();
      lk.unlock();
      task();
      lk.lock();
    } else {
      pool_.cv_.wait(lk);
    }
  }
}

void TaskGroup::wait() {
  drain();
  std::exception_ptr err;
  {
    std::lock_guard lk(err_mu_);
    err = std::exchange(first_error_, nullptr);
  }
  if (err) std::rethrow_exception(err);
}

std::vector<ChunkRange> static_chunks(std::int64_t lo, std::int64_t hi, std::size_t width) {
  std::vector<ChunkRange> out;
  if (lo >= hi) return out;
  auto w = static_cast<std::int64_t>(std::max<std::size_t>(1, width));
  std::int64_t chunk = (hi - lo + w - 1) / w;
  for (std::int64_t b = lo; b < hi; b += chunk) out.push_back({b, std::min(hi, b + chunk)});
  return out;
}

}  // namespace nodedev
