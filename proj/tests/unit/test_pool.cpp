#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <vector>

#include "../support/oracles.hpp"
#include "nodedev/bench.hpp"
#include "nodedev/pool.hpp"

using namespace nodedev;

TEST_CASE("static chunks partition the range") {
  auto c = static_chunks(0, 10, 4);
  REQUIRE(c.size() == 4);
  CHECK((c[0].lo == 0 && c[0].hi == 3));
  CHECK((c[3].lo == 9 && c[3].hi == 10));

  // ceil(5/4) = 2 gives three chunks, none empty.
  auto d = static_chunks(0, 5, 4);
  CHECK(d.size() == 3);
  CHECK(d.back().hi == 5);

  CHECK(static_chunks(3, 3, 4).empty());
  CHECK(static_chunks(-4, 4, 1).size() == 1);
}

TEST_CASE("parallel_for visits every index exactly once") {
  for (std::size_t width : {1u, 2u, 3u, 8u}) {
    WorkerPool pool(width);
    for (std::int64_t n : {0, 1, 7, 1000}) {
      std::vector<std::atomic<int>> visits(static_cast<std::size_t>(n));
      parallel_for(pool, 0, n, [&](std::int64_t i) { visits[static_cast<std::size_t>(i)]++; });
      for (auto& v : visits) CHECK(v.load() == 1);
    }
  }
}

TEST_CASE("nested task groups finish") {
  WorkerPool pool(3);
  std::atomic<int> leaves{0};
  TaskGroup outer(pool);
  for (int i = 0; i < 8; ++i) {
    outer.spawn([&] {
      TaskGroup inner(pool);
      for (int j = 0; j < 8; ++j) inner.spawn([&] { leaves++; });
      inner.wait();
    });
  }
  outer.wait();
  CHECK(leaves.load() == 64);
}

TEST_CASE("fib through tasks matches the iterative value") {
  WorkerPool pool(4);
  CHECK(bench::fib_tasks(pool, 20) == oracle::fib(20));
  CHECK(bench::fib_tasks(pool, 25) == oracle::fib(25));
  CHECK(bench::fib_tasks(pool, 1) == 1);
  CHECK(bench::fib_tasks(pool, 0) == 0);
}

TEST_CASE("the first task failure reaches wait") {
  WorkerPool pool(2);
  TaskGroup g(pool);
  std::atomic<int> ran{0};
  for (int i = 0; i < 10; ++i) {
    g.spawn([&, i] {
      ran++;
      if (i == 3) throw std::runtime_error("task 3");
    });
  }
  CHECK_THROWS_WITH(g.wait(), "task 3");
  CHECK(ran.load() == 10);
}

TEST_CASE("parallel_for propagates body exceptions") {
  WorkerPool pool(4);
  CHECK_THROWS_AS(parallel_for(pool, 0, 100,
                               [](std::int64_t i) {
                                 if (i == 99) throw std::out_of_range("last");
                               }),
                  std::out_of_range);
}

TEST_CASE("pool width comes from NODEDEV_THREADS") {
  ::setenv("NODEDEV_THREADS", "3", 1);
  CHECK(default_pool_width() == 3);
  ::setenv("NODEDEV_THREADS", "zero", 1);
  CHECK(default_pool_width() >= 1);
  ::unsetenv("NODEDEV_THREADS");
  CHECK(default_pool_width() >= 1);
}
