#include <doctest.h>

#include "../support/medtable_model.hpp"
#include "nodedev/errors.hpp"
#include "nodedev/medtable.hpp"

using namespace nodedev;

namespace {

Bytes filled(std::size_t n, int v) { return Bytes(n, static_cast<std::byte>(v)); }

}  // namespace

TEST_CASE("one global, then a 16-byte array, then a 4-byte variable") {
  HostMirror mirror;
  std::vector<std::size_t> sizes{8};
  mirror.register_globals(sizes);
  CHECK(mirror.state({0}) == SlotState::InUse);

  auto arr = mirror.reserve(16);
  CHECK(arr.index == 1);
  CHECK(mirror.state(arr) == SlotState::Reserved);
  mirror.commit(arr);
  auto var = mirror.reserve(4);
  CHECK(var.index == 2);
  mirror.commit(var);
  CHECK(mirror.nbytes(arr) == 16);
  CHECK(mirror.nbytes(var) == 4);

  DeviceTable dev;
  std::vector<GlobalVar> globals{{"a", filled(8, 1)}};
  dev.register_globals(globals);
  dev.alloc(arr, 16);
  dev.alloc(var, 4);
  CHECK(dev.resolve({0}).size() == 8);
  CHECK(dev.resolve({0})[0] == std::byte{1});
  CHECK(dev.resolve(var).size() == 4);
  CHECK(dev.allocated_indices() == mirror.in_use_indices());
}

TEST_CASE("first fit reuses the lowest released slot") {
  HostMirror m;
  m.register_globals({});
  std::vector<MediaryAddr> a;
  for (int i = 0; i < 6; ++i) {
    a.push_back(m.reserve(1));
    m.commit(a.back());
  }
  CHECK(a.back().index == 5);
  m.release(a[3]);
  m.release(a[1]);
  CHECK(m.reserve(1).index == 1);
  CHECK(m.reserve(1).index == 3);
  CHECK(m.reserve(1).index == 6);
}

TEST_CASE("mirror capacity doubles from four") {
  HostMirror m;
  std::vector<std::size_t> none;
  m.register_globals(none);
  m.reserve(1);
  CHECK(m.capacity() == 4);
  for (int i = 0; i < 4; ++i) m.reserve(1);
  CHECK(m.capacity() == 8);
}

TEST_CASE("mirror misuse is a logic error") {
  HostMirror m;
  std::vector<std::size_t> g{4};
  m.register_globals(g);
  CHECK_THROWS_AS(m.register_globals(g), std::logic_error);
  CHECK_THROWS_AS(m.release({0}), std::logic_error);
  CHECK_THROWS_AS(m.release({3}), std::logic_error);
  CHECK_THROWS_AS(m.commit({3}), std::logic_error);
  auto a = m.reserve(2);
  m.commit(a);
  CHECK_THROWS_AS(m.commit(a), std::logic_error);
  CHECK(m.state({1000}) == SlotState::Unused);

  HostMirror late;
  late.reserve(1);
  CHECK_THROWS_AS(late.register_globals(g), std::logic_error);
}

TEST_CASE("device table errors") {
  DeviceTable t;
  std::vector<GlobalVar> globals{{"g", filled(4, 7)}};
  t.register_globals(globals);

  SUBCASE("double alloc") {
    t.alloc({1}, 8);
    CHECK_THROWS_AS(t.alloc({1}, 8), ProtocolError);
    CHECK_THROWS_AS(t.alloc({0}, 8), ProtocolError);
  }
  SUBCASE("free of a global or an empty slot") {
    CHECK_THROWS_AS(t.free({0}), ProtocolError);
    CHECK_THROWS_AS(t.free({5}), ProtocolError);
  }
  SUBCASE("resolve of an empty slot") {
    CHECK_THROWS_AS(t.resolve({9}), ProtocolError);
  }
  SUBCASE("index beyond the table limit") {
    CHECK_THROWS_AS(t.alloc({DeviceTable::kMaxSlots}, 1), ProtocolError);
  }
#if !defined(__SANITIZE_THREAD__) && !defined(__SANITIZE_ADDRESS__)
  // Sanitizer allocators abort on this request instead of throwing.
  SUBCASE("impossible size") {
    CHECK_THROWS_AS(t.alloc({1}, std::size_t{1} << 62), ResourceError);
    CHECK_FALSE(t.is_allocated({1}));
  }
#endif
  SUBCASE("globals only once and first") {
    CHECK_THROWS_AS(t.register_globals(globals), std::logic_error);
    DeviceTable u;
    u.alloc({0}, 1);
    CHECK_THROWS_AS(u.register_globals(globals), std::logic_error);
  }
}

TEST_CASE("device allocations start zeroed after reuse") {
  DeviceTable t;
  t.register_globals({});
  t.alloc({2}, 16);
  auto r = t.resolve({2});
  std::fill(r.begin(), r.end(), std::byte{0xff});
  t.free({2});
  t.alloc({2}, 16);
  for (auto b : t.resolve({2})) CHECK(b == std::byte{0});
  CHECK(t.capacity() >= 3);
}

TEST_CASE("mirror and device stay in lockstep under random sequences") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto out = testing::run_medtable_model(seed, 5000, seed % 3);
    INFO(out.failure);
    CHECK(out.ok);
  }
}
