#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <type_traits>

#include "nodedev/errors.hpp"
#include "nodedev/pool.hpp"
#include "nodedev/wire.hpp"

namespace nodedev {

/// Device memory handed to a kernel: one region per map, in map order.
using Region = std::span<std::byte>;

/// What a running kernel can see of its device.
class ExecContext {
 public:
  ExecContext(int device_index, WorkerPool& pool, std::span<const Region> globals)
      : device_index_(device_index), pool_(pool), globals_(globals) {}

  int device_index() const noexcept { return device_index_; }
  WorkerPool& pool() noexcept { return pool_; }
  std::size_t threads() const noexcept { return pool_.width(); }

  /// Registered globals, by registration order.
  std::span<const Region> globals() const noexcept { return globals_; }

  template <typename Body>
  void parallel_for(std::int64_t lo, std::int64_t hi, Body&& body) {
    nodedev::parallel_for(pool_, lo, hi, std::forward<Body>(body));
  }

 private:
  int device_index_;
  WorkerPool& pool_;
  std::span<const Region> globals_;
};

/// A kernel signals failure by throwing; the device then reports a
/// non-zero Done status.
using KernelFn =
    std::function<void(ExecContext&, std::span<const Region>, std::span<const std::byte>)>;

/// Packs pass-by-value kernel arguments.
class ScalarPack {
 public:
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  ScalarPack& add(const T& v) {
    auto raw = std::as_bytes(std::span(&v, 1));
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
    return *this;
  }
  Bytes take() { return std::move(bytes_); }

 private:
  Bytes bytes_;
};

/// Unpacks ScalarPack bytes in the same order.
class ScalarReader {
 public:
  explicit ScalarReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T next() {
    if (bytes_.size() - pos_ < sizeof(T)) throw ProtocolError("kernel scalars too short");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

/// Views a region as an array of T. The region size must be a multiple of
/// sizeof(T).
template <typename T>
std::span<T> as_array(Region r) {
  if (r.size() % sizeof(T) != 0) throw ProtocolError("region size is not a whole element count");
  return {reinterpret_cast<T*>(r.data()), r.size() / sizeof(T)};
}

}  // namespace nodedev
