#pragma once

// Mediary-address tables.
//
// A mediary address is the index of a slot in a per-device allocation
// table. The device owns the real buffers (DeviceTable); the host keeps a
// state-only mirror of the same array per device (HostMirror) so it can pick
// the address before the device has allocated anything. Slots 0..G-1 hold
// the G registered globals on every node, in registration order.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nodedev/wire.hpp"

namespace nodedev {

struct MediaryAddr {
  std::uint32_t index = 0;

  auto operator<=>(const MediaryAddr&) const = default;
};

/// A variable present on every node from startup, e.g. a read-only lookup
/// table. Its size is initial.size().
struct GlobalVar {
  std::string name;
  Bytes initial;
};

class DeviceTable {
 public:
  /// Largest slot index a host may name; guards against a corrupt Alloc
  /// forcing a gigantic table.
  static constexpr std::uint32_t kMaxSlots = 1u << 24;

  void register_globals(std::span<const GlobalVar> globals);

  /// Places a zero-filled buffer of nbytes at addr. ProtocolError if the
  /// slot is already allocated, ResourceError if memory is exhausted.
  void alloc(MediaryAddr addr, std::size_t nbytes);
  void free(MediaryAddr addr);
  std::span<std::byte> resolve(MediaryAddr addr);

  bool is_allocated(MediaryAddr addr) const noexcept;
  std::size_t global_count() const noexcept { return globals_; }
  std::size_t capacity() const noexcept { return slots_.size(); }
  std::vector<std::uint32_t> allocated_indices() const;

 private:
  std::vector<std::optional<Bytes>> slots_;
  std::size_t globals_ = 0;
  bool globals_registered_ = false;
};

enum class SlotState : std::uint8_t { Unused, Reserved, InUse };

class HostMirror {
 public:
  /// Marks slots 0..n-1 InUse with the given sizes. Must be the first call.
  void register_globals(std::span<const std::size_t> sizes);

  /// Lowest Unused slot becomes Reserved. Doubles capacity when full.
  MediaryAddr reserve(std::size_t nbytes);
  void commit(MediaryAddr addr);
  void release(MediaryAddr addr);

  SlotState state(MediaryAddr addr) const noexcept;
  std::size_t nbytes(MediaryAddr addr) const;
  std::size_t global_count() const noexcept { return globals_; }
  std::size_t capacity() const noexcept { return slots_.size(); }
  std::vector<std::uint32_t> in_use_indices() const;
  /// Slots at or above global_count() that are not Unused.
  std::size_t live_count() const noexcept;

 private:
  struct Slot {
    SlotState state = SlotState::Unused;
    std::size_t nbytes = 0;
  };
  std::vector<Slot> slots_;
  std::size_t globals_ = 0;
  bool globals_registered_ = false;
  bool touched_ = false;
};

}  // namespace nodedev
