#pragma once

// Host runtime: numbered devices, map processing, and target execution.
//
// A target execution under the device's guard:
//   1. for each map, in declaration order: reserve a mirror slot, Alloc it
//      on the device, commit;
//   2. Write the section of every To/ToFrom map;
//   3. Exec(kernel index, mediary addresses in map order, scalars).
// Finalization (wait) receives Done, Reads back From/ToFrom sections into
// host memory, and Frees every slot. With nowait the guard is released
// after Exec; the next exchange on that device first drains the owed Done.
//
// Device 0 is the host itself. It runs kernels in-process on copies of the
// mapped data, so it behaves exactly like a remote device.

#include <atomic>
#include <cstddef>
#include <memory>
#include <ranges>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "nodedev/bootstrap.hpp"
#include "nodedev/medtable.hpp"
#include "nodedev/registry.hpp"
#include "nodedev/wire.hpp"

namespace nodedev {

enum class MapType { To, From, ToFrom, Alloc };

/// Transfer policy for one array section [offset, offset+count) of a host
/// array of elem_size-byte elements.
struct MapEntry {
  MapType type = MapType::To;
  std::span<const std::byte> host_in;  // whole host array; To/ToFrom
  std::span<std::byte> host_out;       // whole host array; From/ToFrom
  std::size_t elem_size = 1;
  std::size_t offset = 0;
  std::size_t count = 0;

  std::size_t byte_offset() const noexcept { return elem_size * offset; }
  std::size_t byte_count() const noexcept { return elem_size * count; }
  bool copies_in() const noexcept { return type == MapType::To || type == MapType::ToFrom; }
  bool copies_out() const noexcept { return type == MapType::From || type == MapType::ToFrom; }
};

namespace detail {

inline void check_section(std::size_t size, std::size_t offset, std::size_t count) {
  if (offset > size || count > size - offset) {
    throw std::out_of_range("array section [" + std::to_string(offset) + ":" +
                            std::to_string(count) + "] exceeds " + std::to_string(size) +
                            " elements");
  }
}

}  // namespace detail

template <std::ranges::contiguous_range R>
MapEntry map_to(const R& host, std::size_t offset, std::size_t count) {
  using T = std::ranges::range_value_t<R>;
  std::span<const T> s(std::ranges::data(host), std::ranges::size(host));
  detail::check_section(s.size(), offset, count);
  return {MapType::To, std::as_bytes(s), {}, sizeof(T), offset, count};
}

template <std::ranges::contiguous_range R>
MapEntry map_to(const R& host) {
  return map_to(host, 0, std::ranges::size(host));
}

template <std::ranges::contiguous_range R>
MapEntry map_from(R&& host, std::size_t offset, std::size_t count) {
  using T = std::ranges::range_value_t<R>;
  std::span<T> s(std::ranges::data(host), std::ranges::size(host));
  detail::check_section(s.size(), offset, count);
  return {MapType::From, {}, std::as_writable_bytes(s), sizeof(T), offset, count};
}

template <std::ranges::contiguous_range R>
MapEntry map_from(R&& host) {
  return map_from(host, 0, std::ranges::size(host));
}

template <std::ranges::contiguous_range R>
MapEntry map_tofrom(R&& host, std::size_t offset, std::size_t count) {
  using T = std::ranges::range_value_t<R>;
  std::span<T> s(std::ranges::data(host), std::ranges::size(host));
  detail::check_section(s.size(), offset, count);
  return {MapType::ToFrom, std::as_bytes(s), std::as_writable_bytes(s), sizeof(T), offset, count};
}

template <std::ranges::contiguous_range R>
MapEntry map_tofrom(R&& host) {
  return map_tofrom(host, 0, std::ranges::size(host));
}

/// Device-only storage of `count` elements of T; nothing is transferred.
template <typename T = std::byte>
MapEntry map_alloc(std::size_t count) {
  return {MapType::Alloc, {}, {}, sizeof(T), 0, count};
}

/// One frame as seen by the host on a device connection. Only the first
/// kHeadBytes of the payload are kept.
struct TranscriptEntry {
  static constexpr std::size_t kHeadBytes = 32;
  bool from_host = true;
  CommandTag tag = CommandTag::Ack;
  std::uint32_t payload_len = 0;
  Bytes head;
};

namespace detail {
struct Device;
struct OffloadState;
}  // namespace detail

/// Handle to a target execution that still owes finalization.
class Pending {
 public:
  Pending() = default;
  int device() const;
  bool valid() const noexcept { return state_ != nullptr; }
  /// True once wait() has been called on it.
  bool finalized() const noexcept;

 private:
  friend class Runtime;
  explicit Pending(std::shared_ptr<detail::OffloadState> s) : state_(std::move(s)) {}
  std::shared_ptr<detail::OffloadState> state_;
};

class Runtime {
 public:
  /// Spawns and handshakes one worker per configured device. Seals the
  /// image's kernel table.
  static Runtime start(ProgramImage& image, const ClusterConfig& config,
                       const LaunchOptions& options = LaunchOptions::from_env());

  Runtime(Runtime&&) noexcept;
  Runtime& operator=(Runtime&&) noexcept;
  ~Runtime();

  int device_count() const noexcept;
  std::size_t threads_per_device() const noexcept;

  /// Offloads `kernel` to `device`. Without nowait this also waits, and the
  /// returned handle is already finalized.
  Pending target(int device, std::string_view kernel, std::vector<MapEntry> maps,
                 Bytes scalars = {}, bool nowait = false);

  /// Same as target(0, ...): the host acts as its own device.
  void local_execute(std::string_view kernel, std::vector<MapEntry> maps, Bytes scalars = {});

  /// Finalizes an offload. std::logic_error if already finalized;
  /// OffloadError for a non-zero kernel status; DeviceError for an Err
  /// reply; TransportError if the device is unreachable.
  void wait(Pending& pending);
  /// Finalizes every handle concurrently and rethrows the first failure.
  void wait_all(std::span<Pending> pending);

  /// Sends Shutdown to every worker and reaps them. Idempotent.
  void shutdown();

  HostMirror mirror_snapshot(int device) const;
  void record_transcripts(bool on);
  std::vector<TranscriptEntry> transcript(int device) const;
  void clear_transcripts();
  /// Highest number of simultaneously outstanding requests ever observed on
  /// the device's connection.
  int max_in_flight(int device) const;
  std::vector<WorkerProcess> workers() const;
  const ProgramImage& image() const noexcept;

 private:
  struct Impl;
  explicit Runtime(std::unique_ptr<Impl> impl);
  detail::Device& device_at(int index) const;
  std::unique_ptr<Impl> impl_;
};

}  // namespace nodedev
