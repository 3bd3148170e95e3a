#include "nodedev/medtable.hpp"

#include <algorithm>
#include <new>
#include <stdexcept>

#include "nodedev/errors.hpp"

namespace nodedev {

namespace {

std::string slot_str(MediaryAddr addr) { return "slot " + std::to_string(addr.index); }

}  // namespace

void DeviceTable::register_globals(std::span<const GlobalVar> globals) {
  if (globals_registered_) throw std::logic_error("device globals registered twice");
  if (!slots_.empty()) throw std::logic_error("device globals must be registered first");
  globals_registered_ = true;
  globals_ = globals.size();
  slots_.reserve(globals.size());
  for (const auto& g : globals) slots_.emplace_back(g.initial);
}

void DeviceTable::alloc(MediaryAddr addr, std::size_t nbytes) {
  if (addr.index >= kMaxSlots) {
    throw ProtocolError(slot_str(addr) + " exceeds the device table limit");
  }
  if (addr.index >= slots_.size()) {
    std::size_t grown = std::max<std::size_t>(slots_.size() * 2, addr.index + 1);
    slots_.resize(std::min<std::size_t>(grown, kMaxSlots));
  }
  auto& slot = slots_[addr.index];
  if (slot) throw ProtocolError(slot_str(addr) + " is already allocated");
  try {
    slot.emplace(nbytes);  // value-initialized: zero bytes
  } catch (const std::bad_alloc&) {
    throw ResourceError("cannot allocate " + std::to_string(nbytes) + " bytes for " +
                        slot_str(addr));
  } catch (const std::length_error&) {
    throw ResourceError("cannot allocate " + std::to_string(nbytes) + " bytes for " +
                        slot_str(addr));
  }
}

void DeviceTable::free(MediaryAddr addr) {
  if (addr.index < globals_) throw ProtocolError(slot_str(addr) + " holds a global");
  if (!is_allocated(addr)) throw ProtocolError(slot_str(addr) + " is not allocated");
  slots_[addr.index].reset();
}

std::span<std::byte> DeviceTable::resolve(MediaryAddr addr) {
  if (!is_allocated(addr)) throw ProtocolError(slot_str(addr) + " is not allocated");
  return *slots_[addr.index];
}

bool DeviceTable::is_allocated(MediaryAddr addr) const noexcept {
  return addr.index < slots_.size() && slots_[addr.index].has_value();
}

std::vector<std::uint32_t> DeviceTable::allocated_indices() const {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i]) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

void HostMirror::register_globals(std::span<const std::size_t> sizes) {
  if (globals_registered_) throw std::logic_error("mirror globals registered twice");
  if (touched_) throw std::logic_error("mirror globals must be registered first");
  globals_registered_ = true;
  globals_ = sizes.size();
  slots_.reserve(sizes.size());
  for (auto n : sizes) slots_.push_back({SlotState::InUse, n});
}

MediaryAddr HostMirror::reserve(std::size_t nbytes) {
  touched_ = true;
  for (std::size_t i = globals_; i < slots_.size(); ++i) {
    if (slots_[i].state == SlotState::Unused) {
      slots_[i] = {SlotState::Reserved, nbytes};
      return {static_cast<std::uint32_t>(i)};
    }
  }
  std::size_t index = slots_.size();
  if (index >= DeviceTable::kMaxSlots) {
    throw ResourceError("mediary address space exhausted");
  }
  slots_.resize(std::max<std::size_t>(4, slots_.size() * 2));
  slots_[index] = {SlotState::Reserved, nbytes};
  return {static_cast<std::uint32_t>(index)};
}

void HostMirror::commit(MediaryAddr addr) {
  if (state(addr) != SlotState::Reserved) {
    throw std::logic_error("commit of non-reserved " + slot_str(addr));
  }
  slots_[addr.index].state = SlotState::InUse;
}

void HostMirror::release(MediaryAddr addr) {
  if (addr.index < globals_) throw std::logic_error("release of global " + slot_str(addr));
  if (state(addr) == SlotState::Unused) {
    throw std::logic_error("release of unused " + slot_str(addr));
  }
  slots_[addr.index] = {};
}

SlotState HostMirror::state(MediaryAddr addr) const noexcept {
  return addr.index < slots_.size() ? slots_[addr.index].state : SlotState::Unused;
}

std::size_t HostMirror::nbytes(MediaryAddr addr) const {
  if (state(addr) == SlotState::Unused) {
    throw std::logic_error("size query on unused " + slot_str(addr));
  }
  return slots_[addr.index].nbytes;
}

std::vector<std::uint32_t> HostMirror::in_use_indices() const {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].state == SlotState::InUse) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

std::size_t HostMirror::live_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = globals_; i < slots_.size(); ++i) {
    if (slots_[i].state != SlotState::Unused) ++n;
  }
  return n;
}

}  // namespace nodedev
