#pragma once

// The kerneltable: kernels are registered in the same order on every node,
// so the index of a kernel is its identity across processes.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nodedev/kernel.hpp"
#include "nodedev/medtable.hpp"

namespace nodedev {

using KernelIndex = std::uint32_t;

class KernelTable {
 public:
  /// Appends a kernel and returns its index. std::logic_error on a
  /// duplicate name or once the table is sealed.
  KernelIndex add(std::string name, KernelFn fn);

  /// LookupError naming the kernel if absent.
  KernelIndex index_of(std::string_view name) const;

  /// ProtocolError if index is out of range (tables diverged).
  const KernelFn& at(KernelIndex index) const;

  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<std::string> names() const;
  std::uint64_t digest() const;

  /// Called at handshake; no registration afterwards.
  void seal() noexcept { sealed_ = true; }
  bool sealed() const noexcept { return sealed_; }

 private:
  struct Entry {
    std::string name;
    KernelFn fn;
  };
  std::vector<Entry> entries_;
  bool sealed_ = false;
};

/// Everything that must be identical on every node: the kernels and the
/// globals, both in registration order. Host and workers build their image
/// with the same code before any command is processed.
struct ProgramImage {
  KernelTable kernels;
  std::vector<GlobalVar> globals;

  KernelIndex add_kernel(std::string name, KernelFn fn) {
    return kernels.add(std::move(name), std::move(fn));
  }
  /// Returns the global's mediary address.
  MediaryAddr add_global(std::string name, Bytes initial);
};

}  // namespace nodedev
