#include "nodedev/registry.hpp"

#include <stdexcept>

namespace nodedev {

KernelIndex KernelTable::add(std::string name, KernelFn fn) {
  if (sealed_) throw std::logic_error("kernel '" + name + "' registered after handshake");
  for (const auto& e : entries_) {
    if (e.name == name) throw std::logic_error("kernel '" + name + "' registered twice");
  }
  entries_.push_back({std::move(name), std::move(fn)});
  return static_cast<KernelIndex>(entries_.size() - 1);
}

KernelIndex KernelTable::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return static_cast<KernelIndex>(i);
  }
  throw LookupError("unknown kernel '" + std::string(name) + "'");
}

const KernelFn& KernelTable::at(KernelIndex index) const {
  if (index >= entries_.size()) {
    throw ProtocolError("kernel index " + std::to_string(index) + " out of range (table has " +
                        std::to_string(entries_.size()) + ")");
  }
  return entries_[index].fn;
}

std::vector<std::string> KernelTable::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::uint64_t KernelTable::digest() const {
  auto n = names();
  return kerneltable_digest(n);
}

MediaryAddr ProgramImage::add_global(std::string name, Bytes initial) {
  if (kernels.sealed()) throw std::logic_error("global '" + name + "' registered after handshake");
  for (const auto& g : globals) {
    if (g.name == name) throw std::logic_error("global '" + name + "' registered twice");
  }
  globals.push_back({std::move(name), std::move(initial)});
  return {static_cast<std::uint32_t>(globals.size() - 1)};
}

}  // namespace nodedev
