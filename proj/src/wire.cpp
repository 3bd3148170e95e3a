#include "nodedev/wire.hpp"

#include <algorithm>
#include <cstring>
#include <limits>

#include "nodedev/errors.hpp"

namespace nodedev {

namespace {

template <typename T>
void put_le(Bytes& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::span<const std::byte> in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(in[i])) << (8 * i);
  }
  return static_cast<T>(v);
}

// Fills `out` completely or reports how much was read before end of stream.
std::size_t read_full(ByteSource& source, std::span<std::byte> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    std::size_t n = source.read_some(out.subspan(got));
    if (n == 0) break;
    got += n;
  }
  return got;
}

}  // namespace

bool is_host_tag(CommandTag tag) noexcept {
  switch (tag) {
    case CommandTag::Alloc:
    case CommandTag::Free:
    case CommandTag::Write:
    case CommandTag::Read:
    case CommandTag::Exec:
    case CommandTag::Shutdown:
      return true;
    default:
      return false;
  }
}

bool is_valid_tag(std::uint8_t raw) noexcept {
  return raw <= static_cast<std::uint8_t>(CommandTag::Err);
}

std::string_view tag_name(CommandTag tag) noexcept {
  switch (tag) {
    case CommandTag::Hello: return "Hello";
    case CommandTag::Alloc: return "Alloc";
    case CommandTag::Free: return "Free";
    case CommandTag::Write: return "Write";
    case CommandTag::Read: return "Read";
    case CommandTag::Exec: return "Exec";
    case CommandTag::Shutdown: return "Shutdown";
    case CommandTag::Ack: return "Ack";
    case CommandTag::Data: return "Data";
    case CommandTag::Done: return "Done";
    case CommandTag::Err: return "Err";
  }
  return "?";
}

Bytes encode_frame(CommandTag tag, std::span<const std::byte> payload) {
  if (payload.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ProtocolError("payload of " + std::to_string(payload.size()) +
                        " bytes does not fit a frame");
  }
  Bytes out;
  out.reserve(kFrameHeaderSize + payload.size());
  for (char c : kFrameMagic) out.push_back(static_cast<std::byte>(c));
  put_le<std::uint16_t>(out, kProtocolVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tag));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::size_t SpanSource::read_some(std::span<std::byte> out) {
  std::size_t n = std::min(out.size(), data_.size() - pos_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
  pos_ += n;
  return n;
}

Frame decode_frame(ByteSource& source) {
  std::array<std::byte, kFrameHeaderSize> header{};
  std::size_t got = read_full(source, header);
  if (got == 0) throw EndOfStream();
  if (got < header.size()) {
    throw ProtocolError("truncated frame header (" + std::to_string(got) + " of " +
                        std::to_string(header.size()) + " bytes)");
  }
  if (std::memcmp(header.data(), kFrameMagic.data(), kFrameMagic.size()) != 0) {
    throw ProtocolError("bad frame magic");
  }
  auto h = std::span<const std::byte>(header);
  auto version = get_le<std::uint16_t>(h.subspan(4));
  if (version != kProtocolVersion) {
    throw ProtocolError("unsupported protocol version " + std::to_string(version));
  }
  auto raw_tag = get_le<std::uint8_t>(h.subspan(6));
  if (!is_valid_tag(raw_tag)) {
    throw ProtocolError("unknown command tag " + std::to_string(raw_tag));
  }
  auto len = get_le<std::uint32_t>(h.subspan(7));

  Frame frame;
  frame.tag = static_cast<CommandTag>(raw_tag);
  // Grow in bounded steps so a bogus length on a short stream cannot force a
  // huge allocation up front.
  constexpr std::size_t kStep = std::size_t{1} << 20;
  std::size_t filled = 0;
  while (filled < len) {
    std::size_t want = std::min<std::size_t>(kStep, len - filled);
    frame.payload.resize(filled + want);
    std::size_t n = read_full(source, std::span(frame.payload).subspan(filled, want));
    filled += n;
    if (n < want) {
      throw ProtocolError("truncated frame payload (" + std::to_string(filled) + " of " +
                          std::to_string(len) + " bytes)");
    }
  }
  return frame;
}

PayloadWriter& PayloadWriter::u8(std::uint8_t v) {
  put_le(buf_, v);
  return *this;
}
PayloadWriter& PayloadWriter::u16(std::uint16_t v) {
  put_le(buf_, v);
  return *this;
}
PayloadWriter& PayloadWriter::u32(std::uint32_t v) {
  put_le(buf_, v);
  return *this;
}
PayloadWriter& PayloadWriter::u64(std::uint64_t v) {
  put_le(buf_, v);
  return *this;
}
PayloadWriter& PayloadWriter::bytes(std::span<const std::byte> v) {
  buf_.insert(buf_.end(), v.begin(), v.end());
  return *this;
}

std::span<const std::byte> PayloadReader::take(std::size_t n) {
  if (n > remaining()) {
    throw ProtocolError("payload too short: need " + std::to_string(n) + " more bytes, have " +
                        std::to_string(remaining()));
  }
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t PayloadReader::u8() { return get_le<std::uint8_t>(take(1)); }
std::uint16_t PayloadReader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t PayloadReader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t PayloadReader::u64() { return get_le<std::uint64_t>(take(8)); }
std::span<const std::byte> PayloadReader::bytes(std::size_t n) { return take(n); }
std::span<const std::byte> PayloadReader::rest() { return take(remaining()); }

void PayloadReader::expect_end() const {
  if (remaining() != 0) {
    throw ProtocolError("payload has " + std::to_string(remaining()) + " trailing bytes");
  }
}

Bytes HelloMsg::encode() const {
  return PayloadWriter().u16(version).u64(digest).u32(global_count).u32(device_index).take();
}

HelloMsg HelloMsg::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  HelloMsg m;
  m.version = r.u16();
  m.digest = r.u64();
  m.global_count = r.u32();
  m.device_index = r.u32();
  r.expect_end();
  return m;
}

Bytes AllocCmd::encode() const { return PayloadWriter().u32(addr).u64(nbytes).take(); }

AllocCmd AllocCmd::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  AllocCmd m;
  m.addr = r.u32();
  m.nbytes = r.u64();
  r.expect_end();
  return m;
}

Bytes FreeCmd::encode() const { return PayloadWriter().u32(addr).take(); }

FreeCmd FreeCmd::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  FreeCmd m;
  m.addr = r.u32();
  r.expect_end();
  return m;
}

Bytes WriteCmd::encode() const {
  return PayloadWriter().u32(addr).u64(offset).u64(data.size()).bytes(data).take();
}

WriteCmd WriteCmd::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  WriteCmd m;
  m.addr = r.u32();
  m.offset = r.u64();
  auto length = r.u64();
  if (length != r.remaining()) {
    throw ProtocolError("Write length " + std::to_string(length) + " does not match " +
                        std::to_string(r.remaining()) + " data bytes");
  }
  m.data = r.rest();
  return m;
}

Bytes ReadCmd::encode() const { return PayloadWriter().u32(addr).u64(offset).u64(length).take(); }

ReadCmd ReadCmd::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  ReadCmd m;
  m.addr = r.u32();
  m.offset = r.u64();
  m.length = r.u64();
  r.expect_end();
  return m;
}

Bytes ExecCmd::encode() const {
  PayloadWriter w;
  w.u32(kernel_index).u32(static_cast<std::uint32_t>(addrs.size()));
  for (auto a : addrs) w.u32(a);
  w.u32(static_cast<std::uint32_t>(scalars.size())).bytes(scalars);
  return w.take();
}

ExecCmd ExecCmd::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  ExecCmd m;
  m.kernel_index = r.u32();
  auto n = r.u32();
  if (std::size_t{n} * 4 > r.remaining()) {
    throw ProtocolError("Exec claims " + std::to_string(n) + " addresses");
  }
  m.addrs.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) m.addrs.push_back(r.u32());
  auto scalar_len = r.u32();
  auto s = r.bytes(scalar_len);
  m.scalars.assign(s.begin(), s.end());
  r.expect_end();
  return m;
}

Bytes StatusMsg::encode() const { return PayloadWriter().u8(status).take(); }

StatusMsg StatusMsg::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  StatusMsg m;
  m.status = r.u8();
  r.expect_end();
  return m;
}

Bytes ErrMsg::encode() const {
  PayloadWriter w;
  w.u8(code);
  w.bytes(std::as_bytes(std::span(message.data(), message.size())));
  return w.take();
}

ErrMsg ErrMsg::decode(std::span<const std::byte> payload) {
  PayloadReader r(payload);
  ErrMsg m;
  m.code = r.u8();
  auto text = r.rest();
  m.message.assign(reinterpret_cast<const char*>(text.data()), text.size());
  return m;
}

std::uint64_t kerneltable_digest(std::span<const std::string> names) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i != 0) mix('\n');
    for (char c : names[i]) mix(static_cast<unsigned char>(c));
  }
  return h;
}

}  // namespace nodedev
