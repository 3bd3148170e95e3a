#pragma once

// Host/device command protocol.
//
// Every message is a frame:
//
//   magic "MPND" (4) | version u16 | tag u8 | payload_len u32 | payload
//
// All integers are little-endian and fixed width.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nodedev {

using Bytes = std::vector<std::byte>;

enum class CommandTag : std::uint8_t {
  Hello = 0,
  Alloc = 1,
  Free = 2,
  Write = 3,
  Read = 4,
  Exec = 5,
  Shutdown = 6,
  Ack = 7,
  Data = 8,
  Done = 9,
  Err = 10,
};

inline constexpr std::array<char, 4> kFrameMagic{'M', 'P', 'N', 'D'};
inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 11;

/// True for tags only the host may send.
bool is_host_tag(CommandTag tag) noexcept;
bool is_valid_tag(std::uint8_t raw) noexcept;
std::string_view tag_name(CommandTag tag) noexcept;

struct Frame {
  CommandTag tag = CommandTag::Ack;
  Bytes payload;

  bool operator==(const Frame&) const = default;
};

Bytes encode_frame(CommandTag tag, std::span<const std::byte> payload);

/// Pull-based byte stream. read_some returns 0 only at end of stream.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::size_t read_some(std::span<std::byte> out) = 0;
};

class SpanSource final : public ByteSource {
 public:
  explicit SpanSource(std::span<const std::byte> data) : data_(data) {}
  std::size_t read_some(std::span<std::byte> out) override;
  std::size_t consumed() const noexcept { return pos_; }

 private:
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

/// Reads exactly one frame. Throws EndOfStream if the source is exhausted
/// before the first header byte, ProtocolError for bad magic, bad version,
/// unknown tag, or a stream that ends mid-frame.
Frame decode_frame(ByteSource& source);

// Little-endian payload builder and parser.

class PayloadWriter {
 public:
  PayloadWriter& u8(std::uint8_t v);
  PayloadWriter& u16(std::uint16_t v);
  PayloadWriter& u32(std::uint32_t v);
  PayloadWriter& u64(std::uint64_t v);
  PayloadWriter& bytes(std::span<const std::byte> v);
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::span<const std::byte> data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::span<const std::byte> bytes(std::size_t n);
  std::span<const std::byte> rest();
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  /// ProtocolError if unread bytes remain.
  void expect_end() const;

 private:
  std::span<const std::byte> take(std::size_t n);
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

// Typed payloads. encode() produces the payload only (no frame header).

struct HelloMsg {
  std::uint16_t version = kProtocolVersion;
  std::uint64_t digest = 0;
  std::uint32_t global_count = 0;
  std::uint32_t device_index = 0;

  Bytes encode() const;
  static HelloMsg decode(std::span<const std::byte> payload);
};

struct AllocCmd {
  std::uint32_t addr = 0;
  std::uint64_t nbytes = 0;

  Bytes encode() const;
  static AllocCmd decode(std::span<const std::byte> payload);
};

struct FreeCmd {
  std::uint32_t addr = 0;

  Bytes encode() const;
  static FreeCmd decode(std::span<const std::byte> payload);
};

/// length is implied by data.size().
struct WriteCmd {
  std::uint32_t addr = 0;
  std::uint64_t offset = 0;
  std::span<const std::byte> data;

  Bytes encode() const;
  /// The returned data view aliases `payload`.
  static WriteCmd decode(std::span<const std::byte> payload);
};

struct ReadCmd {
  std::uint32_t addr = 0;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;

  Bytes encode() const;
  static ReadCmd decode(std::span<const std::byte> payload);
};

struct ExecCmd {
  std::uint32_t kernel_index = 0;
  std::vector<std::uint32_t> addrs;
  Bytes scalars;

  Bytes encode() const;
  static ExecCmd decode(std::span<const std::byte> payload);
};

/// Ack and Done payload.
struct StatusMsg {
  std::uint8_t status = 0;

  Bytes encode() const;
  static StatusMsg decode(std::span<const std::byte> payload);
};

enum class ErrCode : std::uint8_t {
  Malformed = 1,
  TableViolation = 2,
  OutOfBounds = 3,
  UnknownKernel = 4,
  Resource = 5,
  UnexpectedTag = 6,
};

struct ErrMsg {
  std::uint8_t code = 0;
  std::string message;

  Bytes encode() const;
  static ErrMsg decode(std::span<const std::byte> payload);
};

/// FNV-1a 64 over the names joined by '\n'.
std::uint64_t kerneltable_digest(std::span<const std::string> names) noexcept;

}  // namespace nodedev
