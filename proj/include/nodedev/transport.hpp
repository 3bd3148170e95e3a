#pragma once

// Framed command exchange over TCP stream sockets.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "nodedev/wire.hpp"

namespace nodedev {

using Millis = std::chrono::milliseconds;

/// Owns a socket file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) noexcept : fd_(fd) {}
  ~Socket();
  Socket(Socket&& other) noexcept;
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept;

 private:
  int fd_ = -1;
};

class Listener {
 public:
  /// Binds host:port (port 0 picks a free port) and listens.
  static Listener bind(const std::string& host, std::uint16_t port = 0);

  std::uint16_t port() const noexcept { return port_; }
  /// nullopt if nothing connects within `timeout`.
  std::optional<Socket> accept(Millis timeout);

 private:
  Socket sock_;
  std::uint16_t port_ = 0;
};

/// Retries until the listener is reachable or timeout elapses.
Socket connect_to(const std::string& host, std::uint16_t port, Millis timeout);

/// "HOST:PORT" -> (host, port). std::invalid_argument on bad input.
std::pair<std::string, std::uint16_t> split_endpoint(const std::string& endpoint);

/// One framed stream. Not thread-safe: callers serialize exchanges.
class Connection {
 public:
  explicit Connection(Socket sock);

  void send(CommandTag tag, std::span<const std::byte> payload);
  /// Throws TransportError on timeout, EndOfStream when the peer closed on a
  /// frame boundary, ProtocolError for a malformed frame.
  Frame receive(Millis timeout);
  /// Blocks without a deadline.
  Frame receive();

  bool open() const noexcept { return sock_.valid(); }
  void close() noexcept { sock_.close(); }

 private:
  Frame receive_until(std::optional<std::chrono::steady_clock::time_point> deadline);
  Socket sock_;
};

}  // namespace nodedev
