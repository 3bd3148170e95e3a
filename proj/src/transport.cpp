#include "nodedev/transport.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "nodedev/errors.hpp"

namespace nodedev {

namespace {

using Clock = std::chrono::steady_clock;

std::string errno_str(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

int remaining_ms(std::optional<Clock::time_point> deadline) {
  if (!deadline) return -1;
  auto left = std::chrono::duration_cast<Millis>(*deadline - Clock::now()).count();
  return left < 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

struct AddrInfoDeleter {
  void operator()(addrinfo* p) const noexcept { freeaddrinfo(p); }
};

std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const std::string& host, std::uint16_t port,
                                                   bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  auto service = std::to_string(port);
  int rc = getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &res);
  if (rc != 0) {
    throw TransportError("cannot resolve '" + host + "': " + gai_strerror(rc));
  }
  return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}

class SocketSource final : public ByteSource {
 public:
  SocketSource(int fd, std::optional<Clock::time_point> deadline) : fd_(fd), deadline_(deadline) {}

  std::size_t read_some(std::span<std::byte> out) override {
    while (true) {
      pollfd p{fd_, POLLIN, 0};
      int rc = ::poll(&p, 1, remaining_ms(deadline_));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw TransportError(errno_str("poll"));
      }
      if (rc == 0) throw TransportError("timed out waiting for reply");
      ssize_t n = ::recv(fd_, out.data(), out.size(), 0);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        if (errno == ECONNRESET) return 0;
        throw TransportError(errno_str("recv"));
      }
      return static_cast<std::size_t>(n);
    }
  }

 private:
  int fd_;
  std::optional<Clock::time_point> deadline_;
};

}  // namespace

Socket::~Socket() { close(); }

Socket::Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

void Socket::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

Listener Listener::bind(const std::string& host, std::uint16_t port) {
  auto ai = resolve(host, port, true);
  Socket s(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
  if (!s.valid()) throw TransportError(errno_str("socket"));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) != 0) throw TransportError(errno_str("bind"));
  if (::listen(s.fd(), 128) != 0) throw TransportError(errno_str("listen"));
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&bound), &len) != 0) {
    throw TransportError(errno_str("getsockname"));
  }
  Listener l;
  l.sock_ = std::move(s);
  l.port_ = ntohs(bound.sin_port);
  return l;
}

std::optional<Socket> Listener::accept(Millis timeout) {
  auto deadline = Clock::now() + timeout;
  while (true) {
    pollfd p{sock_.fd(), POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_str("poll"));
    }
    if (rc == 0) return std::nullopt;
    int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      throw TransportError(errno_str("accept"));
    }
    return Socket(fd);
  }
}

Socket connect_to(const std::string& host, std::uint16_t port, Millis timeout) {
  auto deadline = Clock::now() + timeout;
  auto ai = resolve(host, port, false);
  while (true) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!s.valid()) throw TransportError(errno_str("socket"));
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) return s;
    if (Clock::now() >= deadline) {
      throw TransportError("cannot connect to " + host + ":" + std::to_string(port) + ": " +
                           std::strerror(errno));
    }
    std::this_thread::sleep_for(Millis(50));
  }
}

std::pair<std::string, std::uint16_t> split_endpoint(const std::string& endpoint) {
  auto colon = endpoint.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size()) {
    throw std::invalid_argument("expected HOST:PORT, got '" + endpoint + "'");
  }
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(endpoint.substr(colon + 1), &used);
    if (used != endpoint.size() - colon - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw std::invalid_argument("bad port in '" + endpoint + "'");
  }
  if (port == 0 || port > 65535) throw std::invalid_argument("bad port in '" + endpoint + "'");
  return {endpoint.substr(0, colon), static_cast<std::uint16_t>(port)};
}

Connection::Connection(Socket sock) : sock_(std::move(sock)) {
  int one = 1;
  ::setsockopt(sock_.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

void Connection::send(CommandTag tag, std::span<const std::byte> payload) {
  if (!open()) throw TransportError("connection is closed");
  auto bytes = encode_frame(tag, payload);
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    ssize_t n = ::send(sock_.fd(), bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw TransportError(errno_str("send"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

Frame Connection::receive(Millis timeout) { return receive_until(Clock::now() + timeout); }

Frame Connection::receive() { return receive_until(std::nullopt); }

Frame Connection::receive_until(std::optional<Clock::time_point> deadline) {
  if (!open()) throw TransportError("connection is closed");
  SocketSource src(sock_.fd(), deadline);
  return decode_frame(src);
}

}  // namespace nodedev
