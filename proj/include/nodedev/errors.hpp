#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nodedev {

/// Base class for every runtime failure raised by nodedev.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A peer sent bytes that do not form a valid command, or host and device
/// state diverged (unknown slot, unknown kernel index).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Connection lost, reply timed out, or socket call failed.
class TransportError : public Error {
 public:
  using Error::Error;
};

/// The peer closed the connection on a frame boundary.
class EndOfStream : public TransportError {
 public:
  EndOfStream() : TransportError("connection closed by peer") {}
};

class BootstrapError : public Error {
 public:
  using Error::Error;
};

/// Host and worker kerneltables were built from different registration
/// sequences.
class KernelTableDivergence : public BootstrapError {
 public:
  using BootstrapError::BootstrapError;
};

class ConfigError : public Error {
 public:
  ConfigError(std::size_t line, const std::string& what)
      : Error("config line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class ResourceError : public Error {
 public:
  using Error::Error;
};

/// A device answered a command with an Err frame.
class DeviceError : public Error {
 public:
  DeviceError(int device, std::uint8_t code, const std::string& message)
      : Error("device " + std::to_string(device) + ": " + message),
        device_(device),
        code_(code) {}
  int device() const noexcept { return device_; }
  std::uint8_t code() const noexcept { return code_; }

 private:
  int device_;
  std::uint8_t code_;
};

/// A kernel finished with a non-zero status.
class OffloadError : public Error {
 public:
  OffloadError(int device, int status)
      : Error("offload to device " + std::to_string(device) + " failed with status " +
              std::to_string(status)),
        device_(device),
        status_(status) {}
  int device() const noexcept { return device_; }
  int status() const noexcept { return status_; }

 private:
  int device_;
  int status_;
};

}  // namespace nodedev
