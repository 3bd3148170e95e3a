#pragma once

// Device side: executes host commands against a DeviceTable, one at a time.

#include <optional>
#include <vector>

#include "nodedev/kernel.hpp"
#include "nodedev/medtable.hpp"
#include "nodedev/registry.hpp"
#include "nodedev/transport.hpp"

namespace nodedev {

class DeviceServer {
 public:
  /// Registers the image's globals in a fresh table and starts a pool of
  /// `threads` width for kernels.
  DeviceServer(const ProgramImage& image, int device_index, std::size_t threads);

  /// Reply to one host command, or nullopt for Shutdown. Table violations,
  /// malformed payloads, and non-host tags produce an Err reply; the server
  /// stays usable.
  std::optional<Frame> handle(const Frame& command);

  int device_index() const noexcept { return device_index_; }
  const DeviceTable& table() const noexcept { return table_; }
  std::size_t threads() const noexcept { return pool_.width(); }

 private:
  Frame exec(const ExecCmd& cmd);

  const ProgramImage& image_;
  int device_index_;
  DeviceTable table_;
  WorkerPool pool_;
};

/// Serves frames until Shutdown (returns 0) or connection loss (returns 1).
/// A frame that cannot be decoded at all gets an Err reply and ends the loop
/// with status 2, since the stream can no longer be resynchronized.
int command_loop(Connection& conn, DeviceServer& server);

struct WorkerArgs {
  int device_index = 0;
  std::string host;
  std::uint16_t port = 0;
};

/// Parses `--worker --device-index N --connect HOST:PORT`. nullopt when
/// --worker is absent; std::invalid_argument when it is present but the
/// rest is malformed.
std::optional<WorkerArgs> parse_worker_args(int argc, const char* const* argv);

/// Connects back to the host, sends Hello, and runs the command loop.
int worker_main(const WorkerArgs& args, ProgramImage& image);

/// Entry hook for executables that double as workers: returns the worker's
/// exit status if argv asks for worker mode.
std::optional<int> run_worker_if_requested(int argc, const char* const* argv,
                                           ProgramImage& image);

}  // namespace nodedev
