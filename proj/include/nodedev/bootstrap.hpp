#pragma once

// Cluster configuration, worker spawning, and the Hello handshake.
//
// Config format: one node per line, the host name or IP address optionally
// followed by a multiplicity D, which is the same as listing the node on D
// lines. Blank lines and lines starting with '#' are ignored. Devices are
// numbered 1..N in file order; device 0 is the host process itself.

#include <sys/types.h>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nodedev/transport.hpp"

namespace nodedev {

struct NodeSpec {
  std::string host;
  int multiplicity = 1;

  bool operator==(const NodeSpec&) const = default;
};

struct ClusterConfig {
  std::vector<NodeSpec> nodes;

  /// Number of worker devices (excludes the host).
  int worker_count() const noexcept;
  /// Host name of device i+1 at position i.
  std::vector<std::string> device_hosts() const;
};

/// ConfigError carrying the 1-based line number on a bad multiplicity.
ClusterConfig parse_config(std::string_view text);
ClusterConfig load_config(const std::string& path);
/// Reads NODEDEV_CONFIG if set, otherwise an empty (host-only) config.
ClusterConfig config_from_env();

/// 1 + worker_count(): the host counts as device 0.
int device_count(const ClusterConfig& config) noexcept;

enum class LaunchMode { Local, Remote };

struct LaunchOptions {
  /// Local starts every device as a subprocess on this machine regardless of
  /// the configured host names. Remote runs `launcher` per device.
  LaunchMode mode = LaunchMode::Local;
  /// Remote launch argv template. {host} and {exe} are substituted inside
  /// any element; an element equal to {args} expands to the worker flags.
  std::vector<std::string> launcher{"ssh", "{host}", "{exe}", "{args}"};
  /// Empty means this process's own executable.
  std::string worker_executable;
  /// Exported to workers as NODEDEV_THREADS when set.
  std::optional<std::size_t> threads_per_device;
  Millis connect_timeout{30000};
  Millis reply_timeout{30000};
  std::string listen_host = "127.0.0.1";
  /// Address workers dial; empty means listen_host, or this machine's host
  /// name when listening on 0.0.0.0.
  std::string advertise_host;

  /// Defaults, with NODEDEV_TIMEOUT_SECS applied to both timeouts.
  static LaunchOptions from_env();
};

struct WorkerProcess {
  int device_index = 0;
  std::string host;
  pid_t pid = -1;
  std::optional<int> exit_status;
};

struct WorkerSet {
  /// connections[i] belongs to device i+1.
  std::vector<Connection> connections;
  std::vector<WorkerProcess> processes;
};

/// Reads the worker's Hello and checks protocol version, kerneltable
/// digest, and global count. Returns the device index the worker reports.
/// KernelTableDivergence on a digest mismatch, BootstrapError otherwise.
int handshake(Connection& conn, std::uint64_t expected_digest, std::uint32_t expected_globals,
              Millis timeout);

/// Starts one worker per device and completes every handshake. On any
/// failure all started processes are killed and a BootstrapError naming the
/// device index and host is thrown.
WorkerSet spawn_workers(const ClusterConfig& config, const LaunchOptions& options,
                        std::uint64_t digest, std::uint32_t global_count);

/// Waits up to `grace` for the processes to exit, then kills the rest.
/// Fills exit_status (128+signal for signalled processes). Returns the
/// device indices that had to be killed.
std::vector<int> reap_workers(std::span<WorkerProcess> processes, Millis grace);

/// Path of the running executable.
std::string self_executable();

}  // namespace nodedev
