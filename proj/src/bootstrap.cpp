#include "nodedev/bootstrap.hpp"

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "nodedev/errors.hpp"

extern char** environ;

namespace nodedev {

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t b = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

std::string device_label(int index, const std::string& host) {
  return "device " + std::to_string(index) + " (" + host + ")";
}

std::string this_host_name() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof buf - 1) != 0) return "localhost";
  return buf;
}

// Decodes a waitpid status into an exit code, 128+N for signal N.
int exit_code(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return -1;
}

std::vector<std::string> worker_argv(const LaunchOptions& opts, const std::string& exe,
                                     const std::string& host, int device,
                                     const std::string& endpoint) {
  std::vector<std::string> flags{"--worker", "--device-index", std::to_string(device), "--connect",
                                 endpoint};
  if (opts.mode == LaunchMode::Local) {
    std::vector<std::string> argv{exe};
    argv.insert(argv.end(), flags.begin(), flags.end());
    return argv;
  }
  auto substitute = [&](std::string s) {
    for (auto [key, value] : {std::pair<std::string, std::string>{"{host}", host},
                              {"{exe}", exe},
                              {"{device}", std::to_string(device)}}) {
      for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
        s.replace(pos, key.size(), value);
      }
    }
    return s;
  };
  std::vector<std::string> argv;
  for (const auto& t : opts.launcher) {
    if (t == "{args}") {
      argv.insert(argv.end(), flags.begin(), flags.end());
    } else {
      argv.push_back(substitute(t));
    }
  }
  if (argv.empty()) throw BootstrapError("remote launcher template is empty");
  return argv;
}

pid_t launch(const std::vector<std::string>& argv, const LaunchOptions& opts) {
  std::vector<std::string> env_store;
  for (char** e = environ; *e; ++e) {
    if (opts.threads_per_device && std::strncmp(*e, "NODEDEV_THREADS=", 16) == 0) continue;
    env_store.emplace_back(*e);
  }
  if (opts.threads_per_device) {
    env_store.push_back("NODEDEV_THREADS=" + std::to_string(*opts.threads_per_device));
  }
  std::vector<char*> envp;
  for (auto& s : env_store) envp.push_back(s.data());
  envp.push_back(nullptr);
  std::vector<std::string> args_store(argv);
  std::vector<char*> args;
  for (auto& s : args_store) args.push_back(s.data());
  args.push_back(nullptr);

  pid_t pid = -1;
  int rc = ::posix_spawnp(&pid, args[0], nullptr, nullptr, args.data(), envp.data());
  if (rc != 0) {
    throw BootstrapError("cannot start '" + argv[0] + "': " + std::strerror(rc));
  }
  return pid;
}

void kill_all(std::span<WorkerProcess> procs) {
  for (auto& p : procs) {
    if (p.pid > 0 && !p.exit_status) ::kill(p.pid, SIGKILL);
  }
  reap_workers(procs, Millis(0));
}

}  // namespace

int ClusterConfig::worker_count() const noexcept {
  int n = 0;
  for (const auto& node : nodes) n += node.multiplicity;
  return n;
}

std::vector<std::string> ClusterConfig::device_hosts() const {
  std::vector<std::string> out;
  for (const auto& node : nodes) {
    for (int i = 0; i < node.multiplicity; ++i) out.push_back(node.host);
  }
  return out;
}

ClusterConfig parse_config(std::string_view text) {
  ClusterConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    auto tokens = split_ws(line);
    if (tokens.empty() || tokens[0].front() == '#') continue;
    if (tokens.size() > 2) {
      throw ConfigError(line_no, "expected 'HOST [COUNT]', got '" + std::string(line) + "'");
    }
    NodeSpec node{std::string(tokens[0]), 1};
    if (tokens.size() == 2) {
      auto t = tokens[1];
      int v = 0;
      auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec != std::errc() || end != t.data() + t.size()) {
        throw ConfigError(line_no, "device count '" + std::string(t) + "' is not an integer");
      }
      if (v <= 0) {
        throw ConfigError(line_no, "device count must be positive, got " + std::to_string(v));
      }
      node.multiplicity = v;
    }
    cfg.nodes.push_back(std::move(node));
  }
  return cfg;
}

ClusterConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw BootstrapError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

ClusterConfig config_from_env() {
  const char* path = std::getenv("NODEDEV_CONFIG");
  if (!path || !*path) return {};
  return load_config(path);
}

int device_count(const ClusterConfig& config) noexcept { return 1 + config.worker_count(); }

LaunchOptions LaunchOptions::from_env() {
  LaunchOptions opts;
  if (const char* env = std::getenv("NODEDEV_TIMEOUT_SECS")) {
    try {
      double secs = std::stod(env);
      if (secs > 0) {
        opts.reply_timeout = Millis(static_cast<long long>(secs * 1000));
        opts.connect_timeout = opts.reply_timeout;
      }
    } catch (const std::exception&) {
      std::cerr << "nodedev: warning: ignoring NODEDEV_TIMEOUT_SECS='" << env << "'\n";
    }
  }
  return opts;
}

std::string self_executable() {
  std::vector<char> buf(4096);
  ssize_t n = ::readlink("/proc/self/exe", buf.data(), buf.size() - 1);
  if (n <= 0) throw BootstrapError("cannot locate own executable");
  return std::string(buf.data(), static_cast<std::size_t>(n));
}

int handshake(Connection& conn, std::uint64_t expected_digest, std::uint32_t expected_globals,
              Millis timeout) {
  Frame f;
  try {
    f = conn.receive(timeout);
  } catch (const Error& e) {
    throw BootstrapError(std::string("no Hello from worker: ") + e.what());
  }
  if (f.tag != CommandTag::Hello) {
    throw BootstrapError("expected Hello, got " + std::string(tag_name(f.tag)));
  }
  HelloMsg hello;
  try {
    hello = HelloMsg::decode(f.payload);
  } catch (const ProtocolError& e) {
    throw BootstrapError(std::string("malformed Hello: ") + e.what());
  }
  if (hello.version != kProtocolVersion) {
    throw BootstrapError("device " + std::to_string(hello.device_index) + " speaks protocol " +
                         std::to_string(hello.version) + ", host speaks " +
                         std::to_string(kProtocolVersion));
  }
  if (hello.digest != expected_digest) {
    std::ostringstream msg;
    msg << "kerneltable divergence: device " << hello.device_index << " digest " << std::hex
        << hello.digest << " != host digest " << expected_digest;
    throw KernelTableDivergence(msg.str());
  }
  if (hello.global_count != expected_globals) {
    throw BootstrapError("device " + std::to_string(hello.device_index) + " registered " +
                         std::to_string(hello.global_count) + " globals, host registered " +
                         std::to_string(expected_globals));
  }
  return static_cast<int>(hello.device_index);
}

WorkerSet spawn_workers(const ClusterConfig& config, const LaunchOptions& opts,
                        std::uint64_t digest, std::uint32_t global_count) {
  WorkerSet set;
  auto hosts = config.device_hosts();
  if (hosts.empty()) return set;

  auto listener = Listener::bind(opts.listen_host);
  std::string advertise = opts.advertise_host;
  if (advertise.empty()) {
    advertise = opts.listen_host == "0.0.0.0" ? this_host_name() : opts.listen_host;
  }
  std::string endpoint = advertise + ":" + std::to_string(listener.port());
  std::string exe = opts.worker_executable.empty() ? self_executable() : opts.worker_executable;

  std::vector<std::optional<Connection>> conns(hosts.size());
  try {
    for (std::size_t i = 0; i < hosts.size(); ++i) {
      int device = static_cast<int>(i + 1);
      WorkerProcess proc{device, hosts[i], -1, std::nullopt};
      try {
        proc.pid = launch(worker_argv(opts, exe, hosts[i], device, endpoint), opts);
      } catch (const BootstrapError& e) {
        throw BootstrapError(device_label(device, hosts[i]) + ": " + e.what());
      }
      set.processes.push_back(std::move(proc));
    }

    auto deadline = Clock::now() + opts.connect_timeout;
    std::size_t connected = 0;
    while (connected < hosts.size()) {
      // A worker that dies before dialing back will never connect.
      for (auto& p : set.processes) {
        if (conns[p.device_index - 1] || p.exit_status) continue;
        int status = 0;
        if (::waitpid(p.pid, &status, WNOHANG) == p.pid) {
          p.exit_status = exit_code(status);
          throw BootstrapError(device_label(p.device_index, p.host) +
                               " exited with status " + std::to_string(*p.exit_status) +
                               " before connecting");
        }
      }
      auto now = Clock::now();
      if (now >= deadline) {
        for (auto& p : set.processes) {
          if (!conns[p.device_index - 1]) {
            throw BootstrapError(device_label(p.device_index, p.host) + " did not connect within " +
                                 std::to_string(opts.connect_timeout.count()) + " ms");
          }
        }
      }
      auto slice = std::min<Millis>(Millis(100),
                                    std::chrono::duration_cast<Millis>(deadline - now));
      auto sock = listener.accept(std::max(slice, Millis(1)));
      if (!sock) continue;
      Connection conn(std::move(*sock));
      auto left = std::chrono::duration_cast<Millis>(deadline - Clock::now());
      int index = handshake(conn, digest, global_count, std::max(left, Millis(1)));
      if (index < 1 || index > static_cast<int>(hosts.size())) {
        throw BootstrapError("worker reported device index " + std::to_string(index) +
                             ", expected 1.." + std::to_string(hosts.size()));
      }
      if (conns[index - 1]) {
        throw BootstrapError("two workers claim device index " + std::to_string(index));
      }
      conns[index - 1] = std::move(conn);
      ++connected;
    }
  } catch (...) {
    conns.clear();
    kill_all(set.processes);
    throw;
  }
  for (auto& c : conns) set.connections.push_back(std::move(*c));
  return set;
}

std::vector<int> reap_workers(std::span<WorkerProcess> processes, Millis grace) {
  auto deadline = Clock::now() + grace;
  std::vector<int> killed;
  while (true) {
    bool pending = false;
    for (auto& p : processes) {
      if (p.pid <= 0 || p.exit_status) continue;
      int status = 0;
      pid_t r = ::waitpid(p.pid, &status, WNOHANG);
      if (r == p.pid) {
        p.exit_status = exit_code(status);
      } else if (r < 0 && errno == ECHILD) {
        p.exit_status = -1;
      } else {
        pending = true;
      }
    }
    if (!pending) break;
    if (Clock::now() >= deadline) {
      for (auto& p : processes) {
        if (p.pid <= 0 || p.exit_status) continue;
        ::kill(p.pid, SIGKILL);
        int status = 0;
        ::waitpid(p.pid, &status, 0);
        p.exit_status = exit_code(status);
        killed.push_back(p.device_index);
      }
      break;
    }
    std::this_thread::sleep_for(Millis(5));
  }
  return killed;
}

}  // namespace nodedev
