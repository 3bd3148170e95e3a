#include "nodedev/runtime.hpp"

#include <algorithm>
#include <deque>
#include <future>
#include <iostream>
#include <mutex>
#include <thread>

#include "nodedev/errors.hpp"
#include "nodedev/pool.hpp"
#include "nodedev/worker.hpp"

namespace nodedev {

namespace {

// Upper bound on one Write/Read frame; larger sections are split.
constexpr std::size_t kTransferChunk = std::size_t{1} << 26;

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(CommandTag tag, std::span<const std::byte> payload) = 0;
  virtual Frame receive(Millis timeout) = 0;
  virtual void close() noexcept = 0;
};

class SocketChannel final : public Channel {
 public:
  explicit SocketChannel(Connection conn) : conn_(std::move(conn)) {}
  void send(CommandTag tag, std::span<const std::byte> payload) override {
    conn_.send(tag, payload);
  }
  Frame receive(Millis timeout) override { return conn_.receive(timeout); }
  void close() noexcept override { conn_.close(); }

 private:
  Connection conn_;
};

// Device 0: commands are served by an in-process DeviceServer. Exec runs on
// a separate thread so nowait offloads to the host overlap with the caller.
class LocalChannel final : public Channel {
 public:
  LocalChannel(const ProgramImage& image, std::size_t threads) : server_(image, 0, threads) {}

  void send(CommandTag tag, std::span<const std::byte> payload) override {
    Frame f{tag, Bytes(payload.begin(), payload.end())};
    if (tag == CommandTag::Exec) {
      replies_.push_back(std::async(std::launch::async, [this, f = std::move(f)] {
        return server_.handle(f);
      }));
    } else {
      std::promise<std::optional<Frame>> p;
      p.set_value(server_.handle(f));
      replies_.push_back(p.get_future());
    }
  }

  Frame receive(Millis timeout) override {
    if (replies_.empty()) throw TransportError("no reply outstanding on device 0");
    auto& fut = replies_.front();
    if (fut.wait_for(timeout) != std::future_status::ready) {
      throw TransportError("timed out waiting for reply");
    }
    auto reply = fut.get();
    replies_.pop_front();
    if (!reply) throw TransportError("device 0 sent no reply");
    return std::move(*reply);
  }

  void close() noexcept override {
    for (auto& f : replies_) f.wait();
    replies_.clear();
  }

 private:
  DeviceServer server_;
  std::deque<std::future<std::optional<Frame>>> replies_;
};

}  // namespace

namespace detail {

struct OffloadState {
  std::shared_ptr<Device> device;
  std::vector<MapEntry> maps;
  std::vector<MediaryAddr> addrs;
  // Filled when Done (or Err, or a transport failure) arrives.
  bool completed = false;
  std::uint8_t status = 0;
  std::optional<ErrMsg> device_error;
  std::optional<std::string> transport_error;
  std::atomic<bool> finalized{false};
};

struct Device {
  int index = 0;
  Millis timeout{30000};
  std::unique_ptr<Channel> channel;

  // Everything below is guarded by `guard`.
  mutable std::mutex guard;
  HostMirror mirror;
  std::shared_ptr<OffloadState> owing;  // Exec sent, Done not yet received
  std::optional<std::string> dead;
  int in_flight = 0;
  int max_in_flight = 0;
  bool recording = false;
  std::vector<TranscriptEntry> transcript;

  void record(bool from_host, CommandTag tag, std::span<const std::byte> payload) {
    if (!recording) return;
    auto head = payload.first(std::min(payload.size(), TranscriptEntry::kHeadBytes));
    transcript.push_back({from_host, tag, static_cast<std::uint32_t>(payload.size()),
                          Bytes(head.begin(), head.end())});
  }

  [[noreturn]] void fail(const std::string& why) {
    dead = why;
    throw TransportError("device " + std::to_string(index) + ": " + why);
  }

  void check_alive() const {
    if (dead) throw TransportError("device " + std::to_string(index) + " is unusable: " + *dead);
  }

  void post(CommandTag tag, std::span<const std::byte> payload) {
    check_alive();
    record(true, tag, payload);
    try {
      channel->send(tag, payload);
    } catch (const Error& e) {
      fail(e.what());
    }
    if (tag != CommandTag::Shutdown) {
      ++in_flight;
      max_in_flight = std::max(max_in_flight, in_flight);
    }
  }

  Frame await_reply() {
    Frame f;
    try {
      f = channel->receive(timeout);
    } catch (const Error& e) {
      --in_flight;
      fail(e.what());
    }
    --in_flight;
    record(false, f.tag, f.payload);
    return f;
  }

  // Receives the Done owed by a nowait offload and files it with that
  // offload.
  void drain_owed() {
    if (!owing) return;
    auto state = std::exchange(owing, nullptr);
    Frame f;
    try {
      f = await_reply();
    } catch (const TransportError& e) {
      state->transport_error = e.what();
      state->completed = true;
      throw;
    }
    state->completed = true;
    if (f.tag == CommandTag::Done) {
      try {
        state->status = StatusMsg::decode(f.payload).status;
      } catch (const ProtocolError& e) {
        fail(std::string("bad Done: ") + e.what());
      }
    } else if (f.tag == CommandTag::Err) {
      state->device_error = ErrMsg::decode(f.payload);
    } else {
      state->transport_error = "unexpected " + std::string(tag_name(f.tag)) + " instead of Done";
      fail(*state->transport_error);
    }
  }

  Frame exchange(CommandTag tag, std::span<const std::byte> payload, CommandTag expect) {
    drain_owed();
    post(tag, payload);
    Frame f = await_reply();
    if (f.tag == CommandTag::Err) {
      auto e = ErrMsg::decode(f.payload);
      throw DeviceError(index, e.code, e.message);
    }
    if (f.tag != expect) {
      fail("expected " + std::string(tag_name(expect)) + " in reply to " +
           std::string(tag_name(tag)) + ", got " + std::string(tag_name(f.tag)));
    }
    return f;
  }

  void free_slot(MediaryAddr addr) {
    exchange(CommandTag::Free, FreeCmd{addr.index}.encode(), CommandTag::Ack);
    mirror.release(addr);
  }
};

}  // namespace detail

using detail::Device;
using detail::OffloadState;

struct Runtime::Impl {
  ProgramImage* image = nullptr;
  LaunchOptions options;
  std::size_t threads = 1;
  std::vector<std::shared_ptr<Device>> devices;
  std::vector<WorkerProcess> processes;
  bool shut = false;
};

int Pending::device() const {
  if (!state_) throw std::logic_error("empty Pending handle");
  return state_->device->index;
}

bool Pending::finalized() const noexcept { return state_ && state_->finalized.load(); }

Runtime::Runtime(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Runtime::Runtime(Runtime&&) noexcept = default;
Runtime& Runtime::operator=(Runtime&& other) noexcept {
  if (this != &other) {
    if (impl_) shutdown();
    impl_ = std::move(other.impl_);
  }
  return *this;
}

Runtime::~Runtime() {
  if (!impl_) return;
  try {
    shutdown();
  } catch (const std::exception& e) {
    std::cerr << "nodedev: warning: shutdown failed: " << e.what() << "\n";
  }
}

Runtime Runtime::start(ProgramImage& image, const ClusterConfig& config,
                       const LaunchOptions& options) {
  image.kernels.seal();
  auto impl = std::make_unique<Impl>();
  impl->image = &image;
  impl->options = options;
  impl->threads = options.threads_per_device.value_or(default_pool_width());

  std::vector<std::size_t> global_sizes;
  for (const auto& g : image.globals) global_sizes.push_back(g.initial.size());

  auto make_device = [&](int index, std::unique_ptr<Channel> ch) {
    auto d = std::make_shared<Device>();
    d->index = index;
    d->timeout = options.reply_timeout;
    d->channel = std::move(ch);
    d->mirror.register_globals(global_sizes);
    return d;
  };

  impl->devices.push_back(make_device(0, std::make_unique<LocalChannel>(image, impl->threads)));
  auto workers = spawn_workers(config, options, image.kernels.digest(),
                               static_cast<std::uint32_t>(image.globals.size()));
  for (std::size_t i = 0; i < workers.connections.size(); ++i) {
    impl->devices.push_back(make_device(
        static_cast<int>(i + 1), std::make_unique<SocketChannel>(std::move(workers.connections[i]))));
  }
  impl->processes = std::move(workers.processes);
  return Runtime(std::move(impl));
}

int Runtime::device_count() const noexcept { return static_cast<int>(impl_->devices.size()); }

std::size_t Runtime::threads_per_device() const noexcept { return impl_->threads; }

const ProgramImage& Runtime::image() const noexcept { return *impl_->image; }

Device& Runtime::device_at(int index) const {
  if (index < 0 || index >= device_count()) {
    throw std::out_of_range("no device " + std::to_string(index) + " (runtime has " +
                            std::to_string(device_count()) + ")");
  }
  return *impl_->devices[static_cast<std::size_t>(index)];
}

Pending Runtime::target(int device, std::string_view kernel, std::vector<MapEntry> maps,
                        Bytes scalars, bool nowait) {
  if (impl_->shut) throw std::logic_error("runtime is shut down");
  auto& dev = device_at(device);
  auto kernel_index = impl_->image->kernels.index_of(kernel);

  auto state = std::make_shared<OffloadState>();
  state->device = impl_->devices[static_cast<std::size_t>(device)];
  state->maps = std::move(maps);
  {
    std::lock_guard lk(dev.guard);
    dev.drain_owed();
    dev.check_alive();
    try {
      for (const auto& m : state->maps) {
        auto addr = dev.mirror.reserve(m.byte_count());
        try {
          dev.exchange(CommandTag::Alloc, AllocCmd{addr.index, m.byte_count()}.encode(),
                       CommandTag::Ack);
        } catch (...) {
          dev.mirror.release(addr);
          throw;
        }
        dev.mirror.commit(addr);
        state->addrs.push_back(addr);
      }
      for (std::size_t i = 0; i < state->maps.size(); ++i) {
        const auto& m = state->maps[i];
        if (!m.copies_in()) continue;
        auto section = m.host_in.subspan(m.byte_offset(), m.byte_count());
        for (std::size_t off = 0; off < section.size(); off += kTransferChunk) {
          auto part = section.subspan(off, std::min(kTransferChunk, section.size() - off));
          dev.exchange(CommandTag::Write, WriteCmd{state->addrs[i].index, off, part}.encode(),
                       CommandTag::Ack);
        }
      }
      ExecCmd exec{kernel_index, {}, std::move(scalars)};
      for (auto a : state->addrs) exec.addrs.push_back(a.index);
      dev.post(CommandTag::Exec, exec.encode());
      dev.owing = state;
    } catch (const DeviceError&) {
      // Give back whatever was allocated before the device refused.
      for (auto a : state->addrs) {
        try {
          dev.free_slot(a);
        } catch (const Error&) {
          break;
        }
      }
      throw;
    }
  }
  Pending p(std::move(state));
  if (!nowait) wait(p);
  return p;
}

void Runtime::local_execute(std::string_view kernel, std::vector<MapEntry> maps, Bytes scalars) {
  target(0, kernel, std::move(maps), std::move(scalars), false);
}

void Runtime::wait(Pending& pending) {
  auto state = pending.state_;
  if (!state) throw std::logic_error("wait on an empty Pending handle");
  if (state->finalized.exchange(true)) throw std::logic_error("offload already finalized");
  auto& dev = *state->device;

  std::lock_guard lk(dev.guard);
  if (dev.owing == state) dev.drain_owed();
  if (state->transport_error) {
    throw TransportError("device " + std::to_string(dev.index) + ": " + *state->transport_error);
  }
  dev.check_alive();
  bool ok = state->status == 0 && !state->device_error;
  if (ok) {
    for (std::size_t i = 0; i < state->maps.size(); ++i) {
      const auto& m = state->maps[i];
      if (!m.copies_out()) continue;
      auto section = m.host_out.subspan(m.byte_offset(), m.byte_count());
      for (std::size_t off = 0; off < section.size(); off += kTransferChunk) {
        auto len = std::min(kTransferChunk, section.size() - off);
        auto reply = dev.exchange(CommandTag::Read, ReadCmd{state->addrs[i].index, off, len}.encode(),
                                  CommandTag::Data);
        if (reply.payload.size() != len) {
          dev.fail("Read returned " + std::to_string(reply.payload.size()) + " bytes, expected " +
                   std::to_string(len));
        }
        std::copy(reply.payload.begin(), reply.payload.end(),
                  section.begin() + static_cast<std::ptrdiff_t>(off));
      }
    }
  }
  for (auto a : state->addrs) dev.free_slot(a);
  if (state->device_error) {
    throw DeviceError(dev.index, state->device_error->code, state->device_error->message);
  }
  if (state->status != 0) throw OffloadError(dev.index, state->status);
}

void Runtime::wait_all(std::span<Pending> pending) {
  std::mutex mu;
  std::exception_ptr first;
  {
    std::vector<std::jthread> threads;
    threads.reserve(pending.size());
    for (auto& p : pending) {
      if (!p.valid() || p.finalized()) continue;
      threads.emplace_back([&, pp = &p] {
        try {
          wait(*pp);
        } catch (...) {
          std::lock_guard lk(mu);
          if (!first) first = std::current_exception();
        }
      });
    }
  }
  if (first) std::rethrow_exception(first);
}

void Runtime::shutdown() {
  if (!impl_ || impl_->shut) return;
  impl_->shut = true;
  for (auto& d : impl_->devices) {
    std::lock_guard lk(d->guard);
    if (d->index != 0 && !d->dead) {
      try {
        d->drain_owed();
        d->post(CommandTag::Shutdown, {});
      } catch (const Error& e) {
        std::cerr << "nodedev: warning: device " << d->index << " did not take Shutdown: "
                  << e.what() << "\n";
      }
    }
    d->channel->close();
  }
  auto grace = std::min(impl_->options.reply_timeout, Millis(5000));
  for (int index : reap_workers(impl_->processes, grace)) {
    std::cerr << "nodedev: warning: device " << index << " ignored Shutdown and was killed\n";
  }
}

HostMirror Runtime::mirror_snapshot(int device) const {
  auto& d = device_at(device);
  std::lock_guard lk(d.guard);
  return d.mirror;
}

void Runtime::record_transcripts(bool on) {
  for (auto& d : impl_->devices) {
    std::lock_guard lk(d->guard);
    d->recording = on;
  }
}

std::vector<TranscriptEntry> Runtime::transcript(int device) const {
  auto& d = device_at(device);
  std::lock_guard lk(d.guard);
  return d.transcript;
}

void Runtime::clear_transcripts() {
  for (auto& d : impl_->devices) {
    std::lock_guard lk(d->guard);
    d->transcript.clear();
  }
}

int Runtime::max_in_flight(int device) const {
  auto& d = device_at(device);
  std::lock_guard lk(d.guard);
  return d.max_in_flight;
}

std::vector<WorkerProcess> Runtime::workers() const { return impl_->processes; }

}  // namespace nodedev
