#include "nodedev/worker.hpp"

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

#include "nodedev/errors.hpp"

namespace nodedev {

namespace {

Frame reply(CommandTag tag, Bytes payload = {}) { return Frame{tag, std::move(payload)}; }

Frame ack() { return reply(CommandTag::Ack, StatusMsg{0}.encode()); }

Frame err(ErrCode code, std::string message) {
  return reply(CommandTag::Err, ErrMsg{static_cast<std::uint8_t>(code), std::move(message)}.encode());
}

bool in_bounds(std::uint64_t offset, std::uint64_t length, std::size_t size) {
  return offset <= size && length <= size - offset;
}

Millis connect_timeout() {
  if (const char* env = std::getenv("NODEDEV_TIMEOUT_SECS")) {
    try {
      double secs = std::stod(env);
      if (secs > 0) return Millis(static_cast<long long>(secs * 1000));
    } catch (const std::exception&) {
    }
  }
  return Millis(30000);
}

}  // namespace

DeviceServer::DeviceServer(const ProgramImage& image, int device_index, std::size_t threads)
    : image_(image), device_index_(device_index), pool_(threads) {
  table_.register_globals(image.globals);
}

std::optional<Frame> DeviceServer::handle(const Frame& command) {
  if (!is_host_tag(command.tag)) {
    return err(ErrCode::UnexpectedTag,
               "device does not accept " + std::string(tag_name(command.tag)));
  }
  try {
    switch (command.tag) {
      case CommandTag::Alloc: {
        auto cmd = AllocCmd::decode(command.payload);
        try {
          table_.alloc({cmd.addr}, cmd.nbytes);
        } catch (const ResourceError& e) {
          return err(ErrCode::Resource, e.what());
        } catch (const ProtocolError& e) {
          return err(ErrCode::TableViolation, e.what());
        }
        return ack();
      }
      case CommandTag::Free: {
        auto cmd = FreeCmd::decode(command.payload);
        try {
          table_.free({cmd.addr});
        } catch (const ProtocolError& e) {
          return err(ErrCode::TableViolation, e.what());
        }
        return ack();
      }
      case CommandTag::Write: {
        auto cmd = WriteCmd::decode(command.payload);
        std::span<std::byte> region;
        try {
          region = table_.resolve({cmd.addr});
        } catch (const ProtocolError& e) {
          return err(ErrCode::TableViolation, e.what());
        }
        if (!in_bounds(cmd.offset, cmd.data.size(), region.size())) {
          return err(ErrCode::OutOfBounds, "Write of " + std::to_string(cmd.data.size()) +
                                               " bytes at offset " + std::to_string(cmd.offset) +
                                               " exceeds slot " + std::to_string(cmd.addr) +
                                               " of " + std::to_string(region.size()) + " bytes");
        }
        std::copy(cmd.data.begin(), cmd.data.end(),
                  region.begin() + static_cast<std::ptrdiff_t>(cmd.offset));
        return ack();
      }
      case CommandTag::Read: {
        auto cmd = ReadCmd::decode(command.payload);
        std::span<std::byte> region;
        try {
          region = table_.resolve({cmd.addr});
        } catch (const ProtocolError& e) {
          return err(ErrCode::TableViolation, e.what());
        }
        if (!in_bounds(cmd.offset, cmd.length, region.size())) {
          return err(ErrCode::OutOfBounds, "Read of " + std::to_string(cmd.length) +
                                               " bytes at offset " + std::to_string(cmd.offset) +
                                               " exceeds slot " + std::to_string(cmd.addr) +
                                               " of " + std::to_string(region.size()) + " bytes");
        }
        auto part = region.subspan(cmd.offset, cmd.length);
        return reply(CommandTag::Data, Bytes(part.begin(), part.end()));
      }
      case CommandTag::Exec:
        return exec(ExecCmd::decode(command.payload));
      case CommandTag::Shutdown:
        return std::nullopt;
      default:
        break;
    }
  } catch (const ProtocolError& e) {
    return err(ErrCode::Malformed, e.what());
  }
  return err(ErrCode::UnexpectedTag, "unhandled command");
}

Frame DeviceServer::exec(const ExecCmd& cmd) {
  const KernelFn* fn = nullptr;
  try {
    fn = &image_.kernels.at(cmd.kernel_index);
  } catch (const ProtocolError& e) {
    return err(ErrCode::UnknownKernel, e.what());
  }
  std::vector<Region> regions;
  regions.reserve(cmd.addrs.size());
  try {
    for (auto a : cmd.addrs) regions.push_back(table_.resolve({a}));
  } catch (const ProtocolError& e) {
    return err(ErrCode::TableViolation, e.what());
  }
  std::vector<Region> globals;
  globals.reserve(table_.global_count());
  for (std::size_t g = 0; g < table_.global_count(); ++g) {
    globals.push_back(table_.resolve({static_cast<std::uint32_t>(g)}));
  }
  ExecContext ctx(device_index_, pool_, globals);
  std::uint8_t status = 0;
  try {
    (*fn)(ctx, regions, cmd.scalars);
  } catch (const std::exception& e) {
    std::cerr << "nodedev: device " << device_index_ << ": kernel " << cmd.kernel_index
              << " failed: " << e.what() << "\n";
    status = 1;
  } catch (...) {
    status = 1;
  }
  return reply(CommandTag::Done, StatusMsg{status}.encode());
}

int command_loop(Connection& conn, DeviceServer& server) {
  while (true) {
    Frame command;
    try {
      command = conn.receive();
    } catch (const ProtocolError& e) {
      try {
        conn.send(CommandTag::Err,
                  ErrMsg{static_cast<std::uint8_t>(ErrCode::Malformed), e.what()}.encode());
      } catch (const Error&) {
      }
      return 2;
    } catch (const TransportError&) {
      return 1;
    }
    auto out = server.handle(command);
    if (!out) return 0;
    try {
      conn.send(out->tag, out->payload);
    } catch (const TransportError&) {
      return 1;
    }
  }
}

std::optional<WorkerArgs> parse_worker_args(int argc, const char* const* argv) {
  bool worker = false;
  std::optional<int> index;
  std::optional<std::string> endpoint;
  for (int i = 1; i < argc; ++i) {
    std::string_view a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) throw std::invalid_argument(std::string(a) + " needs a value");
      return argv[++i];
    };
    if (a == "--worker") {
      worker = true;
    } else if (a == "--device-index") {
      auto v = value();
      std::size_t used = 0;
      int n = std::stoi(v, &used);
      if (used != v.size() || n < 1) throw std::invalid_argument("bad device index '" + v + "'");
      index = n;
    } else if (a == "--connect") {
      endpoint = value();
    }
  }
  if (!worker) return std::nullopt;
  if (!index || !endpoint) {
    throw std::invalid_argument("worker mode needs --device-index N --connect HOST:PORT");
  }
  auto [host, port] = split_endpoint(*endpoint);
  return WorkerArgs{*index, host, port};
}

int worker_main(const WorkerArgs& args, ProgramImage& image) {
  image.kernels.seal();
  DeviceServer server(image, args.device_index, default_pool_width());
  Connection conn(connect_to(args.host, args.port, connect_timeout()));
  HelloMsg hello;
  hello.digest = image.kernels.digest();
  hello.global_count = static_cast<std::uint32_t>(image.globals.size());
  hello.device_index = static_cast<std::uint32_t>(args.device_index);
  conn.send(CommandTag::Hello, hello.encode());
  return command_loop(conn, server);
}

std::optional<int> run_worker_if_requested(int argc, const char* const* argv,
                                           ProgramImage& image) {
  std::optional<WorkerArgs> args;
  try {
    args = parse_worker_args(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "nodedev worker: " << e.what() << "\n";
    return 64;
  }
  if (!args) return std::nullopt;
  try {
    return worker_main(*args, image);
  } catch (const std::exception& e) {
    std::cerr << "nodedev worker " << args->device_index << ": " << e.what() << "\n";
    return 1;
  }
}

}  // namespace nodedev
