#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>

#include "nodedev/bench.hpp"
#include "nodedev/bootstrap.hpp"
#include "nodedev/errors.hpp"
#include "nodedev/runtime.hpp"
#include "nodedev/wire.hpp"

namespace py = pybind11;
using namespace nodedev;

namespace {

Bytes to_bytes(const py::bytes& b) {
  std::string_view v = b;
  auto raw = std::as_bytes(std::span(v.data(), v.size()));
  return Bytes(raw.begin(), raw.end());
}

py::bytes from_bytes(std::span<const std::byte> b) {
  return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

// A runtime over local or remote workers running the nodedev-bench binary,
// which carries the same kernels as this module.
class Cluster {
 public:
  Cluster(int workers, std::string worker_executable, std::optional<std::size_t> threads,
          double timeout_secs)
      : image_(std::make_unique<ProgramImage>(bench::make_image())) {
    ClusterConfig cfg;
    if (workers > 0) cfg.nodes.push_back({"localhost", workers});
    auto opts = LaunchOptions::from_env();
    opts.worker_executable = std::move(worker_executable);
    opts.threads_per_device = threads;
    if (timeout_secs > 0) {
      opts.reply_timeout = opts.connect_timeout = Millis(static_cast<long long>(timeout_secs * 1000));
    }
    py::gil_scoped_release release;
    rt_.emplace(Runtime::start(*image_, cfg, opts));
  }

  Runtime& rt() {
    if (!rt_) throw std::logic_error("cluster is shut down");
    return *rt_;
  }

  int device_count() { return rt().device_count(); }

  std::uint64_t fib(int n, int k) {
    py::gil_scoped_release release;
    return bench::fib(rt(), n, k).value.value;
  }

  py::bytes mandelbrot(std::uint32_t w, std::uint32_t h, std::uint32_t max_iter, int k) {
    std::vector<std::uint8_t> img;
    {
      py::gil_scoped_release release;
      img = bench::mandelbrot(rt(), {w, h, max_iter}, k).value;
    }
    return py::bytes(reinterpret_cast<const char*>(img.data()), img.size());
  }

  std::vector<double> vecadd(std::vector<double> a, std::vector<double> b, int k) {
    py::gil_scoped_release release;
    return bench::vecadd(rt(), a, b, k).value;
  }

  std::vector<double> align(std::uint32_t m, std::uint32_t work, int k) {
    py::gil_scoped_release release;
    return bench::align(rt(), {m, work}, k).value;
  }

  std::string report(const std::string& name, std::vector<int> ks, int repeats,
                     const py::dict& params) {
    bench::BenchParams p;
    if (params.contains("n")) p.n = params["n"].cast<std::size_t>();
    if (params.contains("width")) p.mandel.width = params["width"].cast<std::uint32_t>();
    if (params.contains("height")) p.mandel.height = params["height"].cast<std::uint32_t>();
    if (params.contains("max_iter")) p.mandel.max_iter = params["max_iter"].cast<std::uint32_t>();
    if (params.contains("fib_n")) p.fib_n = params["fib_n"].cast<int>();
    if (params.contains("blocks")) p.lu.blocks = params["blocks"].cast<std::size_t>();
    if (params.contains("block_size")) p.lu.block_size = params["block_size"].cast<std::size_t>();
    if (params.contains("m")) p.align.m = params["m"].cast<std::uint32_t>();
    if (params.contains("work")) p.align.work = params["work"].cast<std::uint32_t>();
    py::gil_scoped_release release;
    auto trial = bench::make_trial(name, p);
    auto rows = bench::run_report(rt(), name, trial, ks, repeats);
    return bench::report_csv(rows);
  }

  void shutdown() {
    if (!rt_) return;
    py::gil_scoped_release release;
    rt_->shutdown();
    rt_.reset();
  }

 private:
  std::unique_ptr<ProgramImage> image_;
  std::optional<Runtime> rt_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Offload runtime over worker processes";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  auto transport = py::register_exception<TransportError>(m, "TransportError", base.ptr());
  py::register_exception<EndOfStream>(m, "EndOfStream", transport.ptr());
  auto boot = py::register_exception<BootstrapError>(m, "BootstrapError", base.ptr());
  py::register_exception<KernelTableDivergence>(m, "KernelTableDivergence", boot.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<LookupError>(m, "LookupError", base.ptr());
  py::register_exception<DeviceError>(m, "DeviceError", base.ptr());
  py::register_exception<OffloadError>(m, "OffloadError", base.ptr());

  m.attr("PROTOCOL_VERSION") = kProtocolVersion;
  m.attr("FRAME_HEADER_SIZE") = kFrameHeaderSize;

  m.def("encode_frame", [](int tag, const py::bytes& payload) {
    if (tag < 0 || !is_valid_tag(static_cast<std::uint8_t>(tag))) {
      throw py::value_error("unknown tag " + std::to_string(tag));
    }
    return from_bytes(encode_frame(static_cast<CommandTag>(tag), to_bytes(payload)));
  }, py::arg("tag"), py::arg("payload") = py::bytes());

  m.def("decode_frame", [](const py::bytes& data) {
    auto raw = to_bytes(data);
    SpanSource src(raw);
    auto f = decode_frame(src);
    return py::make_tuple(static_cast<int>(f.tag), from_bytes(f.payload), src.consumed());
  }, py::arg("data"), "Returns (tag, payload, bytes consumed) for the first frame.");

  m.def("kerneltable_digest", [](const std::vector<std::string>& names) {
    return kerneltable_digest(names);
  });

  m.def("parse_config", [](const std::string& text) {
    std::vector<std::pair<std::string, int>> out;
    for (const auto& n : parse_config(text).nodes) out.emplace_back(n.host, n.multiplicity);
    return out;
  });

  m.def("fib_frontier", &bench::fib_frontier, py::arg("n"), py::arg("k"));
  m.def("balanced_shares", [](std::size_t n, std::size_t k) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto s : bench::balanced_shares(n, k)) out.emplace_back(s.begin, s.count);
    return out;
  });
  m.def("ceil_shares", [](std::size_t n, std::size_t k) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto s : bench::ceil_shares(n, k)) out.emplace_back(s.begin, s.count);
    return out;
  });

  py::class_<Cluster>(m, "Cluster")
      .def(py::init<int, std::string, std::optional<std::size_t>, double>(), py::arg("workers"),
           py::arg("worker_executable"), py::arg("threads") = py::none(),
           py::arg("timeout") = 0.0)
      .def_property_readonly("device_count", &Cluster::device_count)
      .def("fib", &Cluster::fib, py::arg("n"), py::arg("k"))
      .def("mandelbrot", &Cluster::mandelbrot, py::arg("width"), py::arg("height"),
           py::arg("max_iter"), py::arg("k"))
      .def("vecadd", &Cluster::vecadd, py::arg("a"), py::arg("b"), py::arg("k"))
      .def("align", &Cluster::align, py::arg("m"), py::arg("work"), py::arg("k"))
      .def("report", &Cluster::report, py::arg("name"), py::arg("ks"), py::arg("repeats") = 1,
           py::arg("params") = py::dict())
      .def("shutdown", &Cluster::shutdown);
}
