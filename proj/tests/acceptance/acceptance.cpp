// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any
// gating criterion fails. Spawns itself as the worker processes.

#include <signal.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "../support/medtable_model.hpp"
#include "../support/oracles.hpp"
#include "../support/test_image.hpp"
#include "nodedev/bench.hpp"
#include "nodedev/errors.hpp"
#include "nodedev/runtime.hpp"
#include "nodedev/wire.hpp"

using namespace nodedev;
using Clock = std::chrono::steady_clock;

namespace {

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Verdict()>& body) {
  Verdict v;
  auto t0 = Clock::now();
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("unexpected exception: ") + e.what();
  }
  if (!v.pass) ++failures;
  std::printf("[%s] %d %s (%.2f s)%s%s\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), since(t0),
              v.detail.empty() ? "" : ": ", v.detail.c_str());
  std::fflush(stdout);
}

Verdict protocol_roundtrip() {
  Verdict v;
  auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tag(0, 10);
  int ok = 0;
  for (int i = 0; i < 10000; ++i) {
    std::size_t len = (i % 1000 == 0) ? 65536 + rng() % 65536 : rng() % 512;
    Bytes payload(len);
    for (auto& b : payload) b = static_cast<std::byte>(rng());
    auto t = static_cast<CommandTag>(tag(rng));
    auto enc = encode_frame(t, payload);
    SpanSource src(enc);
    auto f = decode_frame(src);
    if (f.tag == t && f.payload == payload && src.consumed() == enc.size() &&
        encode_frame(f.tag, f.payload) == enc) {
      ++ok;
    }
  }
  v.require(ok == 10000, std::to_string(10000 - ok) + " frames changed in transit");

  auto good = encode_frame(CommandTag::Write, Bytes(40));
  auto rejects = [](const Bytes& data) {
    SpanSource s(data);
    try {
      decode_frame(s);
    } catch (const ProtocolError&) {
      return true;
    }
    return false;
  };
  for (int pos = 0; pos < 4; ++pos) {
    auto bad = good;
    bad[pos] ^= std::byte{0x20};
    v.require(rejects(bad), "bad magic accepted");
  }
  for (std::size_t cut = 1; cut < good.size(); ++cut) {
    v.require(rejects(Bytes(good.begin(), good.begin() + static_cast<long>(cut))),
              "truncation at " + std::to_string(cut) + " accepted");
  }
  double secs = since(t0);
  v.require(secs < 5.0, "took " + std::to_string(secs) + " s");
  return v;
}

Verdict medtable_model() {
  Verdict v;
  auto t0 = Clock::now();
  auto out = testing::run_medtable_model(2024, 100000, 2);
  v.require(out.ok, out.failure);
  v.require(out.steps == 100000, "stopped after " + std::to_string(out.steps) + " steps");
  double secs = since(t0);
  v.require(secs < 10.0, "took " + std::to_string(secs) + " s");
  return v;
}

Verdict sectioned_vecadd(Runtime& rt) {
  Verdict v;
  std::vector<double> a(1024), b(1024);
  for (std::size_t i = 0; i < 1024; ++i) {
    a[i] = 0.25 * static_cast<double>(i);
    b[i] = 1000.0 - static_cast<double>(i) / 3.0;
  }
  std::vector<double> want(1024);
  for (std::size_t i = 0; i < 1024; ++i) want[i] = a[i] + b[i];
  for (int k : {1, 2, 4, 8}) {
    bool record = k == 8;
    rt.clear_transcripts();
    rt.record_transcripts(record);
    auto c = bench::vecadd(rt, a, b, k).value;
    rt.record_transcripts(false);
    v.require(c == want, "k=" + std::to_string(k) + " result differs from a+b");
    if (!record) continue;
    for (int d = 1; d <= 8; ++d) {
      std::vector<std::size_t> writes;
      for (const auto& e : rt.transcript(d)) {
        if (e.from_host && e.tag == CommandTag::Write) writes.push_back(e.payload_len - 20);
      }
      v.require(writes == std::vector<std::size_t>{128 * sizeof(double), 128 * sizeof(double)},
                "device " + std::to_string(d) + " Write traffic is not 2 x 128 elements");
    }
  }
  rt.clear_transcripts();
  return v;
}

Verdict mandel_determinism(Runtime& rt) {
  Verdict v;
  bench::MandelParams p{256, 256, 256};
  auto want = oracle::mandelbrot(256, 256, 256);
  for (int k : {1, 2, 4}) {
    v.require(bench::mandelbrot(rt, p, k).value == want,
              "k=" + std::to_string(k) + " image differs from the oracle");
  }
  return v;
}

void mandel_scaling_note() {
  unsigned cores = std::thread::hardware_concurrency();
  if (cores < 4) {
    std::printf("[INFO] 4 soft scaling: skipped, %u hardware thread(s) available, needs 4\n", cores);
    return;
  }
  auto rt = testing::start_local(4, Millis(120000));
  bench::MandelParams p{1024, 1024, 256};
  auto mean = [&](int k) {
    double total = 0;
    for (int r = 0; r < 3; ++r) total += bench::mandelbrot(rt, p, k).seconds;
    return total / 3;
  };
  double t1 = mean(1), t4 = mean(4);
  std::printf("[INFO] 4 soft scaling: k=1 %.3f s, k=4 %.3f s, ratio %.2f (target <= 0.60, %s)\n",
              t1, t4, t4 / t1, t4 <= 0.6 * t1 ? "met" : "not met");
  rt.shutdown();
}

Verdict fib_correctness(Runtime& rt) {
  Verdict v;
  for (int k : {1, 2, 3, 4}) {
    auto r = bench::fib(rt, 30, k).value;
    v.require(r.value == 832040, "k=" + std::to_string(k) + " gave " + std::to_string(r.value));
  }
  std::mt19937 rng(30);
  std::uniform_int_distribution<int> width(1, 16);
  int bad = 0;
  for (int n = 0; n <= 30; ++n) {
    for (int order = 0; order < 100; ++order) {
      std::uint64_t sum = 0;
      for (int m : oracle::random_frontier(n, width(rng), rng)) sum += oracle::fib(m);
      if (sum != oracle::fib(n)) ++bad;
    }
  }
  v.require(bad == 0, std::to_string(bad) + " frontiers break the sum property");
  return v;
}

Verdict sparselu_validation(Runtime& rt) {
  Verdict v;
  bench::SparseLuParams p{16, 8};
  WorkerPool pool(1);
  for (int k : {1, 4}) {
    auto r = bench::sparselu(rt, p, k).value;
    v.require(r.factored.size() == static_cast<std::size_t>(k), "wrong sub-matrix count");
    std::size_t nb = p.blocks / static_cast<std::size_t>(k);
    double worst = 0;
    for (std::size_t d = 0; d < r.factored.size(); ++d) {
      auto dense_a = oracle::dense_from_blocks(nb, p.block_size, r.original[d].values);
      auto dense_f = oracle::dense_from_blocks(nb, p.block_size, r.factored[d].values);
      worst = std::max(worst, oracle::lu_residual(dense_a, dense_f));
      auto local = bench::generate_submatrix(p.blocks, p.block_size, d * nb, nb);
      bench::sparselu_factor(pool, local);
      v.require(local == r.factored[d], "k=" + std::to_string(k) + " sub-matrix " +
                                            std::to_string(d) + " differs from in-process factors");
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", worst);
    v.require(worst <= 1e-10, "k=" + std::to_string(k) + " residual " + buf);
  }
  return v;
}

Verdict align_traffic(Runtime& rt) {
  Verdict v;
  bench::AlignParams p{400, 10000};
  auto want = oracle::align(400, 10000);
  for (int k : {1, 2, 4}) {
    rt.clear_transcripts();
    rt.record_transcripts(true);
    auto got = bench::align(rt, p, k).value;
    rt.record_transcripts(false);
    v.require(got == want, "k=" + std::to_string(k) + " scores differ from the oracle");
    auto shares = bench::ceil_shares(400, static_cast<std::size_t>(k));
    for (int d = 1; d <= k; ++d) {
      std::size_t result = shares[d - 1].count * sizeof(double);
      std::size_t total = 0, data = 0;
      for (const auto& e : rt.transcript(d)) {
        total += e.payload_len;
        if (!e.from_host && e.tag == CommandTag::Data) data += e.payload_len;
      }
      v.require(data == result, "device " + std::to_string(d) + " returned extra data");
      v.require(total <= 64 + result, "k=" + std::to_string(k) + " device " + std::to_string(d) +
                                          " moved " + std::to_string(total - result) +
                                          " non-result payload bytes");
    }
  }
  rt.clear_transcripts();
  return v;
}

Verdict concurrency(Runtime& rt) {
  Verdict v;
  std::atomic<int> corrupted{0};
  std::atomic<int> errors{0};
  auto host_thread = [&](int t) {
    std::vector<double> in(512), out(512);
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<double>(i + t);
    for (int it = 0; it < 100; ++it) {
      int dev = 1 + (t + it) % 4;
      double factor = 1.0 + t * 100 + it;
      try {
        rt.target(dev, "scale", {map_to(in), map_from(out)}, ScalarPack().add(factor).take());
      } catch (const std::exception&) {
        errors++;
        continue;
      }
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (out[i] != in[i] * factor) {
          corrupted++;
          break;
        }
      }
    }
  };
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < 4; ++t) threads.emplace_back(host_thread, t);
  }
  v.require(corrupted == 0, std::to_string(corrupted.load()) + " corrupted replies");
  v.require(errors == 0, std::to_string(errors.load()) + " failed offloads");
  for (int d = 1; d <= 4; ++d) {
    v.require(rt.max_in_flight(d) == 1, "device " + std::to_string(d) + " had overlapping requests");
    v.require(rt.mirror_snapshot(d).live_count() == 0, "device " + std::to_string(d) + " leaked slots");
  }

  // Two threads on one device, each offload stamping and then checking.
  std::atomic<int> bad{0};
  auto same_device = [&] {
    std::vector<std::uint32_t> out(64);
    for (int it = 0; it < 100; ++it) {
      std::fill(out.begin(), out.end(), 0);
      rt.target(5, "stamp", {map_from(out)});
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] != 5000 + i) {
          bad++;
          break;
        }
      }
    }
  };
  {
    std::jthread a(same_device), b(same_device);
  }
  v.require(bad == 0, std::to_string(bad.load()) + " bad results on the shared device");
  v.require(rt.max_in_flight(5) == 1, "shared device saw overlapping requests");
  return v;
}

Verdict robustness() {
  Verdict v;
  const Millis timeout(3000);
  {
    auto rt = testing::start_local(2, timeout);
    auto p = rt.target(1, "sleep_ms", {}, ScalarPack().add(std::uint32_t{30000}).take(), true);
    std::this_thread::sleep_for(Millis(100));
    ::kill(rt.workers()[0].pid, SIGKILL);
    auto t0 = Clock::now();
    bool transport = false;
    try {
      rt.wait(p);
    } catch (const TransportError&) {
      transport = true;
    }
    double secs = since(t0);
    v.require(transport, "killed worker did not give a transport error");
    v.require(secs <= std::chrono::duration<double>(timeout).count(),
              "error took " + std::to_string(secs) + " s");
    rt.shutdown();
  }
  testing::test_image();
  ::setenv("NODEDEV_TEST_REORDER", "1", 1);
  try {
    auto rt = testing::start_local(2, timeout);
    v.require(false, "divergent workers were accepted");
  } catch (const KernelTableDivergence&) {
  } catch (const std::exception& e) {
    v.require(false, std::string("wrong error for divergence: ") + e.what());
  }
  ::unsetenv("NODEDEV_TEST_REORDER");
  return v;
}

Verdict timing_excludes_bootstrap() {
  Verdict v;
  auto t0 = Clock::now();
  ClusterConfig cfg = parse_config("localhost 2\n");
  LaunchOptions o;
  o.mode = LaunchMode::Remote;
  o.launcher = {"sh", "-c", "sleep 2; shift; exec \"$@\"", "sh", "{host}", "{exe}", "{args}"};
  o.threads_per_device = 1;
  o.connect_timeout = Millis(20000);
  auto rt = Runtime::start(testing::test_image(), cfg, o);
  double startup = since(t0);
  double total = 0;
  const int repeats = 10;
  for (int r = 0; r < repeats; ++r) total += bench::noop(rt, 2).seconds;
  rt.shutdown();
  double mean = total / repeats;
  v.require(startup >= 2.0, "spawn was not slowed, startup " + std::to_string(startup) + " s");
  v.require(mean < 0.5, "parallel section " + std::to_string(mean) + " s");
  char buf[96];
  std::snprintf(buf, sizeof buf, "startup %.2f s, mean parallel section %.6f s", startup, mean);
  if (v.pass) v.detail = buf;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (auto status = testing::worker_hook(argc, argv)) return *status;

  report(1, "protocol roundtrip", protocol_roundtrip);
  report(2, "mediary table model", medtable_model);

  auto rt = testing::start_local(8, Millis(60000));
  report(3, "sectioned vecadd", [&] { return sectioned_vecadd(rt); });
  report(4, "mandelbrot determinism", [&] { return mandel_determinism(rt); });
  report(5, "fib correctness", [&] { return fib_correctness(rt); });
  report(6, "sparselu validation", [&] { return sparselu_validation(rt); });
  report(7, "align traffic", [&] { return align_traffic(rt); });
  report(8, "concurrency safety", [&] { return concurrency(rt); });
  rt.shutdown();
  mandel_scaling_note();

  report(9, "robustness", robustness);
  report(10, "timing excludes bootstrap", timing_excludes_bootstrap);

  std::printf("%s: %d of 10 criteria failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
