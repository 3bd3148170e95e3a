#include <doctest.h>

#include <signal.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <future>

#include "../support/test_image.hpp"
#include "nodedev/bootstrap.hpp"
#include "nodedev/errors.hpp"
#include "nodedev/runtime.hpp"

using namespace nodedev;
using Clock = std::chrono::steady_clock;

namespace {

bool process_gone(pid_t pid) { return ::kill(pid, 0) == -1 && errno == ESRCH; }

// Feeds a hand-made Hello to handshake().
int handshake_with(HelloMsg hello, std::uint64_t digest, std::uint32_t globals) {
  auto listener = Listener::bind("127.0.0.1");
  Connection worker(connect_to("127.0.0.1", listener.port(), Millis(2000)));
  auto sock = listener.accept(Millis(2000));
  REQUIRE(sock);
  Connection host(std::move(*sock));
  worker.send(CommandTag::Hello, hello.encode());
  return handshake(host, digest, globals, Millis(2000));
}

}  // namespace

TEST_CASE("config lines and multiplicity") {
  auto c = parse_config("nodeA\nnodeB 3\n");
  CHECK(c.nodes == std::vector<NodeSpec>{{"nodeA", 1}, {"nodeB", 3}});
  CHECK(c.worker_count() == 4);
  CHECK(device_count(c) == 5);
  CHECK(c.device_hosts() == std::vector<std::string>{"nodeA", "nodeB", "nodeB", "nodeB"});

  CHECK(parse_config("").nodes.empty());
  CHECK(device_count(parse_config("")) == 1);

  auto d = parse_config("# cluster\n\n  10.0.0.7   2  \n# end\nlocalhost\n");
  CHECK(d.nodes == std::vector<NodeSpec>{{"10.0.0.7", 2}, {"localhost", 1}});
  // Numbering is a pure function of the text.
  CHECK(parse_config("a 2\nb\n").device_hosts() == parse_config("a 2\nb\n").device_hosts());
}

TEST_CASE("bad multiplicities name their line") {
  CHECK_THROWS_AS(parse_config("nodeA 0"), ConfigError);
  CHECK_THROWS_AS(parse_config("nodeA -2"), ConfigError);
  CHECK_THROWS_AS(parse_config("nodeA x"), ConfigError);
  CHECK_THROWS_AS(parse_config("nodeA 2 3"), ConfigError);
  try {
    parse_config("ok\n# c\nbad 0\n");
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("config from a file and the environment") {
  CHECK_THROWS_AS(load_config("/nonexistent/nodes.txt"), BootstrapError);
  std::string path = "nodedev_test_nodes.txt";
  std::ofstream(path) << "h1 2\nh2\n";
  CHECK(load_config(path).worker_count() == 3);
  ::setenv("NODEDEV_CONFIG", path.c_str(), 1);
  CHECK(config_from_env().worker_count() == 3);
  ::unsetenv("NODEDEV_CONFIG");
  CHECK(config_from_env().nodes.empty());
  std::remove(path.c_str());
}

TEST_CASE("timeouts from the environment") {
  ::setenv("NODEDEV_TIMEOUT_SECS", "2.5", 1);
  auto o = LaunchOptions::from_env();
  CHECK(o.reply_timeout == Millis(2500));
  CHECK(o.connect_timeout == Millis(2500));
  ::unsetenv("NODEDEV_TIMEOUT_SECS");
  CHECK(LaunchOptions::from_env().reply_timeout == LaunchOptions{}.reply_timeout);
}

TEST_CASE("handshake checks every Hello field") {
  CHECK(handshake_with({kProtocolVersion, 42, 2, 5}, 42, 2) == 5);
  CHECK_THROWS_AS(handshake_with({kProtocolVersion, 41, 2, 5}, 42, 2), KernelTableDivergence);
  try {
    handshake_with({kProtocolVersion, 41, 2, 5}, 42, 2);
  } catch (const KernelTableDivergence& e) {
    CHECK(std::string(e.what()).rfind("kerneltable divergence", 0) == 0);
  }
  CHECK_THROWS_AS(handshake_with({kProtocolVersion, 42, 3, 5}, 42, 2), BootstrapError);
  CHECK_THROWS_AS(handshake_with({2, 42, 2, 5}, 42, 2), BootstrapError);
}

TEST_CASE("handshake rejects a silent worker") {
  auto listener = Listener::bind("127.0.0.1");
  Connection worker(connect_to("127.0.0.1", listener.port(), Millis(2000)));
  auto sock = listener.accept(Millis(2000));
  REQUIRE(sock);
  Connection host(std::move(*sock));
  CHECK_THROWS_AS(handshake(host, 1, 0, Millis(100)), BootstrapError);
}

TEST_CASE("local workers start, number themselves, and leave no orphans") {
  auto rt = testing::start_local(4);
  CHECK(rt.device_count() == 5);
  auto procs = rt.workers();
  REQUIRE(procs.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(procs[i].device_index == i + 1);
    CHECK(procs[i].pid > 0);
  }
  rt.shutdown();
  for (const auto& p : rt.workers()) {
    CHECK(p.exit_status == 0);
    CHECK(process_gone(p.pid));
  }
  CHECK_NOTHROW(rt.shutdown());
}

TEST_CASE("a host-only runtime needs no workers") {
  auto rt = testing::start_local(0);
  CHECK(rt.device_count() == 1);
  CHECK(rt.workers().empty());
  rt.shutdown();
}

TEST_CASE("shutdown tolerates a worker that already died") {
  auto rt = testing::start_local(2);
  auto victim = rt.workers()[1].pid;
  ::kill(victim, SIGKILL);
  std::this_thread::sleep_for(Millis(100));
  CHECK_NOTHROW(rt.shutdown());
  for (const auto& p : rt.workers()) CHECK(process_gone(p.pid));
}

TEST_CASE("digest divergence aborts bootstrap") {
  // Workers read the variable when they build their image; the host's image
  // was built before.
  testing::test_image();
  ::setenv("NODEDEV_TEST_REORDER", "1", 1);
  CHECK_THROWS_AS(testing::start_local(2), KernelTableDivergence);
  ::unsetenv("NODEDEV_TEST_REORDER");
}

TEST_CASE("an unreachable device fails within the connect timeout") {
  ClusterConfig cfg = parse_config("nowhere.invalid\n");
  LaunchOptions o;
  o.mode = LaunchMode::Remote;
  o.launcher = {"sh", "-c", "exec sleep 30", "sh", "{host}"};
  o.connect_timeout = Millis(500);
  auto t0 = Clock::now();
  CHECK_THROWS_WITH_AS(Runtime::start(testing::test_image(), cfg, o),
                       doctest::Contains("device 1 (nowhere.invalid)"), BootstrapError);
  CHECK(Clock::now() - t0 < std::chrono::seconds(5));
}

TEST_CASE("a launcher that cannot start is a bootstrap error") {
  ClusterConfig cfg = parse_config("h\n");
  LaunchOptions o;
  o.mode = LaunchMode::Remote;
  o.launcher = {"/nonexistent/launcher", "{host}", "{exe}", "{args}"};
  o.connect_timeout = Millis(2000);
  CHECK_THROWS_AS(Runtime::start(testing::test_image(), cfg, o), BootstrapError);
  o.launcher = {};
  CHECK_THROWS_AS(Runtime::start(testing::test_image(), cfg, o), BootstrapError);
}

TEST_CASE("remote mode substitutes the launcher template") {
  ClusterConfig cfg = parse_config("localhost 2\n");
  LaunchOptions o;
  o.mode = LaunchMode::Remote;
  // Stands in for a remote shell: drops {host} and runs the rest.
  o.launcher = {"sh", "-c", "shift; exec \"$@\"", "sh", "{host}", "{exe}", "{args}"};
  o.threads_per_device = 1;
  auto rt = Runtime::start(testing::test_image(), cfg, o);
  CHECK(rt.device_count() == 3);
  CHECK(rt.workers()[0].host == "localhost");
  rt.shutdown();
}
