#pragma once

#include "nodedev/registry.hpp"
#include "nodedev/runtime.hpp"

namespace nodedev::testing {

/// Benchmark kernels plus a few kernels that exist only to exercise the
/// runtime. With NODEDEV_TEST_REORDER=1 in the environment the extra
/// kernels are registered in reverse order, which changes the digest.
ProgramImage make_test_image();

/// The image shared by every runtime a test binary starts; workers spawned
/// from the binary build the same one.
ProgramImage& test_image();

/// `count` local workers with a short reply timeout and one thread each.
Runtime start_local(int count, Millis reply_timeout = Millis(10000));

/// Entry point shared by test binaries that spawn themselves as workers.
std::optional<int> worker_hook(int argc, char** argv);

}  // namespace nodedev::testing
