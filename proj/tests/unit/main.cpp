#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "../support/test_image.hpp"

int main(int argc, char** argv) {
  // Runtime tests spawn this binary as their workers.
  if (auto status = nodedev::testing::worker_hook(argc, argv)) return *status;
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
