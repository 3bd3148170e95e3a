#pragma once

// Benchmark decompositions over devices 1..k: vecadd, mandelbrot, fib,
// sparselu, and align (a synthetic broadcast-table scoring workload).
//
// Every benchmark times only its parallel section: from the first offload to
// the last result landing in host memory.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nodedev/pool.hpp"
#include "nodedev/registry.hpp"
#include "nodedev/runtime.hpp"

namespace nodedev::bench {

/// 64-bit LCG; next_unit() maps the top 53 bits of the new state to [0,1).
class Lcg {
 public:
  static constexpr std::uint64_t kMultiplier = 6364136223846793005ULL;
  static constexpr std::uint64_t kIncrement = 1442695040888963407ULL;

  explicit Lcg(std::uint64_t seed) : state_(seed) {}
  double next_unit() {
    state_ = state_ * kMultiplier + kIncrement;
    return static_cast<double>(state_ >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t state_;
};

struct Share {
  std::size_t begin = 0;
  std::size_t count = 0;

  bool operator==(const Share&) const = default;
};

/// Device d gets [d*ceil(n/k), ...) clipped to n; the last non-empty share
/// takes the remainder.
std::vector<Share> ceil_shares(std::size_t n, std::size_t k);
/// The first n mod k shares get one extra element.
std::vector<Share> balanced_shares(std::size_t n, std::size_t k);

/// Starting at {n}, repeatedly replaces the largest element m >= 2
/// (leftmost on ties) by m-1, m-2 until there are k elements or nothing
/// left to split.
std::vector<int> fib_frontier(int n, int k);

/// Devices 1..k, or {0} when k == 1 and there are no workers.
std::vector<int> pick_devices(const Runtime& rt, int k);

template <typename T>
struct Timed {
  T value;
  double seconds = 0.0;
};

/// Adds every benchmark kernel plus the align tables (as globals).
void register_kernels(ProgramImage& image);
ProgramImage make_image();

// vecadd

Timed<std::vector<double>> vecadd(Runtime& rt, std::span<const double> a,
                                  std::span<const double> b, int k);

// mandelbrot

struct MandelParams {
  std::uint32_t width = 256;
  std::uint32_t height = 256;
  std::uint32_t max_iter = 256;
};

/// Escape-time count for c, capped at max_iter (|z|^2 > 4 escapes).
std::uint32_t mandel_iterations(double cr, double ci, std::uint32_t max_iter);
/// Viewport centred on (-0.5, 0), 3.0 wide, square pixels.
std::pair<double, double> mandel_point(const MandelParams& p, std::uint32_t x, std::uint32_t y);
/// Rows [row0, row0+rows) as bytes, iteration count mod 256.
std::vector<std::uint8_t> mandel_rows(const MandelParams& p, std::uint32_t row0,
                                      std::uint32_t rows);

Timed<std::vector<std::uint8_t>> mandelbrot(Runtime& rt, const MandelParams& p, int k);
void write_pgm(const std::string& path, const MandelParams& p,
               std::span<const std::uint8_t> pixels);

// fib

/// Device-side fib: tasks down to n < 20, then plain recursion.
std::uint64_t fib_tasks(WorkerPool& pool, int n);
std::uint64_t fib_iterative(int n);

struct FibResult {
  std::uint64_t value = 0;
  std::vector<int> frontier;
};

Timed<FibResult> fib(Runtime& rt, int n, int k);

// sparselu

/// Square matrix of nblocks x nblocks dense blocks, each block_size^2
/// doubles in row-major order. Absent blocks are zero and flagged 0.
struct BlockMatrix {
  std::size_t nblocks = 0;
  std::size_t block_size = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> present;

  double* block(std::size_t i, std::size_t j) {
    return values.data() + (i * nblocks + j) * block_size * block_size;
  }
  const double* block(std::size_t i, std::size_t j) const {
    return values.data() + (i * nblocks + j) * block_size * block_size;
  }
  bool has(std::size_t i, std::size_t j) const { return present[i * nblocks + j] != 0; }
  bool operator==(const BlockMatrix&) const = default;
};

/// Diagonal sub-matrix of the global B x B block matrix starting at block
/// `first`, nblocks wide. Block (i,j) exists iff i == j or (i+j) mod 3 == 0
/// in global indices; entries come from Lcg(i*65536 + j); diagonal blocks
/// get block_size added on their diagonal.
BlockMatrix generate_submatrix(std::size_t total_blocks, std::size_t block_size,
                               std::size_t first, std::size_t nblocks);

/// In-place blocked LU without pivoting; L has a unit diagonal and shares
/// storage with U. Per step: factor the diagonal block, then row and column
/// solves as tasks, then trailing updates as tasks (allocating fill-in).
/// std::domain_error on a zero pivot.
void sparselu_factor(WorkerPool& pool, BlockMatrix& m);

/// ||L*U - A||_inf / ||A||_inf by dense multiplication.
double lu_relative_residual(const BlockMatrix& original, const BlockMatrix& factored);

struct SparseLuParams {
  std::size_t blocks = 16;
  std::size_t block_size = 8;
};

struct SparseLuResult {
  std::vector<BlockMatrix> original;
  std::vector<BlockMatrix> factored;
};

/// k independent diagonal sub-matrices, one per device, mapped ToFrom.
/// std::invalid_argument unless k divides blocks.
Timed<SparseLuResult> sparselu(Runtime& rt, const SparseLuParams& p, int k);

// align

inline constexpr std::size_t kAlignTableSize = 4096;

struct AlignParams {
  std::uint32_t m = 400;
  std::uint32_t work = 10000;
};

/// Seeds 1 and 2.
std::vector<double> align_table(std::uint64_t seed);
double align_score(std::span<const double> t1, std::span<const double> t2, std::uint64_t i,
                   std::uint32_t work);

Timed<std::vector<double>> align(Runtime& rt, const AlignParams& p, int k);

/// One empty offload per device; measures pure round-trip overhead.
Timed<int> noop(Runtime& rt, int k);

// reporting

struct Sample {
  double seconds = 0.0;
  bool valid = true;
};

using Trial = std::function<Sample(Runtime&, int k)>;

struct BenchParams {
  std::size_t n = 1 << 20;
  MandelParams mandel;
  int fib_n = 30;
  SparseLuParams lu;
  AlignParams align;
};

/// Runs one benchmark and validates it against a sequential computation.
/// std::invalid_argument for an unknown name.
Trial make_trial(const std::string& name, const BenchParams& params);

struct BenchReport {
  std::string benchmark;
  int k = 0;
  std::size_t threads_per_device = 0;
  double mean_seconds = 0.0;
  bool valid = true;
  std::optional<double> speedup_vs_k1;
};

/// `repeats` runs per device count; the mean time of each row and the
/// speedup against the k=1 row when one was measured.
std::vector<BenchReport> run_report(Runtime& rt, const std::string& name, const Trial& trial,
                                    std::span<const int> ks, int repeats);
std::string report_csv(std::span<const BenchReport> rows);

}  // namespace nodedev::bench
