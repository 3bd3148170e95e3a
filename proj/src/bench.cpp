#include "nodedev/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "nodedev/kernel.hpp"

namespace nodedev::bench {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Issues one nowait offload per device from its own host thread, then
// finalizes them all.
template <typename MakeOffload>
void offload_all(Runtime& rt, const std::vector<int>& devices, MakeOffload make) {
  std::vector<Pending> pending(devices.size());
  std::mutex mu;
  std::exception_ptr first;
  {
    std::vector<std::jthread> issuers;
    issuers.reserve(devices.size());
    for (std::size_t i = 0; i < devices.size(); ++i) {
      issuers.emplace_back([&, i] {
        try {
          pending[i] = make(i, devices[i]);
        } catch (...) {
          std::lock_guard lk(mu);
          if (!first) first = std::current_exception();
        }
      });
    }
  }
  try {
    rt.wait_all(pending);
  } catch (...) {
    if (!first) first = std::current_exception();
  }
  if (first) std::rethrow_exception(first);
}

std::uint64_t fib_seq(int n) { return n < 2 ? static_cast<std::uint64_t>(n) : fib_seq(n - 1) + fib_seq(n - 2); }

// Block kernels of the LU factorization, s x s row-major.

void lu0(double* diag, std::size_t s) {
  for (std::size_t k = 0; k < s; ++k) {
    if (diag[k * s + k] == 0.0) throw std::domain_error("zero pivot in diagonal block");
    for (std::size_t i = k + 1; i < s; ++i) {
      diag[i * s + k] /= diag[k * s + k];
      for (std::size_t j = k + 1; j < s; ++j) diag[i * s + j] -= diag[i * s + k] * diag[k * s + j];
    }
  }
}

// col <- L^-1 col, L the unit lower part of diag.
void fwd(const double* diag, double* col, std::size_t s) {
  for (std::size_t k = 0; k < s; ++k) {
    for (std::size_t i = k + 1; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) col[i * s + j] -= diag[i * s + k] * col[k * s + j];
    }
  }
}

// row <- row U^-1, U the upper part of diag.
void bdiv(const double* diag, double* row, std::size_t s) {
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t k = 0; k < s; ++k) {
      row[i * s + k] /= diag[k * s + k];
      for (std::size_t j = k + 1; j < s; ++j) row[i * s + j] -= row[i * s + k] * diag[k * s + j];
    }
  }
}

// inner <- inner - row * col
void bmod(const double* row, const double* col, double* inner, std::size_t s) {
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      for (std::size_t k = 0; k < s; ++k) inner[i * s + j] -= row[i * s + k] * col[k * s + j];
    }
  }
}

void factor_blocks(WorkerPool& pool, std::size_t nb, std::size_t s, std::span<double> values,
                   std::span<std::uint8_t> present) {
  if (values.size() != nb * nb * s * s || present.size() != nb * nb) {
    throw std::invalid_argument("block matrix storage does not match its shape");
  }
  auto blk = [&](std::size_t i, std::size_t j) { return values.data() + (i * nb + j) * s * s; };
  auto has = [&](std::size_t i, std::size_t j) { return present[i * nb + j] != 0; };

  for (std::size_t kk = 0; kk < nb; ++kk) {
    if (!has(kk, kk)) throw std::domain_error("missing diagonal block");
    lu0(blk(kk, kk), s);
    {
      TaskGroup g(pool);
      for (std::size_t jj = kk + 1; jj < nb; ++jj) {
        if (has(kk, jj)) g.spawn([&, jj] { fwd(blk(kk, kk), blk(kk, jj), s); });
      }
      for (std::size_t ii = kk + 1; ii < nb; ++ii) {
        if (has(ii, kk)) g.spawn([&, ii] { bdiv(blk(kk, kk), blk(ii, kk), s); });
      }
      g.wait();
    }
    {
      TaskGroup g(pool);
      for (std::size_t ii = kk + 1; ii < nb; ++ii) {
        if (!has(ii, kk)) continue;
        for (std::size_t jj = kk + 1; jj < nb; ++jj) {
          if (!has(kk, jj)) continue;
          g.spawn([&, ii, jj] {
            // Fill-in: an absent block is already all zeros.
            present[ii * nb + jj] = 1;
            bmod(blk(ii, kk), blk(kk, jj), blk(ii, jj), s);
          });
        }
      }
      g.wait();
    }
  }
}

void write_u32(std::vector<std::uint32_t>& dst, std::span<const std::byte> scalars) {
  ScalarReader r(scalars);
  for (auto& v : dst) v = r.next<std::uint32_t>();
}

}  // namespace

std::vector<Share> ceil_shares(std::size_t n, std::size_t k) {
  if (k == 0) throw std::invalid_argument("need at least one share");
  std::size_t chunk = (n + k - 1) / k;
  std::vector<Share> out;
  for (std::size_t d = 0; d < k; ++d) {
    std::size_t b = std::min(n, d * chunk);
    out.push_back({b, std::min(chunk, n - b)});
  }
  return out;
}

std::vector<Share> balanced_shares(std::size_t n, std::size_t k) {
  if (k == 0) throw std::invalid_argument("need at least one share");
  std::vector<Share> out;
  std::size_t b = 0;
  for (std::size_t d = 0; d < k; ++d) {
    std::size_t c = n / k + (d < n % k ? 1 : 0);
    out.push_back({b, c});
    b += c;
  }
  return out;
}

std::vector<int> fib_frontier(int n, int k) {
  if (n < 0 || k < 1) throw std::invalid_argument("fib frontier needs n >= 0 and k >= 1");
  std::vector<int> f{n};
  while (static_cast<int>(f.size()) < k) {
    auto it = std::max_element(f.begin(), f.end());  // first maximum
    if (*it < 2) break;
    int m = *it;
    *it = m - 1;
    f.insert(it + 1, m - 2);
  }
  return f;
}

std::vector<int> pick_devices(const Runtime& rt, int k) {
  if (k < 1) throw std::invalid_argument("device count must be at least 1");
  int workers = rt.device_count() - 1;
  if (workers == 0 && k == 1) return {0};
  if (k > workers) {
    throw std::invalid_argument("requested " + std::to_string(k) + " devices but only " +
                                std::to_string(workers) + " workers are running");
  }
  std::vector<int> out;
  for (int d = 1; d <= k; ++d) out.push_back(d);
  return out;
}

std::uint32_t mandel_iterations(double cr, double ci, std::uint32_t max_iter) {
  double zr = 0.0, zi = 0.0;
  std::uint32_t it = 0;
  for (; it < max_iter; ++it) {
    double zr2 = zr * zr, zi2 = zi * zi;
    if (zr2 + zi2 > 4.0) break;
    zi = 2.0 * zr * zi + ci;
    zr = zr2 - zi2 + cr;
  }
  return it;
}

std::pair<double, double> mandel_point(const MandelParams& p, std::uint32_t x, std::uint32_t y) {
  double scale = 3.0 / p.width;
  return {-0.5 + (static_cast<double>(x) - p.width / 2.0) * scale,
          (static_cast<double>(y) - p.height / 2.0) * scale};
}

std::vector<std::uint8_t> mandel_rows(const MandelParams& p, std::uint32_t row0,
                                      std::uint32_t rows) {
  std::vector<std::uint8_t> out(std::size_t{rows} * p.width);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t x = 0; x < p.width; ++x) {
      auto [cr, ci] = mandel_point(p, x, row0 + r);
      out[std::size_t{r} * p.width + x] = static_cast<std::uint8_t>(mandel_iterations(cr, ci, p.max_iter) % 256);
    }
  }
  return out;
}

void write_pgm(const std::string& path, const MandelParams& p,
               std::span<const std::uint8_t> pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  bool pgm = path.size() >= 4 && path.compare(path.size() - 4, 4, ".pgm") == 0;
  if (pgm) out << "P5\n" << p.width << " " << p.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::uint64_t fib_tasks(WorkerPool& pool, int n) {
  if (n < 20) return fib_seq(n);
  std::uint64_t x = 0, y = 0;
  TaskGroup g(pool);
  g.spawn([&] { x = fib_tasks(pool, n - 1); });
  g.spawn([&] { y = fib_tasks(pool, n - 2); });
  g.wait();
  return x + y;
}

std::uint64_t fib_iterative(int n) {
  std::uint64_t a = 0, b = 1;
  for (int i = 0; i < n; ++i) {
    auto t = a + b;
    a = b;
    b = t;
  }
  return a;
}

BlockMatrix generate_submatrix(std::size_t total_blocks, std::size_t block_size,
                               std::size_t first, std::size_t nblocks) {
  if (first + nblocks > total_blocks) throw std::invalid_argument("sub-matrix out of range");
  BlockMatrix m;
  m.nblocks = nblocks;
  m.block_size = block_size;
  m.values.assign(nblocks * nblocks * block_size * block_size, 0.0);
  m.present.assign(nblocks * nblocks, 0);
  for (std::size_t li = 0; li < nblocks; ++li) {
    for (std::size_t lj = 0; lj < nblocks; ++lj) {
      std::size_t i = first + li, j = first + lj;
      if (i != j && (i + j) % 3 != 0) continue;
      m.present[li * nblocks + lj] = 1;
      Lcg rng(i * 65536 + j);
      double* b = m.block(li, lj);
      for (std::size_t e = 0; e < block_size * block_size; ++e) b[e] = rng.next_unit();
      if (i == j) {
        for (std::size_t d = 0; d < block_size; ++d) b[d * block_size + d] += static_cast<double>(block_size);
      }
    }
  }
  return m;
}

void sparselu_factor(WorkerPool& pool, BlockMatrix& m) {
  factor_blocks(pool, m.nblocks, m.block_size, m.values, m.present);
}

double lu_relative_residual(const BlockMatrix& a, const BlockMatrix& f) {
  std::size_t s = a.block_size, n = a.nblocks * s;
  auto at = [&](const BlockMatrix& m, std::size_t r, std::size_t c) {
    return m.block(r / s, c / s)[(r % s) * s + (c % s)];
  };
  double diff_norm = 0.0, a_norm = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double diff_row = 0.0, a_row = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double sum = 0.0;
      for (std::size_t k = 0; k <= std::min(r, c); ++k) {
        double l = k == r ? 1.0 : at(f, r, k);
        sum += l * at(f, k, c);
      }
      diff_row += std::abs(sum - at(a, r, c));
      a_row += std::abs(at(a, r, c));
    }
    diff_norm = std::max(diff_norm, diff_row);
    a_norm = std::max(a_norm, a_row);
  }
  return a_norm == 0.0 ? diff_norm : diff_norm / a_norm;
}

std::vector<double> align_table(std::uint64_t seed) {
  Lcg rng(seed);
  std::vector<double> t(kAlignTableSize);
  for (auto& v : t) v = rng.next_unit();
  return t;
}

double align_score(std::span<const double> t1, std::span<const double> t2, std::uint64_t i,
                   std::uint32_t work) {
  double acc = 0.0;
  for (std::uint64_t j = 0; j < work; ++j) {
    acc = acc * 1.0000001 + t1[(i * 31 + j) % kAlignTableSize] * t2[(i * 17 + j) % kAlignTableSize];
  }
  return acc;
}

void register_kernels(ProgramImage& image) {
  image.add_kernel("noop", [](ExecContext&, std::span<const Region>, std::span<const std::byte>) {});

  image.add_kernel("vecadd", [](ExecContext& ctx, std::span<const Region> r,
                                std::span<const std::byte>) {
    auto a = as_array<const double>(r[0]);
    auto b = as_array<const double>(r[1]);
    auto c = as_array<double>(r[2]);
    if (a.size() != c.size() || b.size() != c.size()) throw std::invalid_argument("vecadd sizes differ");
    ctx.parallel_for(0, static_cast<std::int64_t>(c.size()), [&](std::int64_t i) { c[i] = a[i] + b[i]; });
  });

  image.add_kernel("mandelbrot", [](ExecContext& ctx, std::span<const Region> r,
                                    std::span<const std::byte> scalars) {
    std::vector<std::uint32_t> v(5);
    write_u32(v, scalars);
    MandelParams p{v[0], v[1], v[2]};
    std::uint32_t row0 = v[3], rows = v[4];
    auto out = as_array<std::uint8_t>(r[0]);
    if (out.size() != std::size_t{rows} * p.width) throw std::invalid_argument("mandelbrot strip size");
    ctx.parallel_for(0, rows, [&](std::int64_t row) {
      for (std::uint32_t x = 0; x < p.width; ++x) {
        auto [cr, ci] = mandel_point(p, x, row0 + static_cast<std::uint32_t>(row));
        out[static_cast<std::size_t>(row) * p.width + x] =
            static_cast<std::uint8_t>(mandel_iterations(cr, ci, p.max_iter) % 256);
      }
    });
  });

  image.add_kernel("fib", [](ExecContext& ctx, std::span<const Region> r,
                             std::span<const std::byte> scalars) {
    int n = static_cast<int>(ScalarReader(scalars).next<std::uint32_t>());
    as_array<std::uint64_t>(r[0])[0] = fib_tasks(ctx.pool(), n);
  });

  image.add_kernel("sparselu", [](ExecContext& ctx, std::span<const Region> r,
                                  std::span<const std::byte> scalars) {
    ScalarReader sr(scalars);
    auto nb = sr.next<std::uint32_t>();
    auto s = sr.next<std::uint32_t>();
    factor_blocks(ctx.pool(), nb, s, as_array<double>(r[0]), as_array<std::uint8_t>(r[1]));
  });

  auto t1 = image.add_global("align_t1", [] {
    auto t = align_table(1);
    auto raw = std::as_bytes(std::span(t));
    return Bytes(raw.begin(), raw.end());
  }());
  auto t2 = image.add_global("align_t2", [] {
    auto t = align_table(2);
    auto raw = std::as_bytes(std::span(t));
    return Bytes(raw.begin(), raw.end());
  }());
  image.add_kernel("align", [t1, t2](ExecContext& ctx, std::span<const Region> r,
                                     std::span<const std::byte> scalars) {
    ScalarReader sr(scalars);
    auto lo = sr.next<std::uint32_t>();
    auto work = sr.next<std::uint32_t>();
    auto table1 = as_array<const double>(ctx.globals()[t1.index]);
    auto table2 = as_array<const double>(ctx.globals()[t2.index]);
    // The mapped section's length is the element count.
    auto out = as_array<double>(r[0]);
    ctx.parallel_for(0, static_cast<std::int64_t>(out.size()), [&](std::int64_t i) {
      out[i] = align_score(table1, table2, lo + static_cast<std::uint64_t>(i), work);
    });
  });
}

ProgramImage make_image() {
  ProgramImage image;
  register_kernels(image);
  return image;
}

Timed<std::vector<double>> vecadd(Runtime& rt, std::span<const double> a,
                                  std::span<const double> b, int k) {
  if (a.size() != b.size()) throw std::invalid_argument("vecadd inputs differ in length");
  auto devices = pick_devices(rt, k);
  auto shares = ceil_shares(a.size(), devices.size());
  std::vector<double> c(a.size());
  auto t0 = Clock::now();
  offload_all(rt, devices, [&](std::size_t i, int dev) {
    auto sh = shares[i];
    return rt.target(dev, "vecadd",
                     {map_to(a, sh.begin, sh.count), map_to(b, sh.begin, sh.count),
                      map_from(c, sh.begin, sh.count)},
                     {}, true);
  });
  return {std::move(c), seconds_since(t0)};
}

Timed<std::vector<std::uint8_t>> mandelbrot(Runtime& rt, const MandelParams& p, int k) {
  auto devices = pick_devices(rt, k);
  auto strips = balanced_shares(p.height, devices.size());
  std::vector<std::uint8_t> image(std::size_t{p.width} * p.height);
  auto t0 = Clock::now();
  offload_all(rt, devices, [&](std::size_t i, int dev) {
    auto sh = strips[i];
    auto scalars = ScalarPack()
                       .add(p.width)
                       .add(p.height)
                       .add(p.max_iter)
                       .add(static_cast<std::uint32_t>(sh.begin))
                       .add(static_cast<std::uint32_t>(sh.count))
                       .take();
    return rt.target(dev, "mandelbrot", {map_from(image, sh.begin * p.width, sh.count * p.width)},
                     std::move(scalars), true);
  });
  return {std::move(image), seconds_since(t0)};
}

Timed<FibResult> fib(Runtime& rt, int n, int k) {
  auto devices = pick_devices(rt, k);
  FibResult res;
  res.frontier = fib_frontier(n, static_cast<int>(devices.size()));
  std::vector<std::uint64_t> partial(res.frontier.size());
  devices.resize(res.frontier.size());
  auto t0 = Clock::now();
  offload_all(rt, devices, [&](std::size_t i, int dev) {
    return rt.target(dev, "fib", {map_from(partial, i, 1)},
                     ScalarPack().add(static_cast<std::uint32_t>(res.frontier[i])).take(), true);
  });
  for (auto v : partial) res.value += v;
  return {std::move(res), seconds_since(t0)};
}

Timed<SparseLuResult> sparselu(Runtime& rt, const SparseLuParams& p, int k) {
  auto devices = pick_devices(rt, k);
  if (p.blocks == 0 || p.blocks % devices.size() != 0) {
    throw std::invalid_argument(std::to_string(p.blocks) + " blocks cannot be split over " +
                                std::to_string(devices.size()) + " devices");
  }
  std::size_t nb = p.blocks / devices.size();
  SparseLuResult res;
  for (std::size_t d = 0; d < devices.size(); ++d) {
    res.original.push_back(generate_submatrix(p.blocks, p.block_size, d * nb, nb));
  }
  res.factored = res.original;
  auto t0 = Clock::now();
  offload_all(rt, devices, [&](std::size_t i, int dev) {
    auto& m = res.factored[i];
    return rt.target(dev, "sparselu", {map_tofrom(m.values), map_tofrom(m.present)},
                     ScalarPack()
                         .add(static_cast<std::uint32_t>(nb))
                         .add(static_cast<std::uint32_t>(p.block_size))
                         .take(),
                     true);
  });
  return {std::move(res), seconds_since(t0)};
}

Timed<std::vector<double>> align(Runtime& rt, const AlignParams& p, int k) {
  auto devices = pick_devices(rt, k);
  auto shares = ceil_shares(p.m, devices.size());
  std::vector<double> scores(p.m);
  auto t0 = Clock::now();
  offload_all(rt, devices, [&](std::size_t i, int dev) {
    auto sh = shares[i];
    return rt.target(dev, "align", {map_from(scores, sh.begin, sh.count)},
                     ScalarPack()
                         .add(static_cast<std::uint32_t>(sh.begin))
                         .add(p.work)
                         .take(),
                     true);
  });
  return {std::move(scores), seconds_since(t0)};
}

Timed<int> noop(Runtime& rt, int k) {
  auto devices = pick_devices(rt, k);
  auto t0 = Clock::now();
  offload_all(rt, devices,
              [&](std::size_t, int dev) { return rt.target(dev, "noop", {}, {}, true); });
  return {static_cast<int>(devices.size()), seconds_since(t0)};
}

Trial make_trial(const std::string& name, const BenchParams& params) {
  if (name == "vecadd") {
    auto a = std::make_shared<std::vector<double>>(params.n);
    auto b = std::make_shared<std::vector<double>>(params.n);
    auto want = std::make_shared<std::vector<double>>(params.n);
    for (std::size_t i = 0; i < params.n; ++i) {
      (*a)[i] = 0.5 * static_cast<double>(i);
      (*b)[i] = 1.0 / static_cast<double>(i + 1);
      (*want)[i] = (*a)[i] + (*b)[i];
    }
    return [a, b, want](Runtime& rt, int k) {
      auto r = vecadd(rt, *a, *b, k);
      return Sample{r.seconds, r.value == *want};
    };
  }
  if (name == "mandelbrot") {
    auto want = std::make_shared<std::vector<std::uint8_t>>(
        mandel_rows(params.mandel, 0, params.mandel.height));
    return [p = params.mandel, want](Runtime& rt, int k) {
      auto r = mandelbrot(rt, p, k);
      return Sample{r.seconds, r.value == *want};
    };
  }
  if (name == "fib") {
    auto want = fib_iterative(params.fib_n);
    return [n = params.fib_n, want](Runtime& rt, int k) {
      auto r = fib(rt, n, k);
      return Sample{r.seconds, r.value.value == want};
    };
  }
  if (name == "sparselu") {
    return [p = params.lu](Runtime& rt, int k) {
      auto r = sparselu(rt, p, k);
      bool ok = true;
      for (std::size_t i = 0; i < r.value.original.size(); ++i) {
        ok = ok && lu_relative_residual(r.value.original[i], r.value.factored[i]) <= 1e-10;
      }
      return Sample{r.seconds, ok};
    };
  }
  if (name == "align") {
    auto t1 = align_table(1), t2 = align_table(2);
    auto want = std::make_shared<std::vector<double>>(params.align.m);
    for (std::uint32_t i = 0; i < params.align.m; ++i) (*want)[i] = align_score(t1, t2, i, params.align.work);
    return [p = params.align, want](Runtime& rt, int k) {
      auto r = align(rt, p, k);
      return Sample{r.seconds, r.value == *want};
    };
  }
  throw std::invalid_argument("unknown benchmark '" + name + "'");
}

std::vector<BenchReport> run_report(Runtime& rt, const std::string& name, const Trial& trial,
                                    std::span<const int> ks, int repeats) {
  if (repeats < 1) throw std::invalid_argument("repeat count must be at least 1");
  std::vector<BenchReport> rows;
  for (int k : ks) {
    BenchReport row{name, k, rt.threads_per_device(), 0.0, true, std::nullopt};
    double total = 0.0;
    for (int r = 0; r < repeats; ++r) {
      Sample s;
      try {
        s = trial(rt, k);
      } catch (const Error& e) {
        std::fprintf(stderr, "nodedev-bench: %s k=%d: %s\n", name.c_str(), k, e.what());
        s = Sample{0.0, false};
      }
      total += s.seconds;
      row.valid = row.valid && s.valid;
    }
    row.mean_seconds = total / repeats;
    rows.push_back(row);
  }
  auto base = std::find_if(rows.begin(), rows.end(), [](const BenchReport& r) { return r.k == 1; });
  if (base != rows.end()) {
    for (auto& r : rows) {
      if (r.mean_seconds > 0.0) r.speedup_vs_k1 = base->mean_seconds / r.mean_seconds;
    }
  }
  return rows;
}

std::string report_csv(std::span<const BenchReport> rows) {
  std::ostringstream out;
  out << "benchmark,k,threads_per_device,mean_seconds,valid,speedup_vs_k1\n";
  for (const auto& r : rows) {
    char mean[64];
    std::snprintf(mean, sizeof mean, "%.6f", r.mean_seconds);
    out << r.benchmark << ',' << r.k << ',' << r.threads_per_device << ',' << mean << ','
        << (r.valid ? "OK" : "INVALID") << ',';
    if (r.speedup_vs_k1) {
      char sp[64];
      std::snprintf(sp, sizeof sp, "%.3f", *r.speedup_vs_k1);
      out << sp;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace nodedev::bench
