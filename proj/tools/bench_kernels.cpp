// Times the serial reference kernels against their OpenMP counterparts and
// verifies that both produce bitwise-identical output.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <vector>

#include "kd3d/kernels.hpp"
#include "kd3d/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm-up
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = Clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

std::vector<double> random_vec(std::size_t n, kd3d::Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial_ms, double omp_ms, bool same) {
  std::printf("%-22s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   bitwise %s\n",
              name, serial_ms, omp_ms, serial_ms / omp_ms, same ? "OK" : "MISMATCH");
}

}  // namespace

int main() {
  kd3d::Rng rng(7);
  int failures = 0;

  {
    const std::int64_t m = 256, k = 256, n = 256;
    const auto a = random_vec(m * k, rng);
    const auto b = random_vec(k * n, rng);
    std::vector<double> cs(m * n), co(m * n);
    const double ts = time_ms([&] { kd3d::kernels::matmul_serial(a.data(), b.data(), cs.data(), m, k, n); }, 5);
    const double to = time_ms([&] { kd3d::kernels::matmul_omp(a.data(), b.data(), co.data(), m, k, n); }, 5);
    const bool ok = bitwise_equal(cs, co);
    failures += !ok;
    report("matmul 256^3", ts, to, ok);
  }

  {
    const std::int64_t m = 256, k = 256, n = 256;
    const auto a = random_vec(m * k, rng);
    const auto b = random_vec(n * k, rng);
    std::vector<double> cs(m * n), co(m * n);
    const double ts = time_ms([&] { kd3d::kernels::matmul_nt_serial(a.data(), b.data(), cs.data(), m, k, n); }, 5);
    const double to = time_ms([&] { kd3d::kernels::matmul_nt_omp(a.data(), b.data(), co.data(), m, k, n); }, 5);
    const bool ok = bitwise_equal(cs, co);
    failures += !ok;
    report("matmul_nt 256^3", ts, to, ok);
  }

  {
    const std::int64_t ci = 32, co_ch = 32, h = 64, w = 64;
    const auto in = random_vec(ci * h * w, rng);
    const auto wt = random_vec(co_ch * ci * 9, rng);
    const auto bias = random_vec(co_ch, rng);
    std::vector<double> os(co_ch * h * w), oo(co_ch * h * w);
    const double ts = time_ms([&] { kd3d::kernels::conv3x3_serial(in.data(), wt.data(), bias.data(), os.data(), ci, co_ch, h, w); }, 5);
    const double to = time_ms([&] { kd3d::kernels::conv3x3_omp(in.data(), wt.data(), bias.data(), oo.data(), ci, co_ch, h, w); }, 5);
    const bool ok = bitwise_equal(os, oo);
    failures += !ok;
    report("conv3x3 32ch 64x64", ts, to, ok);
  }

  {
    const std::int64_t m = 4096, v = 2048, k = 3;
    const auto q = random_vec(m * 3, rng);
    const auto c = random_vec(v * 3, rng);
    std::vector<std::int64_t> is(m * k), io(m * k);
    std::vector<double> ds(m * k), dd(m * k);
    const double ts = time_ms([&] { kd3d::kernels::knn_serial(q.data(), m, c.data(), v, k, is.data(), ds.data()); }, 5);
    const double to = time_ms([&] { kd3d::kernels::knn_omp(q.data(), m, c.data(), v, k, io.data(), dd.data()); }, 5);
    const bool ok = is == io && bitwise_equal(ds, dd);
    failures += !ok;
    report("knn 4096x2048 k=3", ts, to, ok);
  }

  if (failures) {
    std::printf("%d kernel pair(s) disagreed\n", failures);
    return 1;
  }
  return 0;
}
