#pragma once
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace sde {

// Worker cap: SDE_THREADS env var wins, otherwise hardware concurrency.
inline int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("SDE_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? int(hw) : 1;
  }();
  return cached;
}

// Splits [0, n) into contiguous chunks, one per worker. Deterministic as long
// as the body only writes disjoint outputs (all call sites do).
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
  if (n <= 0) return;
  int workers = max_threads();
  if (workers <= 1 || n < 256) {
    body(0, n);
    return;
  }
  if (int64_t(workers) > n) workers = int(n);
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(0, std::min<int64_t>(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace sde
