#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace rsde {

// Runs body(0..n-1) on a small shared-nothing pool.  Callers own any result
// aggregation; writing to per-index slots keeps reductions deterministic.
// The first exception thrown by any worker is rethrown on the caller.
inline void parallel_for(int n, const std::function<void(int)>& body) {
  unsigned hw = std::thread::hardware_concurrency();
  int workers = std::min<int>(hw ? static_cast<int>(hw) : 2, 8);
  if (n < 4 || workers < 2) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (!failed.load()) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace rsde
