#pragma once

// Fan-out over independent work items. Callers write results into per-item
// slots and combine them in index order, so outputs do not depend on the
// worker count.

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace pcfold {

// PCFOLD_THREADS if set to a positive integer, else the hardware concurrency.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("PCFOLD_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Calls fn(item, worker) for every item in [0, n). The first exception thrown
// by any call is rethrown after all workers stop.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t item, std::size_t worker)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i, w);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          failed = true;
        }
      }
    });
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace pcfold
