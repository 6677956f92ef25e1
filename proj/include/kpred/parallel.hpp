#pragma once

#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace kpred {

// Worker count after applying the KPRED_THREADS environment cap.
inline int effective_workers(int requested) {
  int cap = 0;
  if (const char* env = std::getenv("KPRED_THREADS")) cap = std::atoi(env);
  int w = requested < 1 ? 1 : requested;
  if (cap > 0 && w > cap) w = cap;
  return w;
}

// Static block partition over [0, n); each index writes only its own outputs,
// so results do not depend on the worker count.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  workers = effective_workers(workers);
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min<std::size_t>(workers, n);
  std::vector<std::thread> threads;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t]() {
      const std::size_t lo = n * t / w, hi = n * (t + 1) / w;
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (std::thread& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace kpred
