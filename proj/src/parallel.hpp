#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace datasim::detail {

// Runs fn(task) for task in [0, tasks) on up to `workers` threads. Tasks are
// claimed dynamically; callers must write results into per-task slots so the
// outcome does not depend on scheduling. The first exception is rethrown.
template <typename Fn>
void parallel_for(unsigned workers, std::size_t tasks, Fn&& fn) {
  workers = static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(workers, tasks)));
  if (workers <= 1) {
    for (std::size_t t = 0; t < tasks; ++t) fn(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < tasks; t = next++) {
          try {
            fn(t);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = tasks;
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace datasim::detail
