#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace delmix {

// Resolves a worker cap: explicit value, then DELMIX_THREADS, then 1.
inline int resolve_threads(int requested) {
  int n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("DELMIX_THREADS")) n = std::atoi(env);
  }
  if (n <= 0) n = 1;
  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw > 0) n = std::min(n, hw);
  return std::max(n, 1);
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Callers must
// write results into per-index slots so the outcome is identical for any
// thread count.
inline void parallel_for(int n, int threads,
                         const std::function<void(int begin, int end)>& body) {
  if (n <= 0) return;
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int begin = t * chunk;
    const int end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  for (auto& th : pool) th.join();
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace delmix
