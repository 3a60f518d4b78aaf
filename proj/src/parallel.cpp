#include "fanct/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fanct {

namespace {
std::atomic<unsigned> g_thread_override{0};
}

void set_thread_count(unsigned n) { g_thread_override.store(n); }

unsigned thread_count() {
  unsigned forced = g_thread_override.load();
  if (forced != 0) return forced;
  if (const char* e = std::getenv("FANCT_THREADS")) {
    long v = std::strtol(e, nullptr, 10);
    if (v >= 1 && v <= 4096) return static_cast<unsigned>(v);
  }
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

void parallel_for_ranges(std::size_t begin, std::size_t end,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  if (begin >= end) return;
  std::size_t total = end - begin;
  std::size_t chunks = std::min(total, kRangeChunks);
  std::size_t per = (total + chunks - 1) / chunks;

  unsigned workers = std::min<std::size_t>(thread_count(), chunks);
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      std::size_t lo = begin + c * per;
      std::size_t hi = std::min(end, lo + per);
      if (lo < hi) fn(lo, hi);
    }
    return;
  }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex err_mu;
  auto work = [&] {
    for (;;) {
      if (failed.load(std::memory_order_relaxed)) return;
      std::size_t c = next.fetch_add(1);
      if (c >= chunks) return;
      std::size_t lo = begin + c * per;
      std::size_t hi = std::min(end, lo + per);
      if (lo >= hi) continue;
      try {
        fn(lo, hi);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        failed.store(true);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& fn) {
  parallel_for_ranges(begin, end, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace fanct
