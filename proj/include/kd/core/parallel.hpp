#pragma once

#include <atomic>
#include <cstdint>
#include <thread>
#include <utility>
#include <vector>

namespace kd {

// Work decomposition for data-parallel layer arithmetic. Chunk boundaries are
// a function of the item count only, never of the worker count, so results
// that are accumulated per chunk and reduced in chunk order are bit-identical
// no matter how many threads execute them.
inline constexpr int64_t kMaxParallelChunks = 8;

inline int64_t parallel_chunk_count(int64_t n) {
  return n < kMaxParallelChunks ? (n < 1 ? 1 : n) : kMaxParallelChunks;
}

inline std::pair<int64_t, int64_t> parallel_chunk_range(int64_t n, int64_t chunks, int64_t c) {
  return {c * n / chunks, (c + 1) * n / chunks};
}

// fn(chunk_index, begin, end) over [0, n). Chunks run on up to
// hardware_concurrency threads; each chunk must only write state owned by it.
template <typename Fn>
void parallel_for_chunks(int64_t n, Fn&& fn) {
  if (n <= 0) return;
  const int64_t chunks = parallel_chunk_count(n);
  unsigned workers = std::thread::hardware_concurrency();
  if (workers == 0) workers = 1;
  if (workers > static_cast<unsigned>(chunks)) workers = static_cast<unsigned>(chunks);
  if (chunks == 1 || workers <= 1) {
    for (int64_t c = 0; c < chunks; ++c) {
      auto [b, e] = parallel_chunk_range(n, chunks, c);
      fn(c, b, e);
    }
    return;
  }
  std::atomic<int64_t> next{0};
  auto run = [&] {
    for (int64_t c; (c = next.fetch_add(1)) < chunks;) {
      auto [b, e] = parallel_chunk_range(n, chunks, c);
      fn(c, b, e);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned t = 0; t + 1 < workers; ++t) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
}

}  // namespace kd
