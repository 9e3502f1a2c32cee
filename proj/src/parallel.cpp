#include "avatar/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace avatar {
namespace {

int default_threads() {
  if (const char* env = std::getenv("AVATAR_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v > 0) return v;
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::atomic<int>& configured_threads() {
  static std::atomic<int> threads{default_threads()};
  return threads;
}

}  // namespace

int thread_count() { return configured_threads().load(); }

void set_thread_count(int threads) { configured_threads().store(std::max(1, threads)); }

int chunk_count(std::size_t count) {
  if (count == 0) return 0;
  return static_cast<int>(std::min<std::size_t>(count, static_cast<std::size_t>(thread_count())));
}

void parallel_for(std::size_t count,
                  const std::function<void(int, std::size_t, std::size_t)>& fn) {
  const int chunks = chunk_count(count);
  if (chunks == 0) return;
  auto bounds = [&](int c) { return count * static_cast<std::size_t>(c) / chunks; };
  if (chunks == 1) {
    fn(0, 0, count);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(chunks - 1);
  for (int c = 1; c < chunks; ++c) {
    workers.emplace_back([&, c] { fn(c, bounds(c), bounds(c + 1)); });
  }
  fn(0, bounds(0), bounds(1));
  for (auto& w : workers) w.join();
}

}  // namespace avatar
