#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace vdpm {

/// Worker count for parallel_for: VDPM_THREADS if set (0 or 1 disables
/// threading), otherwise hardware concurrency.
inline int thread_count() {
    if (const char* env = std::getenv("VDPM_THREADS")) {
        const int n = std::atoi(env);
        return n < 1 ? 1 : n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs body(i) for i in [0, n). Each index is processed exactly once and
/// bodies must only write to disjoint per-index slots; results are then
/// independent of the schedule.
template <typename F>
void parallel_for(int64_t n, F&& body) {
    const int workers = thread_count();
    if (workers <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    const int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const int64_t lo = w * chunk;
        const int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (int64_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// Monotonic wall clock in seconds, for throughput reporting.
inline double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

} // namespace vdpm
