#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace twinuq {

// Worker count for embarrassingly parallel loops. TWINUQ_THREADS overrides;
// the default is single-threaded. Results never depend on the schedule:
// every item derives its own rng stream and reductions run in index order.
inline unsigned thread_count() {
    if (const char* env = std::getenv("TWINUQ_THREADS")) {
        const long parsed = std::strtol(env, nullptr, 10);
        if (parsed >= 1) return static_cast<unsigned>(parsed);
    }
    return 1;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
    const unsigned workers = thread_count();
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace twinuq
