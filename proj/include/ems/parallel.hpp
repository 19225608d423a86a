#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace ems {

// Runs fn(i) for i in [0, n). With jobs <= 1 the loop is serial; otherwise
// work items are claimed from a shared counter. Callers must ensure fn(i)
// writes only to slot i so results are independent of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    unsigned hw = std::thread::hardware_concurrency();
    int workers = static_cast<int>(std::min<std::size_t>(
        n, std::min<std::size_t>(static_cast<std::size_t>(jobs), hw ? hw : 2u)));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace ems
