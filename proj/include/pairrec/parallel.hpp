#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace pairrec {

/// Worker cap: PAIRREC_THREADS if set (>0), else hardware concurrency.
inline unsigned max_threads() {
    if (const char* env = std::getenv("PAIRREC_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n > 0) return static_cast<unsigned>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

/// Static block partition of [0, n) across workers. Each index is handled
/// by exactly one worker and results are written by index, so the output
/// does not depend on the worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const unsigned workers = std::min<std::size_t>(max_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn] {
            for (std::size_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace pairrec
