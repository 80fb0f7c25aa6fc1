#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace roadclip {

/// Worker budget: hardware concurrency capped by the ROADCLIP_THREADS
/// environment variable.  Never below 1.
inline int worker_count() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("ROADCLIP_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) hw = std::min(hw, cap);
    }
    return hw;
}

/// Run fn(i) for i in [0, n).  Work is split into fixed contiguous chunks so
/// the assignment of indices to workers, and therefore every per-index
/// computation, is identical for any worker count.  Callers must keep bodies
/// independent per index; any cross-index reduction stays with the caller in
/// serial index order.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int64_t grain = 1) {
    if (n <= 0) return;
    int workers = worker_count();
    if (workers <= 1 || n < 2 * grain) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int chunks = static_cast<int>(std::min<int64_t>(workers, (n + grain - 1) / grain));
    int64_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int c = 0; c < chunks; ++c) {
        int64_t lo = c * per;
        int64_t hi = std::min<int64_t>(n, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace roadclip
