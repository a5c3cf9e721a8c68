#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dfm {

// Error taxonomy, mapped to process exit codes by the CLI:
// config_error -> 2, numeric_error -> 3, precondition_error -> 4.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct precondition_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Counter-based RNG.
//
// Every random draw is a pure function of (seed, word0, word1, ...), so batches
// are reproducible and independent of execution order and thread count.
// ---------------------------------------------------------------------------

namespace rng {

inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                         std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t h = splitmix64(seed ^ 0x2545f4914f6cdd1dULL);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    h = splitmix64(h ^ d);
    return h;
}

// uniform in [0, 1)
inline double uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                      std::uint64_t c = 0, std::uint64_t d = 0) {
    return static_cast<double>(mix(seed, a, b, c, d) >> 11) * 0x1.0p-53;
}

// standard normal via Box-Muller on two decorrelated counters
inline double normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                     std::uint64_t c = 0, std::uint64_t d = 0) {
    const double u1 = uniform(seed, a, b, c, d ^ 0x517cc1b727220a95ULL);
    const double u2 = uniform(seed, a, b, c, d ^ 0x6c62272e07bb0142ULL);
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * M_PI * u2);
}

// index into a cumulative distribution; cdf must end at ~1
inline int categorical_from_cdf(std::span<const double> cdf, double u) {
    int lo = 0, hi = static_cast<int>(cdf.size()) - 1;
    while (lo < hi) {
        const int mid = (lo + hi) / 2;
        if (u < cdf[static_cast<std::size_t>(mid)]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    return lo;
}

}  // namespace rng

// Chunked parallel loop. Results must not depend on the partition: workers get
// disjoint index ranges and may not share mutable state.
inline void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (threads <= 0) {
        threads = static_cast<int>(std::thread::hardware_concurrency());
        if (threads <= 0) threads = 1;
    }
    if (threads == 1 || n < 2048) {
        body(0, n);
        return;
    }
    const std::int64_t chunk = (n + threads - 1) / threads;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        const std::int64_t lo = w * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace dfm
