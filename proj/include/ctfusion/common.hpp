#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, thread pool helper,
// numeric guards. Everything else in the library builds on this header.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ctfusion {

// Error kinds map onto CLI exit codes: config/usage -> 1, data/format -> 2.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArgError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Global NaN guard. When on, every forward op verifies its output is finite.
// Off by default (costs a pass over the data); tests and `gradcheck` turn it on.
inline std::atomic<bool>& nan_guard_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}
inline void set_nan_guard(bool on) { nan_guard_flag().store(on, std::memory_order_relaxed); }
inline bool nan_guard_enabled() { return nan_guard_flag().load(std::memory_order_relaxed); }

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
    return mix_seed(mix_seed(a, b, c), d);
}

// Deterministic RNG. mt19937_64 supplies the bits; the float mappings are
// spelled out here instead of using std distributions so that streams are
// reproducible across standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t bits() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, pair cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    // [0, n)
    int64_t randint(int64_t n) {
        return static_cast<int64_t>(static_cast<unsigned __int128>(gen_()) * static_cast<uint64_t>(n) >> 64);
    }

    template <class V>
    void shuffle(V& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            int64_t j = randint(i + 1);
            std::swap(v[i], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Worker cap: CT_FUSION_THREADS env var, else hardware concurrency.
inline int max_threads() {
    static int n = [] {
        if (const char* env = std::getenv("CT_FUSION_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return n;
}

// Splits [0, n) into contiguous chunks, one worker per chunk. Workers write
// disjoint ranges, so results are bit-identical for any thread count.
template <class F>
void parallel_for(int64_t n, F&& body) {
    int threads = max_threads();
    if (threads <= 1 || n < 2) {
        body(int64_t{0}, n);
        return;
    }
    if (threads > n) threads = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads) - 1);
    int64_t chunk = (n + threads - 1) / threads;
    for (int t = 1; t < threads; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(int64_t{0}, std::min<int64_t>(n, chunk));
    for (auto& th : pool) th.join();
}

// printf-style %.6g, used everywhere a number lands in an exported file
inline std::string fmt_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace ctfusion
