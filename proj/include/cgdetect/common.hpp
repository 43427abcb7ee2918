#pragma once

#include <algorithm>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cgdetect {

// Error taxonomy. The CLI maps these onto process exit codes:
// SpecError -> 2, DataError -> 3, NumericError -> 4.
struct SpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : SpecError {
    using SpecError::SpecError;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::shuffle and the distribution classes are not
// guaranteed to produce the same sequences across standard library
// implementations, so everything random in this project goes through Rng:
// a splitmix64-seeded xoshiro256** generator with hand-rolled draws.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    // Derives an independent stream, e.g. Rng(seed).fork(epoch).
    Rng fork(std::uint64_t stream) const {
        std::uint64_t sm = s_[0] ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        return Rng(splitmix64(sm));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, bound) without modulo bias.
    std::uint64_t next_below(std::uint64_t bound) {
        const std::uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller; both draws are consumed to keep the stream position simple.
    double normal() {
        const double u1 = std::max(next_double(), 0x1.0p-53);
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Rejection-sampled truncation at +-2 sigma, the usual init scheme.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        // Fisher-Yates with explicit draws; identical on every platform.
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_below(i)]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
};

// ---------------------------------------------------------------------------
// Threading. Ops parallelize over independent output chunks only, so results
// are bit-identical for any thread count; --deterministic simply forces 1.
// ---------------------------------------------------------------------------

inline int& thread_count_ref() {
    static int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    return n;
}
inline void set_thread_count(int n) { thread_count_ref() = std::max(1, n); }
inline int thread_count() { return thread_count_ref(); }

// Runs fn(begin, end) over disjoint subranges of [0, n). `grain` is the
// smallest n worth threading; expensive per-item work passes a small grain.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                         std::size_t grain = 2048) {
    const int workers = thread_count();
    if (workers <= 1 || n < grain || n < 2) {
        fn(0, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(workers, n);
    const std::size_t step = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t lo = c * step;
        const std::size_t hi = std::min(n, lo + step);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Order-independent accumulation for data-parallel reductions.
// ---------------------------------------------------------------------------

template <typename T>
double pairwise_sum(std::span<const T> v) {
    if (v.empty()) return 0.0;
    if (v.size() <= 8) {
        double acc = 0.0;
        for (const T x : v) acc += static_cast<double>(x);
        return acc;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

template <typename T>
double pairwise_sum(const std::vector<T>& v) {
    return pairwise_sum(std::span<const T>(v.data(), v.size()));
}

// Shortest round-trip decimal rendering; keeps CSV output byte-reproducible.
template <typename T>
std::string format_number(T value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    return std::string(buf, ptr);
}

inline std::string format_number(int value) { return std::to_string(value); }
inline std::string format_number(std::size_t value) { return std::to_string(value); }

}  // namespace cgdetect
