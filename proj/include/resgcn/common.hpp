#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace resgcn {

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch broadly; the concrete type tells them what went wrong.
struct dimension_error : std::runtime_error {
    explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct parse_error : std::runtime_error {
    explicit parse_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct state_error : std::runtime_error {
    explicit state_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct spec_error : std::runtime_error {
    explicit spec_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct topology_error : std::runtime_error {
    explicit topology_error(const std::string& msg) : std::runtime_error(msg) {}
};
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("RESGCN_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return n;
}

// Fork-join loop over [0, n). Each chunk is processed start-to-end by exactly
// one worker, so results are bitwise independent of the worker count as long
// as chunks write disjoint outputs.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
    const int workers = thread_count();
    if (n <= 0) return;
    if (workers <= 1 || n == 1) {
        fn(std::int64_t{0}, n);
        return;
    }
    const int chunks = static_cast<int>(std::min<std::int64_t>(workers, n));
    const std::int64_t step = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(chunks - 1));
    for (int c = 1; c < chunks; ++c) {
        const std::int64_t b = c * step;
        const std::int64_t e = std::min<std::int64_t>(n, b + step);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    fn(std::int64_t{0}, std::min<std::int64_t>(n, step));
    for (auto& t : pool) t.join();
}

}  // namespace resgcn
