#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <optional>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "gradmap/error.hpp"

namespace gradmap {

/// Thread count from GRADMAP_THREADS, else the number of hardware threads.
inline std::size_t default_threads() {
    if (const char* env = std::getenv("GRADMAP_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
        throw InputError(std::string("GRADMAP_THREADS must be a positive integer, got '") + env + "'");
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Evaluates fn(0..n-1) on up to `threads` workers and returns results in
/// index order, so any reduction the caller performs over them is
/// independent of scheduling. The first exception by index is rethrown.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t threads, Fn&& fn) {
    using R = std::invoke_result_t<Fn&, std::size_t>;
    std::vector<std::optional<R>> slots(n);
    std::vector<std::exception_ptr> errors(n);
    const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) slots[i].emplace(fn(i));
    } else {
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    slots[i].emplace(fn(i));
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    std::vector<R> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

} // namespace gradmap
