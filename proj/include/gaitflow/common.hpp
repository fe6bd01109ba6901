#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gaitflow {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and read via memcpy");

// Exit-code mapping: UsageError -> 1, DataError -> 2, NumericError -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- binary io

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw DataError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw DataError(std::string("truncated read: ") + what);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v;
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

inline void write_magic(std::ostream& os, const char magic[5]) {
    write_bytes(os, magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[5], const std::string& path) {
    char got[4];
    read_bytes(is, got, 4, "magic");
    if (std::memcmp(got, magic, 4) != 0)
        throw DataError("bad magic in " + path + " (expected " + magic + ")");
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    return is;
}

// ---------------------------------------------------------------- rng

// splitmix64; used to derive independent stream seeds from (seed, tags).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    return mix64(mix64(mix64(seed ^ mix64(a)) ^ mix64(b)) ^ mix64(c));
}

// ---------------------------------------------------------------- threading

inline unsigned default_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n ? n : 1;
}

// Items are pulled dynamically; only valid for order-independent (pure) work.
template <typename Fn>
void parallel_for(size_t n, unsigned threads, Fn&& fn) {
    if (n == 0) return;
    if (threads <= 1 || n == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    unsigned use = static_cast<unsigned>(std::min<size_t>(threads, n));
    std::exception_ptr err;
    std::atomic<bool> failed{false};
    std::mutex err_mu;
    auto work = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= n || failed.load(std::memory_order_relaxed)) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
                return;
            }
        }
    };
    for (unsigned t = 0; t < use; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------- numerics

inline bool all_finite(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

inline void require_finite(const std::vector<float>& v, const char* what) {
    if (!all_finite(v.data(), v.size()))
        throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace gaitflow
