#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace calcscore {

inline constexpr std::string_view kVersion = "1.0.0";

/// Error categories shared by every module. The CLI maps each one to a
/// distinct exit code.
enum class ErrorKind {
    invalid_argument,
    malformed_header,
    size_mismatch,
    unknown_class_code,
    missing_input,
    fingerprint_mismatch,
    schema_violation,
    numeric,
    domain,
    io_error,
};

inline std::string_view to_string(ErrorKind k) {
    switch (k) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::malformed_header: return "malformed_header";
    case ErrorKind::size_mismatch: return "size_mismatch";
    case ErrorKind::unknown_class_code: return "unknown_class_code";
    case ErrorKind::missing_input: return "missing_input";
    case ErrorKind::fingerprint_mismatch: return "fingerprint_mismatch";
    case ErrorKind::schema_violation: return "schema_violation";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::domain: return "domain";
    case ErrorKind::io_error: return "io_error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

/// 64-bit FNV-1a. Used for architecture fingerprints and input hashes.
class Fnv1a {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string hash_string(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return hex64(h.digest());
}

inline std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::missing_input, "cannot open " + path);
    Fnv1a h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return hex64(h.digest());
}

/// Default worker count: CALCSCORE_THREADS if set, else 1.
inline int default_threads() {
    if (const char* env = std::getenv("CALCSCORE_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

/// Runs fn(i) for i in [0, n) over `threads` workers with a static
/// contiguous partition. Each index is handled by exactly one worker, so
/// callers that write disjoint outputs get deterministic results.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    threads = std::clamp(threads, 1, std::max(1, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        int begin = n * t / threads;
        int end = n * (t + 1) / threads;
        pool.emplace_back([=, &fn] {
            for (int i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace calcscore
