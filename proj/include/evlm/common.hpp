#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace evlm {

// Error taxonomy. Everything thrown by the library is an evlm::Error so the
// CLI can map failures to a single nonzero exit code while tests can assert
// on the kind.
enum class ErrKind {
    dimension,   // shape/rank mismatch
    contract,    // precondition violated by the caller
    structure,   // malformed stream/sequence ordering
    numeric,     // NaN/Inf or degenerate values where finite math is required
    index,       // out-of-range access
    io,          // file missing/corrupt/unwritable
    capacity,    // configured limit exceeded
};

const char* err_kind_name(ErrKind k);

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& msg)
        : std::runtime_error(std::string(err_kind_name(kind)) + ": " + msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

private:
    ErrKind kind_;
};

[[noreturn]] inline void raise(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void check(bool cond, ErrKind kind, const std::string& msg) {
    if (!cond) raise(kind, msg);
}

// Literal-message overload: hot validation paths pay for the string only on failure.
inline void check(bool cond, ErrKind kind, const char* msg) {
    if (!cond) raise(kind, std::string(msg));
}

// Small helper to build messages without pulling in a formatting library.
template <typename... Args>
std::string msg(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

// Deterministic RNG used everywhere randomness is needed. Thin wrapper so the
// engine and distributions are pinned in one place (libstdc++'s mt19937_64 and
// our own uniform/normal draws are stable across runs on one platform).
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return (eng_() >> 11) * (1.0 / 9007199254740992.0);  // 53 mantissa bits
    }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (lo > hi) raise(ErrKind::contract, msg("uniform_int: lo ", lo, " > hi ", hi));
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    // standard normal via Box-Muller (deterministic, no cached spare)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
};

namespace threading {
// Number of threads the OpenMP kernels use. set_threads clamps to >= 1; when
// built without OpenMP it still records the value but kernels run serial.
void set_threads(int n);
int threads();
}  // namespace threading

// FNV-1a 64-bit, used for checkpoint/content hashing.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex64(uint64_t v);

}  // namespace evlm
