#pragma once

// Shared plumbing: error kinds, seeded RNG substreams, FNV-1a hashing,
// IEEE half conversion, and the thread-count knob.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace spt {

enum class errc {
    invalid_argument,
    shape_mismatch,
    bad_magic,
    truncated_file,
    overlapping_tensors,
    io,
    numeric,
    missing_artifact,
    config,
};

inline const char * errc_name(errc k) {
    switch (k) {
        case errc::invalid_argument:    return "invalid_argument";
        case errc::shape_mismatch:      return "shape_mismatch";
        case errc::bad_magic:           return "bad_magic";
        case errc::truncated_file:      return "truncated_file";
        case errc::overlapping_tensors: return "overlapping_tensors";
        case errc::io:                  return "io";
        case errc::numeric:             return "numeric";
        case errc::missing_artifact:    return "missing_artifact";
        case errc::config:              return "config";
    }
    return "unknown";
}

class error : public std::runtime_error {
public:
    error(errc kind, const std::string & msg)
        : std::runtime_error(std::string(errc_name(kind)) + ": " + msg), kind_(kind) {}
    errc kind() const { return kind_; }

private:
    errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string & msg) {
    throw error(kind, msg);
}

inline void require(bool cond, errc kind, const std::string & msg) {
    if (!cond) fail(kind, msg);
}

//
// hashing (FNV-1a 64) — manifest bookkeeping and seed substreams
//

inline uint64_t fnv1a64(const void * data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto * p = static_cast<const uint8_t *>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) {
    return fnv1a64(s.data(), s.size());
}

inline std::string hex64(uint64_t v) {
    static const char * digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

//
// rng — xoshiro256** seeded via splitmix64. Fully pinned so that runs are
// byte-reproducible across standard libraries. Named substreams keep every
// pipeline stage on its own deterministic stream.
//

inline uint64_t splitmix64(uint64_t & x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class rng {
public:
    explicit rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto & w : s_) w = splitmix64(x);
    }

    static rng substream(uint64_t seed, std::string_view name) {
        return rng(fnv1a64(name) ^ (seed * 0x9e3779b97f4a7c15ull));
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double next_double() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    int64_t next_below(int64_t n) {
        return n > 0 ? int64_t(next_double() * double(n)) : 0;
    }

    float uniform(float lo, float hi) {
        return lo + float(next_double()) * (hi - lo);
    }

    // Box-Muller, one draw per call
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        return mean + stddev * float(z);
    }

    template <typename T>
    void shuffle(std::vector<T> & v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[size_t(next_below(int64_t(i)))]);
        }
    }

private:
    uint64_t s_[4];
};

//
// IEEE 754 half conversion, round-to-nearest-even
//

inline uint16_t f32_to_f16(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    const uint32_t sign = (x >> 16) & 0x8000u;
    const uint32_t abs  = x & 0x7fffffffu;

    if (abs >= 0x7f800000u) {                       // inf / nan
        return uint16_t(sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u));
    }
    if (abs >= 0x477ff000u) {                       // overflows half range
        return uint16_t(sign | 0x7c00u);
    }
    if (abs < 0x38800000u) {                        // subnormal half (or zero)
        const uint32_t shift = 113u - (abs >> 23);
        if (shift > 24u) return uint16_t(sign);
        uint32_t mant = (abs & 0x7fffffu) | 0x800000u;
        const uint32_t q = mant >> shift;
        const uint32_t rem = mant & ((1u << shift) - 1u);
        const uint32_t half = 1u << (shift - 1);
        uint32_t out = q;
        if (rem > half || (rem == half && (q & 1u))) out += 1u;
        return uint16_t(sign | out);
    }
    // normal
    uint32_t out = ((abs >> 13) & 0x3ffu) | ((((abs >> 23) - 112u) & 0x1fu) << 10);
    const uint32_t rem = abs & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (out & 1u))) out += 1u;
    return uint16_t(sign | out);
}

inline float f16_to_f32(uint16_t h) {
    const uint32_t sign = uint32_t(h & 0x8000u) << 16;
    const uint32_t exp  = (h >> 10) & 0x1fu;
    const uint32_t mant = h & 0x3ffu;
    uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {                                    // subnormal
            uint32_t m = mant;
            int e = -1;
            do {
                m <<= 1;
                ++e;
            } while (!(m & 0x400u));
            out = sign | uint32_t(113 - e) << 23 | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 0x1fu) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &out, 4);
    return f;
}

//
// threads — SPT_THREADS caps kernel parallelism; results are identical for
// any thread count (each output element is reduced sequentially by one thread)
//

inline int thread_count() {
    static const int n = [] {
        if (const char * env = std::getenv("SPT_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return std::min(v, 64);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return int(std::min(4u, hw ? hw : 1u));
    }();
    return n;
}

} // namespace spt
