#pragma once

// f32 matmul kernels. Accumulation order is a fixed function of the operand
// shapes only, so results are bit-identical across runs and thread counts.

#include "spt/common.hpp"

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace spt {

// dot over k with 8 fixed lanes; vectorizes without -ffast-math
inline float vec_dot(const float * a, const float * b, int64_t k) {
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    const int64_t k8 = k - (k % 8);
    for (int64_t i = 0; i < k8; i += 8) {
        for (int j = 0; j < 8; ++j) {
            acc[j] += a[i + j] * b[i + j];
        }
    }
    float tail = 0.0f;
    for (int64_t i = k8; i < k; ++i) {
        tail += a[i] * b[i];
    }
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// y += s * x
inline void vec_axpy(float * y, const float * x, float s, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        y[i] += s * x[i];
    }
}

namespace detail {
inline bool parallel_worth(int64_t flops) {
    return thread_count() > 1 && flops >= (1 << 18);
}
} // namespace detail

// c += a · b           a:[m,k] b:[k,n] c:[m,n]
inline void mm_nn(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n) {
    const bool par = detail::parallel_worth(2 * m * k * n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        float * crow = c + i * n;
        const float * arow = a + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            vec_axpy(crow, b + kk * n, arow[kk], n);
        }
    }
    (void) par;
}

// c += a · bᵀ          a:[m,k] b:[n,k] c:[m,n]
inline void mm_nt(const float * a, const float * b, float * c, int64_t m, int64_t n, int64_t k) {
    const bool par = detail::parallel_worth(2 * m * k * n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        const float * arow = a + i * k;
        float * crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            crow[j] += vec_dot(arow, b + j * k, k);
        }
    }
    (void) par;
}

// c += aᵀ · b          a:[m,k] b:[m,n] c:[k,n]
inline void mm_tn(const float * a, const float * b, float * c, int64_t m, int64_t k, int64_t n) {
    const bool par = detail::parallel_worth(2 * m * k * n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (int64_t i = 0; i < k; ++i) {
        float * crow = c + i * n;
        for (int64_t mm = 0; mm < m; ++mm) {
            vec_axpy(crow, b + mm * n, a[mm * k + i], n);
        }
    }
    (void) par;
}

} // namespace spt
