#pragma once

// Q4_0 block quantization: 32 weights per block, one half-precision scale,
// 4-bit offset-8 codes. 18-byte blocks, bit-compatible with the common
// ecosystem layout (low nibble = even index).

#include "spt/common.hpp"
#include "spt/kernels.hpp"

#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace spt {

inline constexpr int64_t QK4_0 = 32;

struct q4_block {
    uint16_t d;         // f16 scale
    uint8_t  qs[16];    // 32 4-bit codes, low nibble = even index
};
static_assert(sizeof(q4_block) == 18, "q4_0 block must serialize to 18 bytes");

// d = signed max-abs element / -8; codes = clamp(rne(w/d) + 8, 0, 15).
// Short blocks are zero-padded logically; all-zero blocks get d = 0, codes = 8.
inline q4_block quantize_block(std::span<const float> w) {
    require(w.size() <= size_t(QK4_0), errc::invalid_argument, "quantize_block: more than 32 weights");
    float maxv = 0.0f;
    float amax = 0.0f;
    for (float v : w) {
        require(std::isfinite(v), errc::numeric, "quantize_block: non-finite input");
        const float a = std::fabs(v);
        if (a > amax) {
            amax = a;
            maxv = v;
        }
    }

    q4_block blk{};
    if (amax == 0.0f) {
        blk.d = 0;
        for (auto & b : blk.qs) b = 0x88;
        return blk;
    }

    blk.d = f32_to_f16(maxv / -8.0f);
    // codes are computed against the stored (half-rounded) scale so that
    // quantize∘dequantize∘quantize is a fixed point on the code bytes
    const double d = double(f16_to_f32(blk.d));

    std::array<uint8_t, QK4_0> codes;
    for (int64_t i = 0; i < QK4_0; ++i) {
        const float v = i < int64_t(w.size()) ? w[size_t(i)] : 0.0f;
        // nearbyint rounds half to even under the default FP environment
        long c = std::lround(std::nearbyint(double(v) / d)) + 8;
        c = std::clamp(c, 0l, 15l);
        codes[size_t(i)] = uint8_t(c);
    }
    for (int64_t i = 0; i < 16; ++i) {
        blk.qs[i] = uint8_t(codes[size_t(2 * i)] | (codes[size_t(2 * i + 1)] << 4));
    }
    return blk;
}

inline void dequantize_block(const q4_block & blk, std::span<float> out) {
    require(out.size() == size_t(QK4_0), errc::invalid_argument, "dequantize_block: need 32 outputs");
    const float d = f16_to_f32(blk.d);
    for (int64_t i = 0; i < 16; ++i) {
        const int lo = blk.qs[i] & 0xf;
        const int hi = blk.qs[i] >> 4;
        out[size_t(2 * i)]     = d * float(lo - 8);
        out[size_t(2 * i + 1)] = d * float(hi - 8);
    }
}

// Row-major block-quantized tensor. Rows are padded to a 32 multiple
// independently so each row dequantizes on its own.
struct quant_tensor {
    std::vector<int64_t> shape;
    int64_t blocks_per_row = 0;
    std::vector<q4_block> blocks;

    int64_t numel() const { return shape_numel(shape); }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.empty() ? 0 : shape.back(); }
    int64_t byte_size() const { return int64_t(blocks.size()) * 18; }
};

inline quant_tensor quantize_tensor(std::span<const float> w, std::vector<int64_t> shape) {
    require(shape_numel(shape) == int64_t(w.size()), errc::shape_mismatch, "quantize_tensor: shape/data mismatch");
    quant_tensor q;
    q.shape = std::move(shape);
    const int64_t rows = q.rows();
    const int64_t cols = q.cols();
    q.blocks_per_row = (cols + QK4_0 - 1) / QK4_0;
    q.blocks.reserve(size_t(rows * q.blocks_per_row));
    for (int64_t r = 0; r < rows; ++r) {
        const float * row = w.data() + r * cols;
        for (int64_t b = 0; b < q.blocks_per_row; ++b) {
            const int64_t lo = b * QK4_0;
            const int64_t len = std::min<int64_t>(QK4_0, cols - lo);
            q.blocks.push_back(quantize_block(std::span<const float>(row + lo, size_t(len))));
        }
    }
    return q;
}

inline std::vector<float> dequantize_tensor(const quant_tensor & q) {
    const int64_t rows = q.rows();
    const int64_t cols = q.cols();
    std::vector<float> out(size_t(rows * cols));
    std::array<float, QK4_0> buf;
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t b = 0; b < q.blocks_per_row; ++b) {
            dequantize_block(q.blocks[size_t(r * q.blocks_per_row + b)], buf);
            const int64_t lo = b * QK4_0;
            const int64_t len = std::min<int64_t>(QK4_0, cols - lo);
            for (int64_t i = 0; i < len; ++i) {
                out[size_t(r * cols + lo + i)] = buf[size_t(i)];
            }
        }
    }
    return out;
}

// c += a · Wᵀ with W block-quantized, dequantizing per block on the fly.
// a:[m,k] W:[n,k] c:[m,n]
inline void mm_nt_q4(const float * a, const quant_tensor & w, float * c, int64_t m, int64_t n, int64_t k) {
    require(w.rows() == n && w.cols() == k, errc::shape_mismatch, "mm_nt_q4: weight shape mismatch");
    const bool par = detail::parallel_worth(2 * m * k * n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (int64_t i = 0; i < m; ++i) {
        const float * arow = a + i * k;
        float * crow = c + i * n;
        std::array<float, QK4_0> buf;
        for (int64_t j = 0; j < n; ++j) {
            float sum = 0.0f;
            for (int64_t b = 0; b < w.blocks_per_row; ++b) {
                dequantize_block(w.blocks[size_t(j * w.blocks_per_row + b)], buf);
                const int64_t lo = b * QK4_0;
                const int64_t len = std::min<int64_t>(QK4_0, k - lo);
                sum += vec_dot(arow + lo, buf.data(), len);
            }
            crow[j] += sum;
        }
    }
    (void) par;
}

} // namespace spt
