#pragma once

// Corpus ingestion and calibration sampling. Tokenization is byte-level:
// ids 0..255 are raw bytes, 256/257 are reserved specials.

#include "spt/common.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace spt {

inline constexpr int32_t TOK_BOS = 256;
inline constexpr int32_t TOK_EOS = 257;
inline constexpr int64_t BYTE_VOCAB = 258;   // 256 bytes + BOS + EOS

inline std::vector<int32_t> tokenize_bytes(std::string_view text) {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(int32_t(c));
    }
    return ids;
}

inline std::string detokenize_bytes(std::span<const int32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int32_t t : ids) {
        if (t >= 0 && t < 256) out.push_back(char(uint8_t(t)));
    }
    return out;
}

// Token stream with a contiguous validation suffix. Calibration and training
// windows are drawn from the training prefix only.
struct token_stream {
    std::string source;
    std::vector<int32_t> ids;
    int64_t train_end = 0;     // ids[0, train_end) = train, ids[train_end, n) = validation

    int64_t size() const { return int64_t(ids.size()); }
    int64_t train_size() const { return train_end; }
    int64_t val_size() const { return size() - train_end; }

    std::span<const int32_t> train() const {
        return std::span<const int32_t>(ids.data(), size_t(train_end));
    }
    std::span<const int32_t> validation() const {
        return std::span<const int32_t>(ids.data() + train_end, size_t(val_size()));
    }
};

inline token_stream make_stream(std::vector<int32_t> ids, double val_fraction,
                                std::string source = "<memory>") {
    require(val_fraction >= 0.0 && val_fraction < 1.0, errc::invalid_argument,
            "validation fraction must be in [0,1)");
    token_stream s;
    s.source = std::move(source);
    s.ids = std::move(ids);
    require(!s.ids.empty(), errc::invalid_argument, "empty token stream");
    const int64_t val = int64_t(std::ceil(val_fraction * double(s.ids.size())));
    s.train_end = s.size() - val;
    return s;
}

inline token_stream load_corpus(const std::string & path, double val_fraction) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), errc::io, "cannot open corpus file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    auto ids = tokenize_bytes(text);
    require(!ids.empty(), errc::invalid_argument, "corpus is empty after tokenization: " + path);
    return make_stream(std::move(ids), val_fraction, path);
}

struct calibration_set {
    std::vector<std::vector<int32_t>> sequences;
    int64_t max_length = 0;

    int64_t count() const { return int64_t(sequences.size()); }
};

// n disjoint windows of the given length from the training split, chosen by a
// seeded shuffle of the aligned window grid (sampling without replacement).
inline calibration_set sample_calibration(const token_stream & stream, int64_t n, int64_t len,
                                          uint64_t seed) {
    require(n >= 1 && len >= 1, errc::invalid_argument, "calibration needs n >= 1 and len >= 1");
    const int64_t avail = stream.train_size();
    require(n * len <= avail, errc::invalid_argument,
            "calibration request " + std::to_string(n) + "x" + std::to_string(len) +
            " exceeds " + std::to_string(avail) + " training tokens");

    const int64_t slots = avail / len;
    std::vector<int64_t> order(size_t(slots));
    for (int64_t i = 0; i < slots; ++i) order[size_t(i)] = i;
    rng r = rng::substream(seed, "calibration");
    r.shuffle(order);

    calibration_set out;
    out.max_length = len;
    out.sequences.reserve(size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t start = order[size_t(i)] * len;
        out.sequences.emplace_back(stream.ids.begin() + start, stream.ids.begin() + start + len);
    }
    return out;
}

// random (possibly overlapping) training windows of len+1 tokens, for LM steps
inline std::vector<int32_t> sample_window(const token_stream & stream, int64_t len, rng & r) {
    const int64_t need = len + 1;
    require(stream.train_size() >= need, errc::invalid_argument,
            "training split shorter than window: " + std::to_string(stream.train_size()));
    const int64_t start = r.next_below(stream.train_size() - need + 1);
    return std::vector<int32_t>(stream.ids.begin() + start, stream.ids.begin() + start + need);
}

} // namespace spt
