#pragma once

// SPT container: "SPT1" magic, u32 little-endian length-prefixed JSON header,
// then raw tensor payload with every tensor 32-byte aligned. One container
// carries f32 and q4_0 tensors side by side; offsets are absolute.

#include "spt/common.hpp"
#include "spt/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace spt {

static_assert(std::endian::native == std::endian::little, "SPT containers are little-endian");

inline constexpr char SPT_MAGIC[4] = {'S', 'P', 'T', '1'};
inline constexpr int64_t SPT_ALIGN = 32;

namespace detail {

inline int64_t align_up(int64_t x, int64_t a) { return (x + a - 1) / a * a; }

inline int64_t expected_byte_length(dtype dt, const std::vector<int64_t> & shape) {
    if (dt == dtype::f32) return shape_numel(shape) * 4;
    const int64_t rows = shape.size() == 2 ? shape[0] : 1;
    const int64_t cols = shape.empty() ? 0 : shape.back();
    return rows * ((cols + QK4_0 - 1) / QK4_0) * 18;
}

inline void append_tensor_bytes(std::string & out, const tensor_data & t) {
    if (t.dt == dtype::f32) {
        const size_t n = t.f32.size() * 4;
        const size_t base = out.size();
        out.resize(base + n);
        std::memcpy(out.data() + base, t.f32.data(), n);
    } else {
        for (const auto & b : t.q4.blocks) {
            out.push_back(char(b.d & 0xff));
            out.push_back(char(b.d >> 8));
            out.append(reinterpret_cast<const char *>(b.qs), 16);
        }
    }
}

} // namespace detail

struct spt_payload {
    nlohmann::json meta;                                // extra header fields ("kind", ...)
    std::map<std::string, tensor_data> tensors;
    nlohmann::json config;                              // model config or null
};

inline std::string serialize_spt(const spt_payload & p) {
    nlohmann::json header = p.meta;
    header["format_version"] = 1;
    header["config"] = p.config;

    // lay out payload first so the table carries final offsets
    std::vector<std::pair<std::string, const tensor_data *>> order;
    for (const auto & [name, t] : p.tensors) order.emplace_back(name, &t);

    nlohmann::json table = nlohmann::json::array();

    // header size depends on the table text, whose offsets depend on the
    // header size; iterate until the prefix length fixes itself
    int64_t header_len_guess = 0;
    std::string header_text;
    for (int pass = 0; pass < 8; ++pass) {
        table.clear();
        int64_t cursor = detail::align_up(8 + header_len_guess, SPT_ALIGN);
        for (const auto & [name, t] : order) {
            const int64_t len = t->byte_size();
            table.push_back({{"name", name},
                             {"dtype", dtype_name(t->dt)},
                             {"shape", t->shape},
                             {"offset", cursor},
                             {"length", len}});
            cursor = detail::align_up(cursor + len, SPT_ALIGN);
        }
        header["tensors"] = table;
        header_text = header.dump();
        if (int64_t(header_text.size()) == header_len_guess) break;
        header_len_guess = int64_t(header_text.size());
    }
    require(int64_t(header_text.size()) == header_len_guess, errc::io, "header layout did not converge");

    std::string out;
    out.append(SPT_MAGIC, 4);
    const uint32_t hlen = uint32_t(header_text.size());
    for (int i = 0; i < 4; ++i) out.push_back(char((hlen >> (8 * i)) & 0xff));
    out += header_text;

    for (const auto & [name, t] : order) {
        out.resize(size_t(detail::align_up(int64_t(out.size()), SPT_ALIGN)), '\0');
        detail::append_tensor_bytes(out, *t);
    }
    return out;
}

inline void write_file_atomic(const std::string & path, const std::string & bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), errc::io, "cannot write: " + tmp);
        f.write(bytes.data(), std::streamsize(bytes.size()));
        require(f.good(), errc::io, "short write: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, errc::io, "rename failed: " + path + " (" + ec.message() + ")");
}

inline spt_payload parse_spt(const std::string & bytes, const std::string & origin = "<memory>") {
    require(bytes.size() >= 8, errc::truncated_file, origin + ": shorter than the fixed prefix");
    require(std::memcmp(bytes.data(), SPT_MAGIC, 4) == 0, errc::bad_magic,
            origin + ": bad magic, not an SPT container");
    uint32_t hlen = 0;
    for (int i = 3; i >= 0; --i) hlen = (hlen << 8) | uint8_t(bytes[size_t(4 + i)]);
    require(8 + size_t(hlen) <= bytes.size(), errc::truncated_file, origin + ": header extends past end of file");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(8, hlen));
    } catch (const nlohmann::json::exception & e) {
        fail(errc::io, origin + ": header is not valid JSON: " + e.what());
    }

    spt_payload p;
    p.config = header.value("config", nlohmann::json());
    for (auto & [k, v] : header.items()) {
        if (k != "config" && k != "tensors" && k != "format_version") p.meta[k] = v;
    }

    struct extent { int64_t lo, hi; std::string name; };
    std::vector<extent> extents;

    for (const auto & e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
        const std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
        const int64_t offset = e.at("offset").get<int64_t>();
        const int64_t length = e.at("length").get<int64_t>();

        require(length == detail::expected_byte_length(dt, shape), errc::io,
                origin + ": declared length of '" + name + "' does not match dtype x shape");
        require(offset >= 0 && length >= 0 && offset + length <= int64_t(bytes.size()),
                errc::truncated_file, origin + ": payload of '" + name + "' extends past end of file");
        extents.push_back({offset, offset + length, name});

        tensor_data t;
        t.dt = dt;
        t.shape = shape;
        if (dt == dtype::f32) {
            t.f32.resize(size_t(shape_numel(shape)));
            std::memcpy(t.f32.data(), bytes.data() + offset, size_t(length));
        } else {
            const int64_t rows = t.shape.size() == 2 ? t.shape[0] : 1;
            const int64_t cols = t.shape.empty() ? 0 : t.shape.back();
            t.q4.shape = shape;
            t.q4.blocks_per_row = (cols + QK4_0 - 1) / QK4_0;
            t.q4.blocks.resize(size_t(rows * t.q4.blocks_per_row));
            const char * src = bytes.data() + offset;
            for (auto & b : t.q4.blocks) {
                b.d = uint16_t(uint8_t(src[0])) | uint16_t(uint8_t(src[1])) << 8;
                std::memcpy(b.qs, src + 2, 16);
                src += 18;
            }
        }
        p.tensors[name] = std::move(t);
    }

    std::sort(extents.begin(), extents.end(), [](const extent & a, const extent & b) { return a.lo < b.lo; });
    for (size_t i = 1; i < extents.size(); ++i) {
        require(extents[i].lo >= extents[i - 1].hi, errc::overlapping_tensors,
                origin + ": tensors '" + extents[i - 1].name + "' and '" + extents[i].name + "' overlap");
    }
    return p;
}

inline spt_payload read_spt(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), errc::missing_artifact, "cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_spt(bytes, path);
}

//
// checkpoint <-> SPT
//

inline std::string serialize_checkpoint(const checkpoint & ckpt) {
    for (const auto & [name, t] : ckpt.tensors) {
        if (t.dt == dtype::f32) {
            for (float v : t.f32) {
                require(std::isfinite(v), errc::numeric, "non-finite value in tensor: " + name);
            }
        }
    }
    spt_payload p;
    p.meta["kind"] = "checkpoint";
    p.config = ckpt.config;
    p.tensors = ckpt.tensors;
    return serialize_spt(p);
}

inline void save_checkpoint(const checkpoint & ckpt, const std::string & path) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline checkpoint checkpoint_from_payload(spt_payload && p, const std::string & origin) {
    require(!p.config.is_null(), errc::io, origin + ": container has no model config");
    checkpoint ckpt;
    ckpt.config = p.config.get<model_config>();
    ckpt.config.validate();
    ckpt.tensors = std::move(p.tensors);
    return ckpt;
}

inline checkpoint load_checkpoint(const std::string & path) {
    auto p = read_spt(path);
    return checkpoint_from_payload(std::move(p), path);
}

//
// LoRA adapter <-> SPT
//

inline void save_adapter(const lora_adapter & ad, const std::string & path) {
    spt_payload p;
    p.meta["kind"] = "lora_adapter";
    p.meta["rank"] = ad.rank;
    p.meta["scaling"] = ad.scaling;
    nlohmann::json names = nlohmann::json::array();
    for (const auto & t : ad.targets) names.push_back(t.weight_name);
    p.meta["targets"] = names;
    for (const auto & t : ad.targets) {
        p.tensors[t.weight_name + ".lora_a"] = tensor_data(t.a);
        p.tensors[t.weight_name + ".lora_b"] = tensor_data(t.b);
    }
    write_file_atomic(path, serialize_spt(p));
}

inline lora_adapter load_adapter(const std::string & path) {
    auto p = read_spt(path);
    require(p.meta.value("kind", "") == "lora_adapter", errc::io, path + ": not a lora adapter container");
    lora_adapter ad;
    ad.rank = p.meta.at("rank").get<int64_t>();
    ad.scaling = p.meta.at("scaling").get<float>();
    for (const auto & n : p.meta.at("targets")) {
        const std::string name = n.get<std::string>();
        lora_adapter::target t;
        t.weight_name = name;
        const auto & a = p.tensors.at(name + ".lora_a");
        const auto & b = p.tensors.at(name + ".lora_b");
        t.a = tensor(a.shape, a.f32);
        t.b = tensor(b.shape, b.f32);
        ad.targets.push_back(std::move(t));
    }
    return ad;
}

} // namespace spt
