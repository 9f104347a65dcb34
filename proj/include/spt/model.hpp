#pragma once

// Toy decoder-only transformer with maskable FFN hidden neurons. Weights are
// stored [out, in]; the forward graph uses a·Wᵀ matmuls, so FFN up rows and
// down columns correspond one-to-one with hidden neurons.

#include "spt/autodiff.hpp"
#include "spt/common.hpp"
#include "spt/q4.hpp"
#include "spt/tensor.hpp"

#include <json.hpp>

#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace spt {

struct model_config {
    int64_t vocab_size = 258;
    int64_t context_length = 128;
    int64_t n_layers = 2;
    int64_t d_model = 64;
    int64_t n_heads = 4;
    std::vector<int64_t> d_ffn;        // per layer; ragged after pruning
    std::string activation = "gelu";

    int64_t d_head() const { return d_model / n_heads; }

    void validate() const {
        require(vocab_size >= 2, errc::config, "vocab_size must be >= 2");
        require(n_layers >= 1, errc::config, "n_layers must be >= 1");
        require(n_heads >= 1 && d_model % n_heads == 0, errc::config,
                "d_model (" + std::to_string(d_model) + ") must divide by n_heads (" +
                std::to_string(n_heads) + ")");
        require(context_length >= 1, errc::config, "context_length must be >= 1");
        require(int64_t(d_ffn.size()) == n_layers, errc::config,
                "d_ffn must list one width per layer");
        for (int64_t w : d_ffn) {
            require(w >= 0, errc::config, "d_ffn entries must be >= 0");
        }
        require(activation == "gelu", errc::config, "unsupported activation: " + activation);
    }

    bool operator==(const model_config &) const = default;
};

inline void to_json(nlohmann::json & j, const model_config & c) {
    j = nlohmann::json{
        {"vocab_size", c.vocab_size},   {"context_length", c.context_length},
        {"n_layers", c.n_layers},       {"d_model", c.d_model},
        {"n_heads", c.n_heads},         {"d_ffn", c.d_ffn},
        {"activation", c.activation},
    };
}

inline void from_json(const nlohmann::json & j, model_config & c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("context_length").get_to(c.context_length);
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ffn").get_to(c.d_ffn);
    j.at("activation").get_to(c.activation);
}

enum class dtype { f32, q4_0 };

inline const char * dtype_name(dtype d) { return d == dtype::f32 ? "f32" : "q4_0"; }

inline dtype dtype_from_name(const std::string & s) {
    if (s == "f32") return dtype::f32;
    if (s == "q4_0") return dtype::q4_0;
    fail(errc::config, "unknown dtype: " + s);
}

struct tensor_data {
    dtype dt = dtype::f32;
    std::vector<int64_t> shape;
    std::vector<float> f32;
    quant_tensor q4;

    tensor_data() = default;
    explicit tensor_data(tensor t) : shape(t.shape), f32(std::move(t.data)) {}
    explicit tensor_data(quant_tensor q) : dt(dtype::q4_0), shape(q.shape), q4(std::move(q)) {}

    int64_t numel() const { return shape_numel(shape); }

    int64_t byte_size() const {
        return dt == dtype::f32 ? numel() * 4 : q4.byte_size();
    }

    std::vector<float> as_f32() const {
        return dt == dtype::f32 ? f32 : dequantize_tensor(q4);
    }
};

struct checkpoint {
    model_config config;
    std::map<std::string, tensor_data> tensors;   // ordered: deterministic serialization
    int format_version = 1;

    static std::string layer_name(int64_t l, const std::string & suffix) {
        return "layers." + std::to_string(l) + "." + suffix;
    }

    const tensor_data & get(const std::string & name) const {
        auto it = tensors.find(name);
        require(it != tensors.end(), errc::missing_artifact, "checkpoint tensor missing: " + name);
        return it->second;
    }

    tensor_data & get(const std::string & name) {
        auto it = tensors.find(name);
        require(it != tensors.end(), errc::missing_artifact, "checkpoint tensor missing: " + name);
        return it->second;
    }

    bool has(const std::string & name) const { return tensors.count(name) > 0; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto & [name, t] : tensors) {
            if (name.size() >= 5 && name.compare(name.size() - 5, 5, ".mask") == 0) continue;
            n += t.numel();
        }
        return n;
    }

    // true when every layer with hidden neurons carries a mask tensor
    bool has_masks() const {
        bool any = false;
        for (int64_t l = 0; l < config.n_layers; ++l) {
            if (config.d_ffn[size_t(l)] == 0) continue;
            if (!has(layer_name(l, "ffn.mask"))) return false;
            any = true;
        }
        return any;
    }

    void set_masks(const std::vector<std::vector<float>> & masks) {
        require(int64_t(masks.size()) == config.n_layers, errc::shape_mismatch,
                "set_masks: need one mask per layer");
        for (int64_t l = 0; l < config.n_layers; ++l) {
            const auto & m = masks[size_t(l)];
            require(int64_t(m.size()) == config.d_ffn[size_t(l)], errc::shape_mismatch,
                    "set_masks: layer " + std::to_string(l) + " mask length mismatch");
            for (float v : m) {
                require(v == 0.0f || v == 1.0f, errc::invalid_argument,
                        "set_masks: mask entries must be 0 or 1");
            }
            tensors[layer_name(l, "ffn.mask")] = tensor_data(tensor({int64_t(m.size())}, m));
        }
    }

    std::vector<std::vector<float>> get_masks() const {
        std::vector<std::vector<float>> out;
        for (int64_t l = 0; l < config.n_layers; ++l) {
            if (config.d_ffn[size_t(l)] == 0) {
                out.emplace_back();
                continue;
            }
            out.push_back(get(layer_name(l, "ffn.mask")).f32);
        }
        return out;
    }

    void drop_masks() {
        for (int64_t l = 0; l < config.n_layers; ++l) {
            tensors.erase(layer_name(l, "ffn.mask"));
        }
    }

    uint64_t content_hash() const {
        nlohmann::json cj = config;
        uint64_t h = fnv1a64(cj.dump());
        for (const auto & [name, t] : tensors) {
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(dtype_name(t.dt), strlen(dtype_name(t.dt)), h);
            h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
            if (t.dt == dtype::f32) {
                h = fnv1a64(t.f32.data(), t.f32.size() * 4, h);
            } else {
                for (const auto & b : t.q4.blocks) {
                    h = fnv1a64(&b.d, 2, h);
                    h = fnv1a64(b.qs, 16, h);
                }
            }
        }
        return h;
    }
};

// GPT-style init: 0.02 std weights, residual-output projections scaled down,
// zero biases, unit norm gains.
inline checkpoint init_checkpoint(const model_config & config, uint64_t seed) {
    config.validate();
    checkpoint ckpt;
    ckpt.config = config;
    rng r = rng::substream(seed, "init");

    const float wstd = 0.02f;
    const float ostd = 0.02f / std::sqrt(float(2 * config.n_layers));
    const int64_t d = config.d_model;

    auto put = [&](const std::string & name, std::vector<int64_t> shape, float stddev) {
        ckpt.tensors[name] = tensor_data(stddev == 0.0f ? tensor::zeros(shape)
                                                        : tensor::randn(r, shape, stddev));
    };

    put("tok_emb.weight", {config.vocab_size, d}, wstd);
    put("pos_emb.weight", {config.context_length, d}, 0.01f);
    for (int64_t l = 0; l < config.n_layers; ++l) {
        const int64_t f = config.d_ffn[size_t(l)];
        auto ln = [&](const std::string & stem) {
            ckpt.tensors[checkpoint::layer_name(l, stem + ".gain")] = tensor_data(tensor::full({d}, 1.0f));
            ckpt.tensors[checkpoint::layer_name(l, stem + ".bias")] = tensor_data(tensor::zeros({d}));
        };
        ln("attn_norm");
        for (const char * p : {"q", "k", "v"}) {
            put(checkpoint::layer_name(l, std::string("attn.") + p + ".weight"), {d, d}, wstd);
            put(checkpoint::layer_name(l, std::string("attn.") + p + ".bias"), {d}, 0.0f);
        }
        put(checkpoint::layer_name(l, "attn.o.weight"), {d, d}, ostd);
        put(checkpoint::layer_name(l, "attn.o.bias"), {d}, 0.0f);
        ln("ffn_norm");
        if (f > 0) {
            put(checkpoint::layer_name(l, "ffn.up.weight"), {f, d}, wstd);
            put(checkpoint::layer_name(l, "ffn.up.bias"), {f}, 0.0f);
        }
        put(checkpoint::layer_name(l, "ffn.down.weight"), {d, f}, ostd);
        put(checkpoint::layer_name(l, "ffn.down.bias"), {d}, 0.0f);
    }
    ckpt.tensors["out_norm.gain"] = tensor_data(tensor::full({d}, 1.0f));
    ckpt.tensors["out_norm.bias"] = tensor_data(tensor::zeros({d}));
    put("unembed.weight", {config.vocab_size, d}, wstd);
    return ckpt;
}

//
// LoRA adapter: per-target low-rank factors a [r, in], b [out, r]. b starts
// at zero so a fresh adapter is a no-op.
//

inline const std::vector<std::string> & lora_default_targets() {
    static const std::vector<std::string> t = {"attn.q.weight", "attn.v.weight", "ffn.down.weight"};
    return t;
}

struct lora_adapter {
    struct target {
        std::string weight_name;   // full checkpoint tensor name
        tensor a;                  // [rank, in]
        tensor b;                  // [out, rank]
    };
    int64_t rank = 0;
    float scaling = 0.0f;
    std::vector<target> targets;

    const target * find(const std::string & weight_name) const {
        for (const auto & t : targets) {
            if (t.weight_name == weight_name) return &t;
        }
        return nullptr;
    }
};

inline lora_adapter init_lora(const checkpoint & ckpt, int64_t rank, float alpha, uint64_t seed,
                              const std::vector<std::string> & target_suffixes = lora_default_targets()) {
    require(rank >= 1, errc::invalid_argument, "lora rank must be >= 1");
    lora_adapter ad;
    ad.rank = rank;
    ad.scaling = alpha / float(rank);
    rng r = rng::substream(seed, "lora_init");
    for (int64_t l = 0; l < ckpt.config.n_layers; ++l) {
        for (const auto & suffix : target_suffixes) {
            const std::string name = checkpoint::layer_name(l, suffix);
            if (!ckpt.has(name)) continue;
            const auto & w = ckpt.get(name);
            require(w.dt == dtype::f32, errc::invalid_argument, "lora target must be f32: " + name);
            const int64_t out = w.shape[0], in = w.shape[1];
            if (in == 0 || out == 0) continue;
            require(rank <= std::min(out, in), errc::invalid_argument,
                    "lora rank " + std::to_string(rank) + " exceeds min dim of " + name);
            lora_adapter::target t;
            t.weight_name = name;
            t.a = tensor::randn(r, {rank, in}, 0.02f);
            t.b = tensor::zeros({out, rank});
            ad.targets.push_back(std::move(t));
        }
    }
    return ad;
}

//
// forward graph builder
//

struct lm_options {
    enum class mask_mode { none, from_checkpoint, external, graph_nodes };
    enum class grad_mode { none, all, lora_only };

    mask_mode masks = mask_mode::none;
    const std::vector<std::vector<float>> * mask_values = nullptr;   // external
    const std::vector<graph::id> * mask_nodes = nullptr;             // graph_nodes, [1, d_ffn] each
    const lora_adapter * lora = nullptr;
    grad_mode grads = grad_mode::none;
    bool capture_ffn = false;
    bool with_loss = true;   // attach cross entropy when targets are present
};

struct lm_sequence {
    std::vector<int32_t> input;
    std::vector<int32_t> target;   // empty = no loss for this sequence
};

struct lm_build {
    std::vector<graph::id> logits;                    // per sequence
    std::vector<graph::id> losses;                    // per sequence with targets
    graph::id mean_loss = -1;
    std::vector<std::vector<graph::id>> ffn_pre;      // [seq][layer], -1 where d_ffn == 0
    std::vector<std::vector<graph::id>> ffn_act;      // post-GELU, pre-mask
    std::map<std::string, graph::id> params;          // leaves with gradients
};

namespace detail {

class lm_builder {
public:
    lm_builder(graph & g, const checkpoint & ckpt, const lm_options & opts)
        : g_(g), ckpt_(ckpt), opts_(opts) {
        ckpt_.config.validate();
        if (opts_.grads == lm_options::grad_mode::all) {
            for (const auto & [name, t] : ckpt_.tensors) {
                require(t.dt == dtype::f32, errc::invalid_argument,
                        "cannot train quantized tensor: " + name);
            }
        }
    }

    lm_build run(std::span<const lm_sequence> seqs) {
        lm_build out;
        for (const auto & s : seqs) {
            check_sequence(s);
        }
        build_masks(out);
        for (const auto & s : seqs) {
            build_sequence(s, out);
        }
        if (opts_.with_loss && !out.losses.empty()) {
            out.mean_loss = g_.mean_scalars(out.losses);
        }
        out.params = params_;
        return out;
    }

private:
    graph & g_;
    const checkpoint & ckpt_;
    const lm_options & opts_;
    std::map<std::string, graph::id> weight_nodes_;
    std::map<std::string, graph::id> params_;
    std::vector<graph::id> mask_ids_;       // per layer, -1 = none
    std::vector<graph::id> head_sel_;       // [d_head, d_model] per head
    std::map<int64_t, graph::id> causal_;   // per sequence length

    void check_sequence(const lm_sequence & s) const {
        const auto & c = ckpt_.config;
        require(!s.input.empty(), errc::invalid_argument, "empty token sequence");
        require(int64_t(s.input.size()) <= c.context_length, errc::invalid_argument,
                "sequence length " + std::to_string(s.input.size()) + " exceeds context " +
                std::to_string(c.context_length));
        for (int32_t t : s.input) {
            require(t >= 0 && t < c.vocab_size, errc::invalid_argument,
                    "token id " + std::to_string(t) + " out of vocab range");
        }
        require(s.target.empty() || s.target.size() == s.input.size(), errc::shape_mismatch,
                "target length must match input length");
    }

    bool weight_grad(const std::string & name) const {
        if (opts_.grads != lm_options::grad_mode::all) return false;
        return name.find(".mask") == std::string::npos;
    }

    graph::id weight(const std::string & name) {
        auto it = weight_nodes_.find(name);
        if (it != weight_nodes_.end()) return it->second;
        const tensor_data & t = ckpt_.get(name);
        graph::id id;
        if (t.dt == dtype::q4_0) {
            id = g_.leaf_q4(&t.q4, name);
        } else {
            const bool rg = weight_grad(name);
            id = g_.leaf_view(t.f32.data(), t.shape, rg, name);
            if (rg) params_[name] = id;
        }
        weight_nodes_[name] = id;
        return id;
    }

    // y = x·Wᵀ + bias, with the optional low-rank update on the product
    graph::id proj(graph::id x, const std::string & wname, const std::string & bname) {
        graph::id y = g_.matmul(x, weight(wname), /*trans_b=*/true);
        if (opts_.lora) {
            if (const auto * t = opts_.lora->find(wname)) {
                const bool rg = opts_.grads == lm_options::grad_mode::lora_only ||
                                opts_.grads == lm_options::grad_mode::all;
                graph::id a = lora_leaf(wname + ".lora_a", t->a, rg);
                graph::id b = lora_leaf(wname + ".lora_b", t->b, rg);
                graph::id up = g_.matmul(g_.matmul(x, a, true), b, true);
                y = g_.add(y, g_.scale(up, opts_.lora->scaling));
            }
        }
        if (!bname.empty()) {
            y = g_.add(y, weight(bname));
        }
        return y;
    }

    graph::id lora_leaf(const std::string & key, const tensor & t, bool rg) {
        auto it = weight_nodes_.find(key);
        if (it != weight_nodes_.end()) return it->second;
        graph::id id = g_.leaf_view(t.data.data(), t.shape, rg, key);
        if (rg) params_[key] = id;
        weight_nodes_[key] = id;
        return id;
    }

    graph::id head_selector(int64_t h) {
        const auto & c = ckpt_.config;
        if (head_sel_.empty()) head_sel_.assign(size_t(c.n_heads), -1);
        if (head_sel_[size_t(h)] < 0) {
            tensor sel = tensor::zeros({c.d_head(), c.d_model});
            for (int64_t r = 0; r < c.d_head(); ++r) {
                sel.at(r, h * c.d_head() + r) = 1.0f;
            }
            head_sel_[size_t(h)] = g_.leaf(std::move(sel), false, "head_sel." + std::to_string(h));
        }
        return head_sel_[size_t(h)];
    }

    graph::id causal_mask(int64_t len) {
        auto it = causal_.find(len);
        if (it != causal_.end()) return it->second;
        tensor m = tensor::zeros({len, len});
        for (int64_t i = 0; i < len; ++i) {
            for (int64_t j = i + 1; j < len; ++j) {
                m.at(i, j) = -1e9f;
            }
        }
        graph::id id = g_.leaf(std::move(m), false, "causal." + std::to_string(len));
        causal_[len] = id;
        return id;
    }

    void build_masks(lm_build & out) {
        const auto & c = ckpt_.config;
        mask_ids_.assign(size_t(c.n_layers), -1);
        if (opts_.masks == lm_options::mask_mode::none) return;
        for (int64_t l = 0; l < c.n_layers; ++l) {
            const int64_t f = c.d_ffn[size_t(l)];
            if (f == 0) continue;
            switch (opts_.masks) {
                case lm_options::mask_mode::from_checkpoint: {
                    const auto & m = ckpt_.get(checkpoint::layer_name(l, "ffn.mask"));
                    require(m.numel() == f, errc::shape_mismatch, "checkpoint mask length mismatch");
                    mask_ids_[size_t(l)] = g_.leaf_view(m.f32.data(), {1, f}, false,
                                                        checkpoint::layer_name(l, "ffn.mask"));
                    break;
                }
                case lm_options::mask_mode::external: {
                    require(opts_.mask_values && int64_t(opts_.mask_values->size()) == c.n_layers,
                            errc::shape_mismatch, "external masks: need one vector per layer");
                    const auto & m = (*opts_.mask_values)[size_t(l)];
                    require(int64_t(m.size()) == f, errc::shape_mismatch,
                            "external mask length mismatch at layer " + std::to_string(l));
                    mask_ids_[size_t(l)] = g_.leaf(tensor({1, f}, m), false,
                                                   "mask." + std::to_string(l));
                    break;
                }
                case lm_options::mask_mode::graph_nodes: {
                    require(opts_.mask_nodes && int64_t(opts_.mask_nodes->size()) == c.n_layers,
                            errc::shape_mismatch, "graph masks: need one node per layer");
                    mask_ids_[size_t(l)] = (*opts_.mask_nodes)[size_t(l)];
                    break;
                }
                default:
                    break;
            }
        }
        (void) out;
    }

    void build_sequence(const lm_sequence & s, lm_build & out) {
        const auto & c = ckpt_.config;
        const int64_t len = int64_t(s.input.size());

        std::vector<int32_t> positions(size_t(len));
        for (int64_t i = 0; i < len; ++i) positions[size_t(i)] = int32_t(i);

        graph::id tok = g_.embed_lookup(weight("tok_emb.weight"), s.input);
        graph::id pos = g_.embed_lookup(weight("pos_emb.weight"), positions);
        graph::id x = g_.add(tok, pos);

        std::vector<graph::id> pre_l(size_t(c.n_layers), -1);
        std::vector<graph::id> act_l(size_t(c.n_layers), -1);

        for (int64_t l = 0; l < c.n_layers; ++l) {
            x = g_.add(x, attention_block(x, l, len));
            x = g_.add(x, ffn_block(x, l, pre_l[size_t(l)], act_l[size_t(l)]));
        }

        graph::id xf = g_.layer_norm(x, weight("out_norm.gain"), weight("out_norm.bias"));
        graph::id logits = g_.matmul(xf, weight("unembed.weight"), true);
        out.logits.push_back(logits);

        if (opts_.capture_ffn) {
            out.ffn_pre.push_back(std::move(pre_l));
            out.ffn_act.push_back(std::move(act_l));
        }
        if (!s.target.empty() && opts_.with_loss) {
            out.losses.push_back(g_.cross_entropy(logits, s.target));
        }
    }

    graph::id attention_block(graph::id x, int64_t l, int64_t len) {
        const auto & c = ckpt_.config;
        auto name = [&](const std::string & s) { return checkpoint::layer_name(l, s); };

        graph::id h = g_.layer_norm(x, weight(name("attn_norm.gain")), weight(name("attn_norm.bias")));
        graph::id q = proj(h, name("attn.q.weight"), name("attn.q.bias"));
        graph::id k = proj(h, name("attn.k.weight"), name("attn.k.bias"));
        graph::id v = proj(h, name("attn.v.weight"), name("attn.v.bias"));

        const float inv_sqrt = 1.0f / std::sqrt(float(c.d_head()));
        graph::id merged = -1;
        for (int64_t hd = 0; hd < c.n_heads; ++hd) {
            graph::id sel = head_selector(hd);
            graph::id qh = g_.matmul(q, sel, true);
            graph::id kh = g_.matmul(k, sel, true);
            graph::id vh = g_.matmul(v, sel, true);
            graph::id scores = g_.add(g_.scale(g_.matmul(qh, kh, true), inv_sqrt), causal_mask(len));
            graph::id probs = g_.softmax_rows(scores);
            graph::id oh = g_.matmul(probs, vh);
            graph::id scattered = g_.matmul(oh, sel);   // back to model coordinates
            merged = merged < 0 ? scattered : g_.add(merged, scattered);
        }
        return proj(merged, name("attn.o.weight"), name("attn.o.bias"));
    }

    graph::id ffn_block(graph::id x, int64_t l, graph::id & pre_out, graph::id & act_out) {
        const auto & c = ckpt_.config;
        auto name = [&](const std::string & s) { return checkpoint::layer_name(l, s); };

        graph::id h = g_.layer_norm(x, weight(name("ffn_norm.gain")), weight(name("ffn_norm.bias")));
        if (c.d_ffn[size_t(l)] == 0) {
            // no hidden neurons left: the block reduces to its output bias
            tensor z = tensor::zeros({int64_t(g_.at(x).rows()), c.d_model});
            graph::id zero = g_.leaf(std::move(z));
            return g_.add(zero, weight(name("ffn.down.bias")));
        }
        graph::id z = proj(h, name("ffn.up.weight"), name("ffn.up.bias"));
        graph::id a = g_.gelu(z);
        pre_out = z;
        act_out = a;
        graph::id masked = mask_ids_[size_t(l)] >= 0 ? g_.mul(a, mask_ids_[size_t(l)]) : a;
        return proj(masked, name("ffn.down.weight"), name("ffn.down.bias"));
    }
};

} // namespace detail

inline lm_build build_lm(graph & g, const checkpoint & ckpt, std::span<const lm_sequence> seqs,
                         const lm_options & opts = {}) {
    return detail::lm_builder(g, ckpt, opts).run(seqs);
}

// Single-prompt forward: returns [len, vocab] logits.
inline tensor forward_lm(const checkpoint & ckpt, std::span<const int32_t> tokens,
                         const std::vector<std::vector<float>> * masks = nullptr) {
    graph g;
    lm_options opts;
    if (masks) {
        opts.masks = lm_options::mask_mode::external;
        opts.mask_values = masks;
    } else if (ckpt.has_masks()) {
        opts.masks = lm_options::mask_mode::from_checkpoint;
    }
    lm_sequence s;
    s.input.assign(tokens.begin(), tokens.end());
    const lm_sequence seqs[1] = {s};
    lm_build b = build_lm(g, ckpt, seqs, opts);
    g.forward();
    return g.value_copy(b.logits[0]);
}

// Greedy continuation; returns generated ids (prompt excluded).
inline std::vector<int32_t> generate_greedy(const checkpoint & ckpt, std::span<const int32_t> prompt,
                                            int64_t n_tokens) {
    require(!prompt.empty(), errc::invalid_argument, "generate: empty prompt");
    std::vector<int32_t> ctx(prompt.begin(), prompt.end());
    std::vector<int32_t> out;
    for (int64_t i = 0; i < n_tokens; ++i) {
        const int64_t start = std::max<int64_t>(0, int64_t(ctx.size()) - ckpt.config.context_length);
        std::span<const int32_t> window(ctx.data() + start, ctx.size() - size_t(start));
        tensor logits = forward_lm(ckpt, window);
        const int64_t last = logits.rows() - 1;
        int32_t best = 0;
        float best_v = logits.at(last, 0);
        for (int64_t vtok = 1; vtok < logits.cols(); ++vtok) {
            if (logits.at(last, vtok) > best_v) {
                best_v = logits.at(last, vtok);
                best = int32_t(vtok);
            }
        }
        ctx.push_back(best);
        out.push_back(best);
    }
    return out;
}

} // namespace spt
