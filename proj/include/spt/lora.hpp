#pragma once

// LoRA fine-tuning on a frozen base checkpoint, and the merge back into
// dense weights.

#include "spt/kernels.hpp"
#include "spt/model.hpp"
#include "spt/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace spt {

struct lora_hyper {
    int64_t rank = 8;
    float alpha = 16.0f;
    int64_t steps = 200;
    int64_t batch_size = 4;
    int64_t seq_len = 96;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    uint64_t seed = 42;
};

struct lora_result {
    lora_adapter adapter;
    std::vector<double> losses;
};

// Trains only the adapter factors; the base checkpoint is read-only here.
inline lora_result lora_finetune(const checkpoint & ckpt, const token_stream & corpus,
                                 const lora_hyper & hyper) {
    require(hyper.rank >= 1, errc::invalid_argument, "lora rank must be >= 1");
    require(hyper.seq_len >= 1 && hyper.seq_len <= ckpt.config.context_length, errc::config,
            "seq_len must be in [1, context_length]");
    require(corpus.train_size() >= hyper.seq_len + 1, errc::invalid_argument,
            "training split shorter than one window");

    lora_result result;
    result.adapter = init_lora(ckpt, hyper.rank, hyper.alpha, hyper.seed);

    std::map<std::string, tensor *> slots;
    for (auto & t : result.adapter.targets) {
        slots[t.weight_name + ".lora_a"] = &t.a;
        slots[t.weight_name + ".lora_b"] = &t.b;
    }

    rng sampler = rng::substream(hyper.seed, "lora_windows");
    detail::adam_state adam;
    double last_finite = 0.0;

    for (int64_t step = 0; step < hyper.steps; ++step) {
        std::vector<lm_sequence> batch(size_t(hyper.batch_size));
        for (auto & s : batch) {
            auto window = sample_window(corpus, hyper.seq_len, sampler);
            s.input.assign(window.begin(), window.end() - 1);
            s.target.assign(window.begin() + 1, window.end());
        }

        graph g;
        lm_options opts;
        opts.grads = lm_options::grad_mode::lora_only;
        opts.lora = &result.adapter;
        lm_build b = build_lm(g, ckpt, batch, opts);
        g.forward();

        const double loss = double(g.at(b.mean_loss).value.data[0]);
        if (!std::isfinite(loss)) {
            throw train_error("lora fine-tune diverged at step " + std::to_string(step), last_finite);
        }
        last_finite = loss;
        result.losses.push_back(loss);

        g.backward(b.mean_loss);
        const double scale = detail::clip_scale(b.params, g, hyper.grad_clip);

        adam.t += 1;
        for (const auto & [name, id] : b.params) {
            auto it = slots.find(name);
            require(it != slots.end(), errc::invalid_argument, "unexpected trainable param: " + name);
            adam.step(name, it->second->data, g.grad_of(id), hyper.lr, hyper.beta1, hyper.beta2,
                      hyper.adam_eps, scale);
        }
    }
    return result;
}

// W' = W + scaling · (B · A). The adapter stays usable afterwards.
inline checkpoint lora_merge(const checkpoint & ckpt, const lora_adapter & adapter) {
    checkpoint merged = ckpt;
    for (const auto & t : adapter.targets) {
        auto & w = merged.get(t.weight_name);
        require(w.dt == dtype::f32, errc::invalid_argument, "cannot merge into quantized tensor: " + t.weight_name);
        const int64_t out = w.shape[0], in = w.shape[1];
        require(t.b.shape[0] == out && t.a.shape[1] == in && t.a.shape[0] == t.b.shape[1],
                errc::shape_mismatch, "adapter shapes do not match " + t.weight_name);
        std::vector<float> delta(size_t(out * in), 0.0f);
        mm_nn(t.b.data.data(), t.a.data.data(), delta.data(), out, adapter.rank, in);
        for (size_t i = 0; i < delta.size(); ++i) {
            w.f32[i] += adapter.scaling * delta[i];
        }
    }
    return merged;
}

} // namespace spt
