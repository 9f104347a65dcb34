#pragma once

// Baseline trainer: Adam with linear warmup + cosine decay, global-norm
// gradient clipping, seeded window sampling. Single-threaded over steps.

#include "spt/autodiff.hpp"
#include "spt/common.hpp"
#include "spt/corpus.hpp"
#include "spt/model.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace spt {

struct train_hyper {
    int64_t steps = 1000;
    int64_t batch_size = 8;
    int64_t seq_len = 96;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    double warmup_frac = 0.05;
    double min_lr_frac = 0.1;
    int64_t min_tokens = 1024;
    uint64_t seed = 42;
};

class train_error : public error {
public:
    train_error(const std::string & msg, double last_finite)
        : error(errc::numeric, msg + " (last finite loss " + std::to_string(last_finite) + ")"),
          last_finite_loss(last_finite) {}
    double last_finite_loss;
};

namespace detail {

struct adam_state {
    std::map<std::string, std::vector<float>> m, v;
    int64_t t = 0;

    void step(const std::string & name, std::vector<float> & theta, const tensor & grad,
              double lr, double beta1, double beta2, double eps, double scale) {
        auto & mv = m[name];
        auto & vv = v[name];
        if (mv.empty()) {
            mv.assign(theta.size(), 0.0f);
            vv.assign(theta.size(), 0.0f);
        }
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t i = 0; i < theta.size(); ++i) {
            const double g = double(grad.data[i]) * scale;
            mv[i] = float(beta1 * mv[i] + (1.0 - beta1) * g);
            vv[i] = float(beta2 * vv[i] + (1.0 - beta2) * g * g);
            const double mhat = mv[i] / bc1;
            const double vhat = vv[i] / bc2;
            theta[i] -= float(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
};

inline double lr_at(const train_hyper & h, int64_t step) {
    const double warmup = std::max(1.0, h.warmup_frac * double(h.steps));
    if (double(step) < warmup) {
        return h.lr * double(step + 1) / warmup;
    }
    const double progress = double(step) - warmup >= 0 && h.steps > int64_t(warmup)
                                ? (double(step) - warmup) / std::max(1.0, double(h.steps) - warmup)
                                : 1.0;
    const double lo = h.lr * h.min_lr_frac;
    return lo + 0.5 * (h.lr - lo) * (1.0 + std::cos(3.141592653589793 * std::min(1.0, progress)));
}

// global-norm clip factor, accumulated in f64 for determinism headroom
inline double clip_scale(const std::map<std::string, graph::id> & params, const graph & g, double clip) {
    if (clip <= 0.0) return 1.0;
    double sq = 0.0;
    for (const auto & [name, id] : params) {
        for (float v : g.grad_of(id).data) sq += double(v) * double(v);
    }
    const double norm = std::sqrt(sq);
    return norm > clip ? clip / norm : 1.0;
}

} // namespace detail

struct train_result {
    checkpoint ckpt;
    std::vector<double> losses;
    double final_loss = 0.0;
};

inline train_result train_baseline(const model_config & config, const token_stream & corpus,
                                   const train_hyper & hyper) {
    config.validate();
    require(hyper.seq_len >= 1 && hyper.seq_len <= config.context_length, errc::config,
            "seq_len must be in [1, context_length]");
    require(corpus.size() >= hyper.min_tokens, errc::invalid_argument,
            "corpus has " + std::to_string(corpus.size()) + " tokens, need " +
            std::to_string(hyper.min_tokens));
    require(corpus.train_size() >= hyper.seq_len + 1, errc::invalid_argument,
            "training split shorter than one window");

    train_result result;
    result.ckpt = init_checkpoint(config, hyper.seed);
    checkpoint & ckpt = result.ckpt;

    rng sampler = rng::substream(hyper.seed, "train_windows");
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
        opts.grads = lm_options::grad_mode::all;
        lm_build b = build_lm(g, ckpt, batch, opts);
        g.forward();

        const double loss = double(g.at(b.mean_loss).value.data[0]);
        if (!std::isfinite(loss)) {
            throw train_error("training diverged at step " + std::to_string(step), last_finite);
        }
        last_finite = loss;
        result.losses.push_back(loss);

        g.backward(b.mean_loss);
        const double scale = detail::clip_scale(b.params, g, hyper.grad_clip);
        const double lr = detail::lr_at(hyper, step);

        adam.t += 1;
        for (const auto & [name, id] : b.params) {
            adam.step(name, ckpt.get(name).f32, g.grad_of(id), lr, hyper.beta1, hyper.beta2,
                      hyper.adam_eps, scale);
        }
    }
    result.final_loss = last_finite;
    return result;
}

} // namespace spt
