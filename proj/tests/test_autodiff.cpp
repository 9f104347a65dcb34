#include "spt/autodiff.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

using namespace spt;

namespace {

tensor random_tensor(rng & r, std::vector<int64_t> shape, float scale = 1.0f, bool rg = false) {
    tensor t = tensor::randn(r, std::move(shape), scale, rg);
    return t;
}

// independently coded straight-line MLP: three dense+GELU layers, no graph
std::vector<float> mlp_oracle(const std::vector<float> & x, int64_t d,
                              const std::vector<tensor> & ws, const std::vector<tensor> & bs) {
    std::vector<float> cur = x;
    for (int layer = 0; layer < 3; ++layer) {
        const tensor & w = ws[size_t(layer)];   // [out, in]
        const tensor & b = bs[size_t(layer)];
        const int64_t out = w.shape[0], in = w.shape[1];
        std::vector<float> next(size_t(out));
        for (int64_t o = 0; o < out; ++o) {
            float acc = 0.0f;
            for (int64_t i = 0; i < in; ++i) {
                acc += cur[size_t(i)] * w.at(o, i);
            }
            acc += b.data[size_t(o)];
            next[size_t(o)] = layer < 2 ? act::gelu(acc) : acc;
        }
        cur = std::move(next);
    }
    (void) d;
    return cur;
}

} // namespace

TEST_CASE("identity matmul returns its input exactly") {
    rng r(1);
    graph g;
    tensor x = random_tensor(r, {3, 4});
    tensor eye = tensor::zeros({4, 4});
    for (int64_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0f;
    auto xi = g.leaf(x);
    auto y = g.matmul(xi, g.leaf(eye));
    g.forward();
    for (int64_t i = 0; i < x.numel(); ++i) {
        REQUIRE(g.at(y).value.data[size_t(i)] == x.data[size_t(i)]);
    }
}

TEST_CASE("softmax of all-equal logits is uniform") {
    graph g;
    auto x = g.leaf(tensor::full({2, 5}, 3.25f));
    auto y = g.softmax_rows(x);
    g.forward();
    for (float v : g.at(y).value.data) {
        REQUIRE(v == Catch::Approx(1.0 / 5.0).epsilon(1e-6));
    }
    // entries within a row are identical
    const auto & d = g.at(y).value.data;
    for (size_t i = 1; i < 5; ++i) {
        REQUIRE(d[i] == d[0]);
    }
}

TEST_CASE("random 3-layer MLP matches a straight-line reimplementation") {
    rng r(7);
    const int64_t d0 = 12, d1 = 20, d2 = 16, d3 = 8;
    std::vector<tensor> ws = {random_tensor(r, {d1, d0}, 0.5f), random_tensor(r, {d2, d1}, 0.5f),
                              random_tensor(r, {d3, d2}, 0.5f)};
    std::vector<tensor> bs = {random_tensor(r, {d1}, 0.2f), random_tensor(r, {d2}, 0.2f),
                              random_tensor(r, {d3}, 0.2f)};
    tensor x = random_tensor(r, {1, d0});

    graph g;
    auto h = g.leaf(x);
    for (int layer = 0; layer < 3; ++layer) {
        h = g.add(g.matmul(h, g.leaf(ws[size_t(layer)]), true), g.leaf(bs[size_t(layer)]));
        if (layer < 2) h = g.gelu(h);
    }
    g.forward();

    const auto expect = mlp_oracle(x.data, d0, ws, bs);
    float worst = 0.0f;
    for (int64_t i = 0; i < d3; ++i) {
        worst = std::max(worst, std::fabs(expect[size_t(i)] - g.at(h).value.data[size_t(i)]));
    }
    REQUIRE(worst <= 1e-6f);
}

TEST_CASE("d(x*x)/dx at x=3 is 6") {
    graph g;
    auto x = g.leaf(tensor::scalar(3.0f), /*requires_grad=*/true, "x");
    auto y = g.mul(x, x);
    g.forward();
    g.backward(y);
    REQUIRE(g.grad_of(x).data[0] == 6.0f);
}

TEST_CASE("gradient of an unused parameter is a zero tensor") {
    graph g;
    auto consts = g.leaf(tensor::full({1, 4}, 2.0f));
    auto unused = g.leaf(tensor::full({2, 2}, 5.0f), true, "unused");
    auto y = g.sum_all(consts);
    g.forward();
    g.backward(y);
    REQUIRE(g.at(y).value.data[0] == 8.0f);
    const tensor & gz = g.grad_of(unused);
    REQUIRE(gz.numel() == 4);
    for (float v : gz.data) {
        REQUIRE(v == 0.0f);
    }
}

TEST_CASE("backward requires a scalar seed and a prior forward") {
    graph g;
    auto x = g.leaf(tensor::full({2, 2}, 1.0f), true);
    auto y = g.gelu(x);
    REQUIRE_THROWS_AS(g.backward(y), error);   // no forward yet
    g.forward();
    REQUIRE_THROWS_AS(g.backward(y), error);   // non-scalar seed
}

TEST_CASE("shape mismatches name the node and shapes") {
    graph g;
    auto a = g.leaf(tensor::zeros({2, 3}));
    auto b = g.leaf(tensor::zeros({4, 5}));
    try {
        g.matmul(a, b);
        FAIL("expected shape error");
    } catch (const error & e) {
        REQUIRE(e.kind() == errc::shape_mismatch);
        REQUIRE(std::string(e.what()).find("[2,3]") != std::string::npos);
        REQUIRE(std::string(e.what()).find("[4,5]") != std::string::npos);
    }
}

TEST_CASE("linear layer with squared loss passes grad check at 1e-3") {
    rng r(11);
    graph g;
    auto x = g.leaf(random_tensor(r, {4, 6}));
    auto w = g.leaf(random_tensor(r, {3, 6}, 0.7f, true), true, "w");
    auto b = g.leaf(random_tensor(r, {3}, 0.3f, true), true, "b");
    auto y = g.add(g.matmul(x, w, true), b);
    auto loss = g.sum_all(g.square(y));
    auto report = g.grad_check(loss, 1e-3);
    CAPTURE(report.max_rel);
    REQUIRE(report.pass);
}

TEST_CASE("a gradient corrupted by 2x fails the finite-difference comparison") {
    rng r(13);
    graph g;
    auto x = g.leaf(random_tensor(r, {2, 5}, 1.0f, true), true, "x");
    auto loss = g.sum_all(g.square(g.gelu(x)));
    g.forward();
    g.backward(loss);

    const double tol = 1e-3;
    bool any_fail = false;
    const node & n = g.at(x);
    for (int64_t e = 0; e < n.numel(); ++e) {
        const double xv = double(n.value.data[size_t(e)]);
        const double h = 1e-4 * (1.0 + std::fabs(xv));
        const double fd = (g.eval_f64(loss, x, e, h) - g.eval_f64(loss, x, e, -h)) / (2 * h);
        const double an = 2.0 * double(g.grad_of(x).data[size_t(e)]);   // corrupted
        const double rel = std::fabs(an - fd) / (std::max(std::fabs(an), std::fabs(fd)) + 1e-6 / tol);
        if (rel > tol) any_fail = true;
    }
    REQUIRE(any_fail);
}

TEST_CASE("GELU node passes grad check at 1e-3") {
    rng r(17);
    graph g;
    auto x = g.leaf(random_tensor(r, {3, 7}, 1.5f, true), true, "x");
    auto loss = g.sum_all(g.gelu(x));
    auto report = g.grad_check(loss, 1e-3);
    REQUIRE(report.pass);
}

TEST_CASE("forward is deterministic bit for bit") {
    rng r(23);
    graph g;
    auto x = g.leaf(random_tensor(r, {5, 8}));
    auto w = g.leaf(random_tensor(r, {8, 8}));
    auto y = g.softmax_rows(g.matmul(g.gelu(g.matmul(x, w)), w, true));
    g.forward();
    const auto first = g.at(y).value.data;
    g.forward();
    REQUIRE(first == g.at(y).value.data);
}

// every differentiable op verified against 64-bit central differences,
// randomized shapes and values, 100 seeds
TEST_CASE("property: analytic gradients match finite differences over 100 seeds") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        rng r(seed * 7919);
        graph g;
        const int64_t m = 2 + r.next_below(3);
        const int64_t n = 2 + r.next_below(4);
        const int64_t k = 2 + r.next_below(3);

        auto x = g.leaf(random_tensor(r, {m, k}, 0.8f, true), true, "x");
        auto w = g.leaf(random_tensor(r, {n, k}, 0.8f, true), true, "w");
        auto b = g.leaf(random_tensor(r, {n}, 0.5f, true), true, "b");

        graph::id h = g.add(g.matmul(x, w, true), b);          // matmul nt + row add
        switch (seed % 5) {
            case 0: h = g.gelu(h); break;
            case 1: h = g.sigmoid(h); break;
            case 2: h = g.square(h); break;
            case 3: h = g.softmax_rows(h); break;
            case 4: {
                auto gain = g.leaf(random_tensor(r, {n}, 0.5f, true), true, "gain");
                auto bias = g.leaf(random_tensor(r, {n}, 0.5f, true), true, "bias");
                h = g.layer_norm(h, gain, bias);
                break;
            }
        }
        if (seed % 3 == 0) {
            auto w2 = g.leaf(random_tensor(r, {n, n}, 0.6f, true), true, "w2");
            h = g.matmul(h, w2);                               // matmul nn
        }
        if (seed % 4 == 0) {
            auto s = g.leaf(random_tensor(r, {1}, 0.5f, true), true, "s");
            h = g.mul(h, s);                                   // scalar broadcast
        }
        graph::id loss;
        if (seed % 2 == 0) {
            std::vector<int32_t> targets(size_t(m));
            for (auto & t : targets) t = int32_t(r.next_below(n));
            loss = g.cross_entropy(h, targets);
        } else {
            auto cw = g.leaf(random_tensor(r, {m, n}, 0.7f));
            loss = g.sum_all(g.mul(h, cw));
        }
        loss = g.scale(loss, 0.5f);

        auto report = g.grad_check(loss, 1e-3);
        CAPTURE(seed, report.max_rel);
        REQUIRE(report.pass);
    }
}

TEST_CASE("property: embedding lookup gradients match finite differences") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        rng r(seed * 104729);
        graph g;
        const int64_t vocab = 6, d = 4, len = 5;
        auto table = g.leaf(random_tensor(r, {vocab, d}, 0.8f, true), true, "emb");
        std::vector<int32_t> ids(size_t(len));
        for (auto & t : ids) t = int32_t(r.next_below(vocab));
        auto e = g.embed_lookup(table, ids);
        std::vector<int32_t> targets(size_t(len));
        for (auto & t : targets) t = int32_t(r.next_below(d));
        auto loss = g.cross_entropy(e, targets);
        auto report = g.grad_check(loss, 1e-3);
        CAPTURE(seed, report.max_rel);
        REQUIRE(report.pass);
    }
}

TEST_CASE("property: backward of a sum equals the sum of backwards") {
    for (uint64_t seed = 1; seed <= 25; ++seed) {
        rng r(seed * 31337);
        const tensor x0 = random_tensor(r, {3, 4}, 0.9f, true);
        const tensor w0 = random_tensor(r, {4, 4}, 0.9f, true);

        auto build = [&](graph & g, graph::id & s1, graph::id & s2, graph::id & xi, graph::id & wi) {
            xi = g.leaf(x0, true, "x");
            wi = g.leaf(w0, true, "w");
            auto h = g.gelu(g.matmul(xi, wi));
            s1 = g.sum_all(h);
            s2 = g.sum_all(g.square(h));
        };

        graph ga;
        graph::id s1a, s2a, xa, wa;
        build(ga, s1a, s2a, xa, wa);
        auto total = ga.add(s1a, s2a);
        ga.forward();
        ga.backward(total);
        const auto gx_sum = ga.grad_of(xa).data;

        graph gb;
        graph::id s1b, s2b, xb, wb;
        build(gb, s1b, s2b, xb, wb);
        gb.forward();
        gb.backward(s1b);
        auto gx1 = gb.grad_of(xb).data;
        gb.backward(s2b);
        const auto & gx2 = gb.grad_of(xb).data;

        for (size_t i = 0; i < gx_sum.size(); ++i) {
            REQUIRE(gx_sum[i] == Catch::Approx(gx1[i] + gx2[i]).margin(1e-5));
        }
    }
}
