#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gat/decoder.hpp"
#include "gat/gradcheck.hpp"

using namespace gat;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -0.5, double hi = 0.5) {
    std::vector<double> d(numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::of(std::move(shape), std::move(d));
}

DecoderLayerParams make_dec_layer(Rng& rng, std::size_t d_m, std::size_t h, std::size_t d_ff,
                                  bool self_attn, bool glu) {
    DecoderLayerParams p;
    const std::size_t d_head = d_m / h;
    for (std::size_t k = 0; k < h; ++k)
        p.cross_heads.push_back({rand_tensor(rng, {d_m, d_head}),
                                 rand_tensor(rng, {d_m, d_head}),
                                 rand_tensor(rng, {d_m, d_head})});
    p.cross_W_O = rand_tensor(rng, {d_m, d_m});
    if (self_attn) {
        SelfAttnParams sa;
        for (std::size_t k = 0; k < h; ++k)
            sa.heads.push_back({rand_tensor(rng, {d_m, d_head}),
                                rand_tensor(rng, {d_m, d_head}),
                                rand_tensor(rng, {d_m, d_head})});
        sa.W_O = rand_tensor(rng, {d_m, d_m});
        sa.ln = {Tensor::full({d_m}, 1.0), Tensor::zeros({d_m})};
        p.self_attn = sa;
    }
    if (glu) {
        p.glu = GluParams{rand_tensor(rng, {2 * d_m, d_m}), rand_tensor(rng, {d_m}),
                          rand_tensor(rng, {d_m, d_m}), rand_tensor(rng, {d_m})};
    }
    p.ff.W_1 = rand_tensor(rng, {d_m, d_ff});
    p.ff.b_1 = rand_tensor(rng, {d_ff});
    p.ff.W_2 = rand_tensor(rng, {d_ff, d_m});
    p.ff.b_2 = rand_tensor(rng, {d_m});
    p.ln1 = {Tensor::full({d_m}, 1.0), Tensor::zeros({d_m})};
    p.ln2 = {Tensor::full({d_m}, 1.0), Tensor::zeros({d_m})};
    return p;
}

}  // namespace

TEST_CASE("lstm with zero parameters stays at zero", "[decoder]") {
    const std::size_t d_in = 4, d_h = 3;
    LstmParams p{Tensor::zeros({d_in, 4 * d_h}), Tensor::zeros({d_h, 4 * d_h}),
                 Tensor::zeros({4 * d_h})};
    LstmState s = LstmState::zero(d_h);
    Rng rng(61);
    for (int t = 0; t < 4; ++t) {
        s = lstm_step(rand_tensor(rng, {d_in}), s, p);
        for (std::size_t j = 0; j < d_h; ++j) {
            REQUIRE(s.h[j] == 0.0);
            REQUIRE(s.c[j] == 0.0);
        }
    }
}

TEST_CASE("saturated forget gate is pure memory", "[decoder]") {
    const std::size_t d_in = 3, d_h = 2;
    std::vector<double> bias(4 * d_h, 0.0);
    for (std::size_t j = d_h; j < 2 * d_h; ++j) bias[j] = 50.0;  // forget slice
    LstmParams p{Tensor::zeros({d_in, 4 * d_h}), Tensor::zeros({d_h, 4 * d_h}),
                 Tensor::of({4 * d_h}, bias)};
    LstmState s{Tensor::zeros({d_h}), Tensor::of({d_h}, {0.37, -1.2})};
    const LstmState next = lstm_step(Tensor::of({d_in}, {1.0, -2.0, 0.5}), s, p);
    REQUIRE(std::abs(next.c[0] - 0.37) <= 1e-12);
    REQUIRE(std::abs(next.c[1] + 1.2) <= 1e-12);
}

TEST_CASE("lstm step matches independent oracle values", "[decoder]") {
    const std::size_t d_in = 3, d_h = 2;
    std::vector<double> wx(d_in * 4 * d_h), wh(d_h * 4 * d_h), b(4 * d_h);
    for (std::size_t i = 0; i < wx.size(); ++i) wx[i] = 0.01 * static_cast<double>(i) - 0.1;
    for (std::size_t i = 0; i < wh.size(); ++i) wh[i] = 0.02 * static_cast<double>(i) - 0.05;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.005 * static_cast<double>(i);
    LstmParams p{Tensor::of({d_in, 4 * d_h}, wx), Tensor::of({d_h, 4 * d_h}, wh),
                 Tensor::of({4 * d_h}, b)};
    LstmState s{Tensor::of({d_h}, {0.1, -0.2}), Tensor::of({d_h}, {0.05, 0.3})};
    const LstmState next = lstm_step(Tensor::of({d_in}, {0.4, -0.3, 0.9}), s, p);
    REQUIRE(next.c[0] == Catch::Approx(0.04764362108183913).margin(1e-14));
    REQUIRE(next.c[1] == Catch::Approx(0.18145422256630717).margin(1e-14));
    REQUIRE(next.h[0] == Catch::Approx(0.02464848257835876).margin(1e-14));
    REQUIRE(next.h[1] == Catch::Approx(0.09351134983195311).margin(1e-14));
}

TEST_CASE("lstm gradient through three unrolled steps", "[decoder][fd]") {
    Rng rng(62);
    const std::size_t d_in = 3, d_h = 2;
    const Tensor wx = rand_tensor(rng, {d_in, 4 * d_h});
    const Tensor wh = rand_tensor(rng, {d_h, 4 * d_h});
    const Tensor b = rand_tensor(rng, {4 * d_h});
    const std::vector<Tensor> xs = {rand_tensor(rng, {d_in}), rand_tensor(rng, {d_in}),
                                    rand_tensor(rng, {d_in})};
    const Tensor w = rand_tensor(rng, {d_h});
    auto res = check_gradients(
        "lstm_3steps",
        [&](Tape&, const std::vector<Tensor>& in) {
            const LstmParams p{in[0], in[1], in[2]};
            LstmState s = LstmState::zero(d_h);
            for (const Tensor& x : xs) s = lstm_step(x, s, p);
            return sum(hadamard(s.h, w));
        },
        {wx, wh, b}, 1e-5, 1e-4);
    INFO(res.worst);
    REQUIRE(res.pass);
}

TEST_CASE("single region cross-attention collapses to its projected value", "[decoder]") {
    Rng rng(63);
    const std::size_t d_m = 6, h = 2;
    const DecoderLayerParams p = make_dec_layer(rng, d_m, h, 8, false, false);
    const Tensor q = rand_tensor(rng, {d_m});
    const Tensor x_r = rand_tensor(rng, {1, d_m});

    Tensor merged;
    for (std::size_t k = 0; k < h; ++k) {
        const Tensor v = matmul(x_r, p.cross_heads[k].W_V);
        merged = k == 0 ? v : concat_last_dim(merged, v);
    }
    const Tensor attn_expect = matmul(merged, p.cross_W_O);
    const Tensor q_row = reshape(q, {1, d_m});
    const Tensor z = layer_norm(add(q_row, attn_expect), p.ln1.gain, p.ln1.bias, kLayerNormEps);
    const Tensor expect =
        layer_norm(add(z, feed_forward(z, p.ff)), p.ln2.gain, p.ln2.bias, kLayerNormEps);

    const Tensor out = decoder_step(q, x_r, {p}, nullptr, false);
    REQUIRE(out.shape() == Shape{d_m});
    for (std::size_t j = 0; j < d_m; ++j)
        REQUIRE(out[j] == Catch::Approx(expect[j]).margin(1e-15));
}

TEST_CASE("decoder layer matches independent oracle values", "[decoder]") {
    DecoderLayerParams p;
    p.cross_heads.push_back({Tensor::of({2, 2}, {0.5, 0.2, -0.3, 0.8}),
                             Tensor::of({2, 2}, {0.7, -0.1, 0.4, 0.6}),
                             Tensor::of({2, 2}, {1.1, -0.5, 0.2, 0.9})});
    p.cross_W_O = Tensor::of({2, 2}, {0.6, 0.3, -0.2, 1.0});
    p.ff.W_1 = Tensor::of({2, 3}, {0.5, -0.3, 0.2, 0.1, 0.4, -0.6});
    p.ff.b_1 = Tensor::of({3}, {0.01, 0.02, 0.03});
    p.ff.W_2 = Tensor::of({3, 2}, {0.7, 0.1, -0.2, 0.5, 0.3, -0.4});
    p.ff.b_2 = Tensor::of({2}, {-0.01, 0.02});
    p.ln1 = {Tensor::of({2}, {1.1, 0.9}), Tensor::of({2}, {0.01, -0.01})};
    p.ln2 = {Tensor::of({2}, {1.0, 1.05}), Tensor::of({2}, {0.0, 0.02})};

    const Tensor q = Tensor::of({2}, {0.3, -0.7});
    const Tensor x_r = Tensor::of({2, 2}, {0.9, 0.1, -0.4, 1.2});
    const Tensor f_t = decoder_step(q, x_r, {p}, nullptr, false);
    REQUIRE(f_t[0] == Catch::Approx(0.999997507918755).margin(1e-10));
    REQUIRE(f_t[1] == Catch::Approx(-1.0299973833146927).margin(1e-10));
}

TEST_CASE("decoder output width is d_m for any region count", "[decoder]") {
    Rng rng(64);
    const std::size_t d_m = 8;
    const std::vector<DecoderLayerParams> layers = {make_dec_layer(rng, d_m, 2, 10, false, true),
                                                    make_dec_layer(rng, d_m, 2, 10, false, true)};
    for (std::size_t n = 1; n <= 7; ++n) {
        const Tensor out =
            decoder_step(rand_tensor(rng, {d_m}), rand_tensor(rng, {n, d_m}), layers, nullptr,
                         true);
        REQUIRE(out.shape() == Shape{d_m});
    }
}

TEST_CASE("self-attention cache accumulates steps", "[decoder]") {
    Rng rng(65);
    const std::size_t d_m = 6;
    const std::vector<DecoderLayerParams> layers = {make_dec_layer(rng, d_m, 2, 8, true, false)};
    DecoderCache cache(1);
    const Tensor x_r = rand_tensor(rng, {3, d_m});
    for (std::size_t t = 1; t <= 4; ++t) {
        decoder_step(rand_tensor(rng, {d_m}), x_r, layers, &cache, false);
        REQUIRE(cache.layer_inputs[0].size() == t);
    }
    REQUIRE_THROWS_AS(decoder_step(rand_tensor(rng, {d_m}), x_r, layers, nullptr, false),
                      ContractError);
}

TEST_CASE("sinusoidal encoding", "[decoder]") {
    const Tensor pe1 = sinusoidal_encoding(1, 6);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(pe1[i] == (i % 2 == 0 ? 0.0 : 1.0));
    const Tensor pe3 = sinusoidal_encoding(3, 4);
    REQUIRE(pe3[0] == Catch::Approx(std::sin(2.0)).margin(1e-15));
    REQUIRE(pe3[1] == Catch::Approx(std::cos(2.0)).margin(1e-15));
    REQUIRE(pe3[2] == Catch::Approx(std::sin(2.0 / 100.0)).margin(1e-15));
    REQUIRE(pe3[3] == Catch::Approx(std::cos(2.0 / 100.0)).margin(1e-15));
}

TEST_CASE("word distribution properties", "[decoder]") {
    Rng rng(66);
    const std::size_t v = 9, d_m = 5;
    const Tensor f = rand_tensor(rng, {d_m});

    const Tensor uniform = word_distribution(f, Tensor::zeros({v, d_m}), Tensor::zeros({v}));
    for (std::size_t j = 0; j < v; ++j)
        REQUIRE(uniform[j] == Catch::Approx(1.0 / static_cast<double>(v)).margin(1e-15));

    std::vector<double> spike(v, 0.0);
    spike[4] = 50.0;
    const Tensor peaked = word_distribution(f, Tensor::zeros({v, d_m}), Tensor::of({v}, spike));
    REQUIRE(peaked[4] >= 1.0 - 1e-9);

    const Tensor w_p = rand_tensor(rng, {v, d_m});
    const Tensor b_p = rand_tensor(rng, {v});
    const Tensor dist = word_distribution(f, w_p, b_p);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += dist[j];
    REQUIRE(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("decoder gradients pass finite differences", "[decoder][fd]") {
    Rng rng(67);
    const std::size_t d_m = 4, h = 2, d_ff = 5, n = 3;
    const Tensor q = rand_tensor(rng, {d_m});
    const Tensor x_r = rand_tensor(rng, {n, d_m});
    const Tensor w = rand_tensor(rng, {d_m});
    const DecoderLayerParams proto = make_dec_layer(rng, d_m, h, d_ff, true, true);

    std::vector<Tensor> leaves;
    for (const auto& head : proto.cross_heads)
        for (const Tensor* t : {&head.W_Q, &head.W_K, &head.W_V}) leaves.push_back(*t);
    leaves.push_back(proto.cross_W_O);
    for (const auto& head : proto.self_attn->heads)
        for (const Tensor* t : {&head.W_Q, &head.W_K, &head.W_V}) leaves.push_back(*t);
    leaves.push_back(proto.self_attn->W_O);
    for (const Tensor* t : {&proto.glu->W_g, &proto.glu->b_g, &proto.glu->W_i, &proto.glu->b_i})
        leaves.push_back(*t);
    for (const Tensor* t : {&proto.ff.W_1, &proto.ff.b_1, &proto.ff.W_2, &proto.ff.b_2})
        leaves.push_back(*t);

    const auto rebuild = [&](const std::vector<Tensor>& in) {
        DecoderLayerParams p = proto;
        std::size_t i = 0;
        for (auto& head : p.cross_heads) {
            head.W_Q = in[i++];
            head.W_K = in[i++];
            head.W_V = in[i++];
        }
        p.cross_W_O = in[i++];
        for (auto& head : p.self_attn->heads) {
            head.W_Q = in[i++];
            head.W_K = in[i++];
            head.W_V = in[i++];
        }
        p.self_attn->W_O = in[i++];
        p.glu = GluParams{in[i], in[i + 1], in[i + 2], in[i + 3]};
        i += 4;
        p.ff = {in[i], in[i + 1], in[i + 2], in[i + 3]};
        return p;
    };

    auto res = check_gradients(
        "decoder_step",
        [&](Tape&, const std::vector<Tensor>& in) {
            const DecoderLayerParams p = rebuild(in);
            DecoderCache cache(1);
            // two steps so the self-attention history matters
            const Tensor f1 = decoder_step(q, x_r, {p}, &cache, true);
            const Tensor f2 = decoder_step(f1, x_r, {p}, &cache, true);
            return sum(hadamard(f2, w));
        },
        leaves, 1e-5, 1e-4);
    INFO(res.worst);
    REQUIRE(res.pass);
}
