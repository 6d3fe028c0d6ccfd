#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gat/gradcheck.hpp"
#include "gat/rng.hpp"
#include "gat/tensor.hpp"

using namespace gat;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::of(std::move(shape), std::move(d));
}

}  // namespace

TEST_CASE("matmul identity and hand case", "[tensor]") {
    const Tensor I = Tensor::of({2, 2}, {1, 0, 0, 1});
    const Tensor M = Tensor::of({2, 2}, {3.5, -2, 0.25, 7});
    REQUIRE(matmul(I, M).identical(M));

    const Tensor A = Tensor::of({2, 2}, {1, 2, 3, 4});
    const Tensor B = Tensor::of({2, 1}, {0, 1});
    const Tensor C = matmul(A, B);
    REQUIRE(C.shape() == Shape{2, 1});
    REQUIRE(C[0] == 2.0);
    REQUIRE(C[1] == 4.0);
}

TEST_CASE("matmul shape mismatch names both shapes", "[tensor]") {
    const Tensor A = Tensor::zeros({2, 3});
    const Tensor B = Tensor::zeros({4, 2});
    try {
        matmul(A, B);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2x3]") != std::string::npos);
        REQUIRE(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences", "[tensor][fd]") {
    Rng rng(11);
    const Tensor A = rand_tensor(rng, {3, 4});
    const Tensor B = rand_tensor(rng, {4, 2});
    auto res = check_gradients(
        "sum(matmul)",
        [](Tape&, const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); }, {A, B},
        1e-5, 1e-6);
    INFO(res.worst);
    REQUIRE(res.pass);
}

TEST_CASE("matmul_nt agrees with explicit transpose", "[tensor][fd]") {
    Rng rng(12);
    const Tensor A = rand_tensor(rng, {3, 4});
    const Tensor B = rand_tensor(rng, {5, 4});
    const Tensor C = matmul_nt(A, B);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < 4; ++p) s += A.at(i, p) * B.at(j, p);
            REQUIRE(C.at(i, j) == Catch::Approx(s).margin(1e-15));
        }
    auto res = check_gradients(
        "sum(matmul_nt)",
        [](Tape&, const std::vector<Tensor>& in) { return sum(matmul_nt(in[0], in[1])); },
        {A, B}, 1e-5, 1e-6);
    REQUIRE(res.pass);
}

TEST_CASE("softmax rows", "[tensor]") {
    const Tensor eq = Tensor::of({1, 4}, {3.0, 3.0, 3.0, 3.0});
    const Tensor u = softmax_rows(eq);
    for (std::size_t j = 0; j < 4; ++j) REQUIRE(u[j] == Catch::Approx(0.25).margin(1e-15));

    const Tensor x = Tensor::of({1, 2}, {0.0, std::log(3.0)});
    const Tensor p = softmax_rows(x);
    REQUIRE(p[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(p[1] == Catch::Approx(0.75).margin(1e-12));

    Rng rng(7);
    const Tensor r = rand_tensor(rng, {5, 9}, -30.0, 30.0);
    const Tensor s = softmax_rows(r);
    for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            REQUIRE(s.at(i, j) >= 0.0);
            total += s.at(i, j);
        }
        REQUIRE(std::abs(total - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax gradient", "[tensor][fd]") {
    Rng rng(13);
    const Tensor x = rand_tensor(rng, {3, 5});
    const Tensor w = rand_tensor(rng, {3, 5});
    auto res = check_gradients(
        "softmax_rows",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(softmax_rows(in[0]), w));
        },
        {x}, 1e-5, 1e-6);
    INFO(res.worst);
    REQUIRE(res.pass);
}

TEST_CASE("layer_norm values", "[tensor]") {
    const Tensor g1 = Tensor::full({3}, 1.0);
    const Tensor b0 = Tensor::zeros({3});
    const Tensor cst = Tensor::of({1, 3}, {4.2, 4.2, 4.2});
    const Tensor z = layer_norm(cst, g1, b0, 1e-5);
    for (std::size_t j = 0; j < 3; ++j) REQUIRE(std::abs(z[j]) < 1e-12);

    const Tensor g2 = Tensor::full({2}, 1.0);
    const Tensor z2 = layer_norm(Tensor::of({1, 2}, {1.0, 3.0}), g2, Tensor::zeros({2}), 1e-12);
    REQUIRE(z2[0] == Catch::Approx(-1.0).margin(1e-9));
    REQUIRE(z2[1] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("layer_norm gradient", "[tensor][fd]") {
    Rng rng(14);
    const Tensor x = rand_tensor(rng, {4, 6});
    const Tensor g = rand_tensor(rng, {6}, 0.5, 1.5);
    const Tensor b = rand_tensor(rng, {6});
    const Tensor w = rand_tensor(rng, {4, 6});
    auto res = check_gradients(
        "layer_norm",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(layer_norm(in[0], in[1], in[2], 1e-5), w));
        },
        {x, g, b}, 1e-5, 1e-6);
    INFO(res.worst);
    REQUIRE(res.pass);
}

TEST_CASE("elementwise basics", "[tensor]") {
    REQUIRE(relu(Tensor::scalar(-3.0)).item() == 0.0);
    REQUIRE(relu(Tensor::scalar(2.5)).item() == 2.5);
    REQUIRE(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    REQUIRE(tanh(Tensor::scalar(0.0)).item() == 0.0);

    const Tensor a = Tensor::of({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::of({2, 2}, {5, 6, 7, 8});
    REQUIRE(add(a, b)[3] == 12.0);
    REQUIRE(hadamard(a, b)[2] == 21.0);
    REQUIRE_THROWS_AS(add(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("concat keeps left block bit-identical", "[tensor]") {
    Rng rng(15);
    const Tensor a = rand_tensor(rng, {3, 2});
    const Tensor b = rand_tensor(rng, {3, 4});
    const Tensor c = concat_last_dim(a, b);
    REQUIRE(c.shape() == Shape{3, 6});
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) REQUIRE(c.at(i, j) == a.at(i, j));
        for (std::size_t j = 0; j < 4; ++j) REQUIRE(c.at(i, 2 + j) == b.at(i, j));
    }
    const Tensor back = slice_last_dim(c, 0, 2);
    REQUIRE(back.identical(a));
}

TEST_CASE("structural op gradients", "[tensor][fd]") {
    Rng rng(16);
    const Tensor a = rand_tensor(rng, {3, 2});
    const Tensor b = rand_tensor(rng, {3, 4});
    const Tensor w = rand_tensor(rng, {3, 6});
    auto res = check_gradients(
        "concat_last_dim",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(concat_last_dim(in[0], in[1]), w));
        },
        {a, b}, 1e-5, 1e-6);
    REQUIRE(res.pass);

    const Tensor x = rand_tensor(rng, {4, 5});
    const Tensor w2 = rand_tensor(rng, {5});
    auto res2 = check_gradients(
        "mean_rows",
        [&w2](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(mean_rows(in[0]), w2));
        },
        {x}, 1e-5, 1e-6);
    REQUIRE(res2.pass);

    const Tensor w3 = rand_tensor(rng, {4, 2});
    auto res3 = check_gradients(
        "slice_last_dim",
        [&w3](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(slice_last_dim(in[0], 1, 2), w3));
        },
        {x}, 1e-5, 1e-6);
    REQUIRE(res3.pass);
}

TEST_CASE("backward on linear and quadratic losses", "[tensor]") {
    Rng rng(17);
    const Tensor p = rand_tensor(rng, {2, 3});

    Tape t1;
    const Tensor p1 = t1.watch(p);
    const GradMap g1 = t1.backward(sum(p1));
    const std::vector<double>* gp = g1.of(p1);
    REQUIRE(gp != nullptr);
    for (double v : *gp) REQUIRE(v == 1.0);

    Tape t2;
    const Tensor p2 = t2.watch(p);
    const GradMap g2 = t2.backward(sum(hadamard(p2, p2)));
    const std::vector<double>* gq = g2.of(p2);
    for (std::size_t i = 0; i < p.size(); ++i) REQUIRE((*gq)[i] == Catch::Approx(2.0 * p[i]));
}

TEST_CASE("backward rejects non-scalar loss", "[tensor]") {
    Tape tape;
    const Tensor p = tape.watch(Tensor::zeros({2, 2}));
    REQUIRE_THROWS_AS(tape.backward(p), ContractError);
    REQUIRE_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);
}

TEST_CASE("seeded forward+backward is bit-identical", "[tensor]") {
    auto run = [] {
        Rng rng(99);
        Tensor a = rand_tensor(rng, {4, 4});
        Tensor b = rand_tensor(rng, {4, 4});
        Tape tape;
        Tensor ta = tape.watch(a), tb = tape.watch(b);
        Tensor loss = sum(hadamard(softmax_rows(matmul(ta, tb)), tb));
        GradMap g = tape.backward(loss);
        std::vector<double> out = {loss.item()};
        const std::vector<double>* ga = g.of(ta);
        out.insert(out.end(), ga->begin(), ga->end());
        return out;
    };
    REQUIRE(run() == run());
}

TEST_CASE("embedding lookup gathers and scatter-adds", "[tensor][fd]") {
    const Tensor table = Tensor::of({3, 2}, {1, 2, 3, 4, 5, 6});
    const Tensor out = embedding_lookup(table, {2, 0, 2});
    REQUIRE(out.shape() == Shape{3, 2});
    REQUIRE(out.at(0, 0) == 5.0);
    REQUIRE(out.at(1, 1) == 2.0);

    Rng rng(18);
    const Tensor w = rand_tensor(rng, {3, 2});
    auto res = check_gradients(
        "embedding_lookup",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(embedding_lookup(in[0], {2, 0, 2}), w));
        },
        {table}, 1e-5, 1e-6);
    REQUIRE(res.pass);
    REQUIRE_THROWS_AS(embedding_lookup(table, {3}), ContractError);
}

TEST_CASE("stack_rows and reshape", "[tensor][fd]") {
    Rng rng(19);
    const Tensor r0 = rand_tensor(rng, {3});
    const Tensor r1 = rand_tensor(rng, {3});
    const Tensor m = stack_rows({r0, r1});
    REQUIRE(m.shape() == Shape{2, 3});
    REQUIRE(m.at(1, 2) == r1[2]);

    const Tensor w = rand_tensor(rng, {2, 3});
    auto res = check_gradients(
        "stack_rows",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(stack_rows({in[0], in[1]}), w));
        },
        {r0, r1}, 1e-5, 1e-6);
    REQUIRE(res.pass);

    const Tensor v = reshape(m, {6});
    REQUIRE(v.rank() == 1);
    REQUIRE(v[5] == m.at(1, 2));
    REQUIRE_THROWS_AS(reshape(m, {4}), DimensionError);
}

TEST_CASE("cross_entropy equals -log softmax at target", "[tensor][fd]") {
    Rng rng(20);
    const Tensor logits = rand_tensor(rng, {6}, -2.0, 2.0);
    const Tensor probs = softmax_rows(logits);
    for (int t = 0; t < 6; ++t) {
        const double ce = cross_entropy(logits, t).item();
        REQUIRE(ce == Catch::Approx(-std::log(probs[t])).margin(1e-12));
    }
    auto res = check_gradients(
        "cross_entropy",
        [](Tape&, const std::vector<Tensor>& in) { return cross_entropy(in[0], 3); }, {logits},
        1e-5, 1e-6);
    REQUIRE(res.pass);
}

TEST_CASE("add_row_bias broadcasts over rows", "[tensor][fd]") {
    Rng rng(21);
    const Tensor x = rand_tensor(rng, {3, 4});
    const Tensor b = rand_tensor(rng, {4});
    const Tensor y = add_row_bias(x, b);
    REQUIRE(y.at(2, 1) == Catch::Approx(x.at(2, 1) + b[1]));
    const Tensor w = rand_tensor(rng, {3, 4});
    auto res = check_gradients(
        "add_row_bias",
        [&w](Tape&, const std::vector<Tensor>& in) {
            return sum(hadamard(add_row_bias(in[0], in[1]), w));
        },
        {x, b}, 1e-5, 1e-6);
    REQUIRE(res.pass);
}

TEST_CASE("dropout is deterministic per seed and masks gradients", "[tensor]") {
    const Tensor x = Tensor::full({10}, 1.0);
    Rng r1(5), r2(5);
    Tape tape;
    const Tensor tx = tape.watch(x);
    const Tensor y = dropout(tx, 0.5, r1);
    const Tensor y2 = dropout(x, 0.5, r2);
    REQUIRE(y.vec() == y2.vec());
    const GradMap g = tape.backward(sum(y));
    const std::vector<double>* gx = g.of(tx);
    for (std::size_t i = 0; i < 10; ++i) {
        REQUIRE(((*gx)[i] == 0.0 || (*gx)[i] == 2.0));
        REQUIRE((y[i] != 0.0) == ((*gx)[i] != 0.0));
    }
    Rng r3(6);
    REQUIRE(dropout(x, 0.0, r3).identical(x));
}

TEST_CASE("mixed tapes are rejected", "[tensor]") {
    Tape t1, t2;
    const Tensor a = t1.watch(Tensor::zeros({2}));
    const Tensor b = t2.watch(Tensor::zeros({2}));
    REQUIRE_THROWS_AS(add(a, b), ContractError);
}

TEST_CASE("gradcheck catches a corrupted gradient", "[tensor]") {
    Rng rng(22);
    const Tensor a = rand_tensor(rng, {2, 2});
    auto res = check_gradients(
        "corrupted", [](Tape&, const std::vector<Tensor>& in) { return sum(in[0]); }, {a}, 1e-5,
        1e-4, 1e-2);
    REQUIRE_FALSE(res.pass);
}
