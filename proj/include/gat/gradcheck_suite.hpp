#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "gat/gradcheck.hpp"
#include "gat/train.hpp"

namespace gat {

struct SuiteOutcome {
    std::vector<GradCheckResult> results;
    bool all_pass = true;
    double seconds = 0.0;
};

// Finite-difference sweep over every differentiable op and the composite
// model pieces, on small random shapes. `corrupt_op` perturbs the tape
// gradient of the named check so the harness itself can be exercised.
inline SuiteOutcome run_gradcheck_suite(std::uint64_t seed,
                                        const std::string& corrupt_op = "") {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteOutcome outcome;
    Rng rng(seed);

    const auto rand_t = [&rng](Shape shape, double lo = -1.0, double hi = 1.0) {
        std::vector<double> d(numel(shape));
        for (double& v : d) v = rng.uniform(lo, hi);
        return Tensor::of(std::move(shape), std::move(d));
    };
    const auto run = [&](const std::string& name, const LossBuilder& f,
                         const std::vector<Tensor>& leaves, double tol, double floor) {
        const double corrupt = name == corrupt_op ? 1e-2 : 0.0;
        outcome.results.push_back(check_gradients(name, f, leaves, 1e-5, tol, corrupt, floor));
        outcome.all_pass = outcome.all_pass && outcome.results.back().pass;
    };
    const auto weighted_sum = [](const Tensor& x, const Tensor& w) {
        return sum(hadamard(x, w));
    };

    // ---- primitive ops, tight tolerance ----
    {
        const Tensor a = rand_t({3, 4}), b = rand_t({4, 2});
        run("matmul", [](Tape&, const std::vector<Tensor>& in) {
            return sum(matmul(in[0], in[1]));
        }, {a, b}, 1e-6, 1e-8);
    }
    {
        const Tensor a = rand_t({3, 4}), b = rand_t({5, 4});
        run("matmul_nt", [](Tape&, const std::vector<Tensor>& in) {
            return sum(matmul_nt(in[0], in[1]));
        }, {a, b}, 1e-6, 1e-8);
    }
    {
        const Tensor a = rand_t({2, 5}), b = rand_t({2, 5}), w = rand_t({2, 5});
        run("add", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(add(in[0], in[1]), w);
        }, {a, b}, 1e-6, 1e-8);
        run("hadamard", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(hadamard(in[0], in[1]), w);
        }, {a, b}, 1e-6, 1e-8);
        run("scale", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(scale(in[0], -1.7), w);
        }, {a}, 1e-6, 1e-8);
    }
    {
        const Tensor x = rand_t({3, 4}), b = rand_t({4}), w = rand_t({3, 4});
        run("add_row_bias", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(add_row_bias(in[0], in[1]), w);
        }, {x, b}, 1e-6, 1e-8);
    }
    {
        // keep relu inputs away from the kink
        std::vector<double> d(12);
        for (double& v : d) {
            v = rng.uniform(0.15, 1.0);
            if (rng.below(2)) v = -v;
        }
        const Tensor x = Tensor::of({3, 4}, std::move(d));
        const Tensor w = rand_t({3, 4});
        run("relu", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(relu(in[0]), w);
        }, {x}, 1e-6, 1e-8);
    }
    {
        const Tensor x = rand_t({2, 6}), w = rand_t({2, 6});
        run("sigmoid", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(sigmoid(in[0]), w);
        }, {x}, 1e-6, 1e-8);
        run("tanh", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(tanh(in[0]), w);
        }, {x}, 1e-6, 1e-8);
        run("softmax_rows", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(softmax_rows(in[0]), w);
        }, {x}, 1e-6, 1e-8);
    }
    {
        const Tensor x = rand_t({4, 6}), g = rand_t({6}, 0.5, 1.5), b = rand_t({6});
        const Tensor w = rand_t({4, 6});
        run("layer_norm", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(layer_norm(in[0], in[1], in[2], kLayerNormEps), w);
        }, {x, g, b}, 1e-6, 1e-8);
    }
    {
        const Tensor a = rand_t({3, 2}), b = rand_t({3, 3}), w = rand_t({3, 5});
        run("concat_last_dim", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(concat_last_dim(in[0], in[1]), w);
        }, {a, b}, 1e-6, 1e-8);
    }
    {
        const Tensor x = rand_t({3, 6}), w = rand_t({3, 3});
        run("slice_last_dim", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(slice_last_dim(in[0], 2, 3), w);
        }, {x}, 1e-6, 1e-8);
    }
    {
        const Tensor x = rand_t({4, 3}), w = rand_t({3});
        run("mean_rows", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(mean_rows(in[0]), w);
        }, {x}, 1e-6, 1e-8);
        run("sum", [](Tape&, const std::vector<Tensor>& in) { return sum(in[0]); }, {x}, 1e-6,
            1e-8);
        const Tensor w2 = rand_t({12});
        run("reshape", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(reshape(in[0], {12}), w2);
        }, {x}, 1e-6, 1e-8);
    }
    {
        const Tensor table = rand_t({5, 3}), w = rand_t({4, 3});
        run("embedding_lookup", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(embedding_lookup(in[0], {4, 0, 4, 2}), w);
        }, {table}, 1e-6, 1e-8);
    }
    {
        const Tensor r0 = rand_t({4}), r1 = rand_t({4}), r2 = rand_t({4});
        const Tensor w = rand_t({3, 4});
        run("stack_rows", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(stack_rows({in[0], in[1], in[2]}), w);
        }, {r0, r1, r2}, 1e-6, 1e-8);
    }
    {
        const Tensor logits = rand_t({7}, -2.0, 2.0);
        run("cross_entropy", [](Tape&, const std::vector<Tensor>& in) {
            return cross_entropy(in[0], 3);
        }, {logits}, 1e-6, 1e-8);
    }

    // ---- composite model pieces ----
    const std::size_t d_m = 4, h = 2, d_ff = 5, n = 3;
    const auto make_layer = [&](bool geometry) {
        EncoderLayerParams p;
        for (std::size_t k = 0; k < h; ++k) {
            AttentionHeadParams head;
            head.W_QA = rand_t({d_m, d_m / h});
            head.W_KA = rand_t({d_m, d_m / h});
            head.W_VA = rand_t({d_m, d_m / h});
            if (geometry) {
                head.W_QG = rand_t({d_m, d_m / h});
                head.W_KG = rand_t({d_m, d_m / h});
            }
            p.heads.push_back(head);
        }
        p.W_O = rand_t({d_m, d_m});
        p.glu = GluParams{rand_t({2 * d_m, d_m}), rand_t({d_m}), rand_t({d_m, d_m}),
                          rand_t({d_m})};
        p.ff = {rand_t({d_m, d_ff}), rand_t({d_ff}), rand_t({d_ff, d_m}), rand_t({d_m})};
        p.ln1 = {rand_t({d_m}, 0.5, 1.5), rand_t({d_m})};
        p.ln2 = {rand_t({d_m}, 0.5, 1.5), rand_t({d_m})};
        return p;
    };

    for (const auto& [mode, name] :
         {std::pair{GeometryMode::concat, "gsr_attention_concat"},
          std::pair{GeometryMode::add, "gsr_attention_add"},
          std::pair{GeometryMode::off, "gsr_attention_off"}}) {
        const EncoderLayerParams proto = make_layer(true);
        const Tensor xa = rand_t({n, d_m}), xg = rand_t({n, d_m}, 0.0, 1.0);
        const Tensor w = rand_t({n, d_m});
        std::vector<Tensor> leaves;
        for (const auto& head : proto.heads)
            for (const Tensor* t :
                 {&head.W_QA, &head.W_KA, &head.W_VA, &head.W_QG, &head.W_KG})
                leaves.push_back(*t);
        leaves.push_back(proto.W_O);
        const GeometryMode m = mode;
        run(name, [&, m](Tape&, const std::vector<Tensor>& in) {
            EncoderLayerParams p = proto;
            std::size_t i = 0;
            for (auto& head : p.heads) {
                head.W_QA = in[i++];
                head.W_KA = in[i++];
                head.W_VA = in[i++];
                head.W_QG = in[i++];
                head.W_KG = in[i++];
            }
            p.W_O = in[i++];
            return weighted_sum(gsr_attention(xa, xg, p, m), w);
        }, leaves, 1e-4, 1e-6);
    }
    {
        const GluParams proto{rand_t({2 * d_m, d_m}), rand_t({d_m}), rand_t({d_m, d_m}),
                              rand_t({d_m})};
        const Tensor attn = rand_t({n, d_m}), xa = rand_t({n, d_m}), xg = rand_t({n, d_m});
        const Tensor w = rand_t({n, d_m});
        run("glu_refine", [&](Tape&, const std::vector<Tensor>& in) {
            return weighted_sum(
                glu_refine(attn, xa, xg, GluParams{in[0], in[1], in[2], in[3]}), w);
        }, {proto.W_g, proto.b_g, proto.W_i, proto.b_i}, 1e-4, 1e-6);
    }
    {
        // one LSTM chain
        const std::size_t d_in = 3, d_hid = 2;
        const Tensor wx = rand_t({d_in, 4 * d_hid}), wh = rand_t({d_hid, 4 * d_hid});
        const Tensor b = rand_t({4 * d_hid});
        const std::vector<Tensor> xs = {rand_t({d_in}), rand_t({d_in}), rand_t({d_in})};
        const Tensor w = rand_t({d_hid});
        run("lstm_unrolled", [&](Tape&, const std::vector<Tensor>& in) {
            const LstmParams p{in[0], in[1], in[2]};
            LstmState s = LstmState::zero(d_hid);
            for (const Tensor& x : xs) s = lstm_step(x, s, p);
            return weighted_sum(s.h, w);
        }, {wx, wh, b}, 1e-4, 1e-6);
    }
    {
        // full model teacher-forced loss on two tiny scenes
        ModelConfig cfg;
        cfg.d = 8;
        cfg.d_m = 4;
        cfg.d_h = 4;
        cfg.d_w = 4;
        cfg.heads = 2;
        cfg.layers_enc = 1;
        cfg.layers_dec = 1;
        cfg.d_ff = 4;
        cfg.t_max = 6;
        cfg.decoder_self_attention = true;
        cfg.seed = Rng::derive(seed, 0xF0);
        GenParams gp;
        gp.seed = Rng::derive(seed, 0xF1);
        gp.n_scenes = 2;
        gp.feature_dim = cfg.d;
        const auto scenes = generate(gp);
        std::vector<CaptionPair> pairs;
        for (const auto& s : scenes) pairs.push_back(s.pair);
        const Vocabulary vocab = Vocabulary::from_pairs(pairs);
        cfg.vocab = vocab.size();
        std::vector<TrainItem> items;
        for (const auto& p : pairs) items.push_back({p.regions, vocab.encode(p.refs[0])});
        const ModelParams proto = ModelParams::init(cfg);
        std::vector<std::string> names;
        std::vector<Tensor> leaves;
        for (const auto& [pname, t] : proto.map()) {
            names.push_back(pname);
            leaves.push_back(t);
        }
        run("full_model_loss", [&](Tape&, const std::vector<Tensor>& in) {
            ModelParams p;
            for (std::size_t i = 0; i < names.size(); ++i) p.insert_raw(names[i], in[i]);
            return forward_xent_bound(items, bind(p, cfg, nullptr)).loss;
        }, leaves, 1e-4, 1e-6);
    }

    outcome.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return outcome;
}

}  // namespace gat
