#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "gat/encoder.hpp"
#include "gat/tensor.hpp"

namespace gat {

struct LstmParams {
    Tensor W_x;  // (d_w + d_m) x 4*d_h
    Tensor W_h;  // d_h x 4*d_h
    Tensor b;    // 4*d_h, gate order (input, forget, cell-candidate, output)
};

struct LstmState {
    Tensor h;  // d_h
    Tensor c;  // d_h

    static LstmState zero(std::size_t d_h) {
        return {Tensor::zeros({d_h}), Tensor::zeros({d_h})};
    }
};

// one step of a standard LSTM cell
inline LstmState lstm_step(const Tensor& x, const LstmState& state, const LstmParams& p) {
    const std::size_t d_h = state.h.cols();
    if (x.rank() != 1 || p.W_x.rows() != x.cols() || p.W_h.rows() != d_h ||
        p.W_x.cols() != 4 * d_h)
        throw DimensionError("lstm_step: input " + shape_str(x.shape()) + " vs W_x " +
                             shape_str(p.W_x.shape()));
    const Tensor xg = reshape(matmul(reshape(x, {1, x.cols()}), p.W_x), {4 * d_h});
    const Tensor hg = reshape(matmul(reshape(state.h, {1, d_h}), p.W_h), {4 * d_h});
    const Tensor gates = add(add(xg, hg), p.b);
    const Tensor gi = sigmoid(slice_last_dim(gates, 0, d_h));
    const Tensor gf = sigmoid(slice_last_dim(gates, d_h, d_h));
    const Tensor gc = tanh(slice_last_dim(gates, 2 * d_h, d_h));
    const Tensor go = sigmoid(slice_last_dim(gates, 3 * d_h, d_h));
    LstmState next;
    next.c = add(hadamard(gf, state.c), hadamard(gi, gc));
    next.h = hadamard(go, tanh(next.c));
    return next;
}

// sinusoidal position encoding for step t (1-based)
inline Tensor sinusoidal_encoding(std::size_t t, std::size_t dim) {
    std::vector<double> pe(dim);
    const double pos = static_cast<double>(t - 1);
    for (std::size_t i = 0; i < dim; ++i) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(dim));
        pe[i] = i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
    }
    return Tensor::of({dim}, std::move(pe));
}

struct DecoderHeadParams {
    Tensor W_Q, W_K, W_V;  // d_m x d_head
};

struct SelfAttnParams {
    std::vector<DecoderHeadParams> heads;
    Tensor W_O;
    LayerNormParams ln;
};

struct DecoderLayerParams {
    std::vector<DecoderHeadParams> cross_heads;
    Tensor cross_W_O;
    std::optional<SelfAttnParams> self_attn;
    std::optional<GluParams> glu;
    FeedForwardParams ff;
    LayerNormParams ln1, ln2;
};

// Per-layer history of step inputs, only used when the optional masked
// self-attention sub-layer is enabled. Value-semantic so beam hypotheses
// can fork it.
struct DecoderCache {
    std::vector<std::vector<Tensor>> layer_inputs;

    explicit DecoderCache(std::size_t layers = 0) : layer_inputs(layers) {}
};

namespace detail {

// multi-head attention of query rows against a key/value matrix
inline Tensor query_attention(const Tensor& q_row, const Tensor& kv,
                                     const std::vector<DecoderHeadParams>& heads,
                                     const Tensor& w_o, double attn_dropout, Rng* dropout_rng) {
    const std::size_t d_head = heads[0].W_Q.cols();
    const double denom = std::sqrt(static_cast<double>(d_head));
    Tensor merged;
    for (std::size_t k = 0; k < heads.size(); ++k) {
        const Tensor q = matmul(q_row, heads[k].W_Q);
        const Tensor key = matmul(kv, heads[k].W_K);
        Tensor weights = softmax_rows(scale(matmul_nt(q, key), 1.0 / denom));
        if (attn_dropout > 0.0 && dropout_rng)
            weights = dropout(weights, attn_dropout, *dropout_rng);
        const Tensor head_out = matmul(weights, matmul(kv, heads[k].W_V));
        merged = k == 0 ? head_out : concat_last_dim(merged, head_out);
    }
    return matmul(merged, w_o);
}

}  // namespace detail

// One decoding step through the stacked cross-attention layers. Layer 1
// queries with the projected position encoding, deeper layers query with
// the previous layer's output; keys/values are X^r everywhere. Returns
// F_t as a d_m vector.
inline Tensor decoder_step(const Tensor& query_dm, const Tensor& x_r,
                           const std::vector<DecoderLayerParams>& layers, DecoderCache* cache,
                           bool use_glu, double attn_dropout = 0.0, Rng* dropout_rng = nullptr) {
    if (layers.empty()) throw ContractError("decoder_step: need at least one layer");
    if (query_dm.rank() != 1 || query_dm.cols() != x_r.cols())
        throw DimensionError("decoder_step: query " + shape_str(query_dm.shape()) +
                             " vs regions " + shape_str(x_r.shape()));
    const std::size_t d_m = x_r.cols();
    Tensor x = query_dm;
    Tensor region_mean;  // lazy; only needed by the GLU context
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const DecoderLayerParams& p = layers[l];
        Tensor x_row = reshape(x, {1, d_m});
        if (p.self_attn) {
            if (!cache) throw ContractError("decoder_step: self-attention needs a cache");
            cache->layer_inputs[l].push_back(x);
            const Tensor history = stack_rows(cache->layer_inputs[l]);
            const Tensor s = detail::query_attention(
                x_row, history, p.self_attn->heads, p.self_attn->W_O, attn_dropout, dropout_rng);
            x_row = layer_norm(add(x_row, s), p.self_attn->ln.gain, p.self_attn->ln.bias,
                               kLayerNormEps);
        }
        Tensor a = detail::query_attention(x_row, x_r, p.cross_heads, p.cross_W_O,
                                                  attn_dropout, dropout_rng);
        if (use_glu) {
            if (!p.glu) throw ContractError("decoder_step: GLU enabled but no GLU parameters");
            if (region_mean.empty()) region_mean = reshape(mean_rows(x_r), {1, d_m});
            const Tensor ctx = concat_last_dim(x_row, region_mean);
            const Tensor gate = sigmoid(add_row_bias(matmul(ctx, p.glu->W_g), p.glu->b_g));
            a = hadamard(gate, add_row_bias(matmul(a, p.glu->W_i), p.glu->b_i));
        }
        const Tensor z = layer_norm(add(x_row, a), p.ln1.gain, p.ln1.bias, kLayerNormEps);
        const Tensor out =
            layer_norm(add(z, feed_forward(z, p.ff)), p.ln2.gain, p.ln2.bias, kLayerNormEps);
        x = reshape(out, {d_m});
    }
    return x;
}

// Whole teacher-forced sequence through the decoder stack in one pass:
// row t of `queries` is step t's projected position encoding, and the
// self-attention sub-layer (when present) is causally masked, so row t
// computes exactly what decoder_step computes at step t.
inline Tensor decoder_forward(const Tensor& queries, const Tensor& x_r,
                              const std::vector<DecoderLayerParams>& layers, bool use_glu,
                              double attn_dropout = 0.0, Rng* dropout_rng = nullptr) {
    if (layers.empty()) throw ContractError("decoder_forward: need at least one layer");
    if (queries.rank() != 2 || queries.cols() != x_r.cols())
        throw DimensionError("decoder_forward: queries " + shape_str(queries.shape()) +
                             " vs regions " + shape_str(x_r.shape()));
    const std::size_t steps = queries.rows();
    Tensor x = queries;
    Tensor region_mean;
    for (const DecoderLayerParams& p : layers) {
        if (p.self_attn) {
            const std::size_t d_head = p.self_attn->heads[0].W_Q.cols();
            const double denom = std::sqrt(static_cast<double>(d_head));
            Tensor merged;
            for (std::size_t k = 0; k < p.self_attn->heads.size(); ++k) {
                const auto& head = p.self_attn->heads[k];
                const Tensor q = matmul(x, head.W_Q);
                const Tensor key = matmul(x, head.W_K);
                Tensor weights = softmax_rows_causal(scale(matmul_nt(q, key), 1.0 / denom));
                if (attn_dropout > 0.0 && dropout_rng)
                    weights = dropout(weights, attn_dropout, *dropout_rng);
                const Tensor head_out = matmul(weights, matmul(x, head.W_V));
                merged = k == 0 ? head_out : concat_last_dim(merged, head_out);
            }
            const Tensor s = matmul(merged, p.self_attn->W_O);
            x = layer_norm(add(x, s), p.self_attn->ln.gain, p.self_attn->ln.bias,
                           kLayerNormEps);
        }
        Tensor a = detail::query_attention(x, x_r, p.cross_heads, p.cross_W_O,
                                                  attn_dropout, dropout_rng);
        if (use_glu) {
            if (!p.glu) throw ContractError("decoder_forward: GLU enabled but no parameters");
            if (region_mean.empty()) region_mean = mean_rows(x_r);
            const Tensor ctx = concat_last_dim(x, tile_rows(region_mean, steps));
            const Tensor gate = sigmoid(add_row_bias(matmul(ctx, p.glu->W_g), p.glu->b_g));
            a = hadamard(gate, add_row_bias(matmul(a, p.glu->W_i), p.glu->b_i));
        }
        const Tensor z = layer_norm(add(x, a), p.ln1.gain, p.ln1.bias, kLayerNormEps);
        x = layer_norm(add(z, feed_forward(z, p.ff)), p.ln2.gain, p.ln2.bias, kLayerNormEps);
    }
    return x;
}

// Eq.-style output head: softmax(W_p F_t + b_p) over the vocabulary
inline Tensor word_logits(const Tensor& f_t, const Tensor& w_p, const Tensor& b_p) {
    if (f_t.rank() != 1 || w_p.cols() != f_t.cols() || b_p.cols() != w_p.rows())
        throw DimensionError("word_logits: F_t " + shape_str(f_t.shape()) + " vs W_p " +
                             shape_str(w_p.shape()));
    return add(reshape(matmul_nt(reshape(f_t, {1, f_t.cols()}), w_p), {w_p.rows()}), b_p);
}

inline Tensor word_distribution(const Tensor& f_t, const Tensor& w_p, const Tensor& b_p) {
    return softmax_rows(word_logits(f_t, w_p, b_p));
}

}  // namespace gat
