#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "gat/scenes.hpp"
#include "gat/tensor.hpp"

namespace gat {

constexpr double kLayerNormEps = 1e-5;

enum class GeometryMode { off, concat, add };

struct GeometryEmbedderParams {
    Tensor W;  // 5 x d_m
    Tensor b;  // d_m
};

struct AttentionHeadParams {
    Tensor W_QA, W_KA, W_VA;  // d_m x d_head
    Tensor W_QG, W_KG;        // d_m x d_head; empty when geometry is off
};

struct GluParams {
    Tensor W_g;  // 2*d_m x d_m (context is [X_A; X_G])
    Tensor b_g;  // d_m
    Tensor W_i;  // d_m x d_m
    Tensor b_i;  // d_m
};

struct FeedForwardParams {
    Tensor W_1, b_1;  // d_m x d_ff, d_ff
    Tensor W_2, b_2;  // d_ff x d_m, d_m
};

struct LayerNormParams {
    Tensor gain, bias;  // d_m
};

struct EncoderLayerParams {
    std::vector<AttentionHeadParams> heads;
    Tensor W_O;  // (h * d_head) x d_m
    std::optional<GluParams> glu;
    FeedForwardParams ff;
    LayerNormParams ln1, ln2;
};

// geometry 5-vectors embedded and rectified: X_G = relu(X_g W + b)
inline Tensor embed_geometry(const Tensor& geometry_raw, const GeometryEmbedderParams& p) {
    if (geometry_raw.rank() != 2 || geometry_raw.cols() != 5)
        throw DimensionError("embed_geometry: need [N x 5], got " +
                             shape_str(geometry_raw.shape()));
    for (std::size_t i = 0; i < geometry_raw.rows(); ++i) {
        if (!(geometry_raw.at(i, 0) < geometry_raw.at(i, 2)) ||
            !(geometry_raw.at(i, 1) < geometry_raw.at(i, 3)))
            throw ValidationError("embed_geometry: degenerate box in row " + std::to_string(i));
    }
    return relu(add_row_bias(matmul(geometry_raw, p.W), p.b));
}

// Geometry self-attention: queries and keys carry appearance and geometry
// projections (concatenated or summed), values are appearance only.
// concat scales logits by sqrt(2*d_k), add and off by sqrt(d_k).
inline Tensor gsr_attention(const Tensor& x_a, const Tensor& x_g, const EncoderLayerParams& p,
                            GeometryMode mode, double attn_dropout = 0.0,
                            Rng* dropout_rng = nullptr) {
    if (p.heads.empty()) throw ContractError("gsr_attention: no heads");
    const std::size_t d_head = p.heads[0].W_QA.cols();
    const double scale_div = mode == GeometryMode::concat
                                 ? std::sqrt(2.0 * static_cast<double>(d_head))
                                 : std::sqrt(static_cast<double>(d_head));
    Tensor merged;
    for (std::size_t k = 0; k < p.heads.size(); ++k) {
        const AttentionHeadParams& head = p.heads[k];
        Tensor q = matmul(x_a, head.W_QA);
        Tensor key = matmul(x_a, head.W_KA);
        if (mode == GeometryMode::concat) {
            q = concat_last_dim(q, matmul(x_g, head.W_QG));
            key = concat_last_dim(key, matmul(x_g, head.W_KG));
        } else if (mode == GeometryMode::add) {
            q = add(q, matmul(x_g, head.W_QG));
            key = add(key, matmul(x_g, head.W_KG));
        }
        Tensor weights = softmax_rows(scale(matmul_nt(q, key), 1.0 / scale_div));
        if (attn_dropout > 0.0 && dropout_rng)
            weights = dropout(weights, attn_dropout, *dropout_rng);
        const Tensor head_out = matmul(weights, matmul(x_a, head.W_VA));
        merged = k == 0 ? head_out : concat_last_dim(merged, head_out);
    }
    return matmul(merged, p.W_O);
}

// sigmoid gate from the [X_A; X_G] context, applied to a linear transform
// of the attention output
inline Tensor glu_refine(const Tensor& attn_out, const Tensor& x_a, const Tensor& x_g,
                         const GluParams& p) {
    const Tensor ctx = concat_last_dim(x_a, x_g);
    const Tensor gate = sigmoid(add_row_bias(matmul(ctx, p.W_g), p.b_g));
    return hadamard(gate, add_row_bias(matmul(attn_out, p.W_i), p.b_i));
}

inline Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
    return add_row_bias(matmul(relu(add_row_bias(matmul(x, p.W_1), p.b_1)), p.W_2), p.b_2);
}

inline Tensor encoder_layer(const Tensor& x, const Tensor& x_g, const EncoderLayerParams& p,
                            GeometryMode mode, bool use_glu, double attn_dropout = 0.0,
                            Rng* dropout_rng = nullptr) {
    Tensor a = gsr_attention(x, x_g, p, mode, attn_dropout, dropout_rng);
    if (use_glu) {
        if (!p.glu) throw ContractError("encoder_layer: GLU enabled but no GLU parameters");
        a = glu_refine(a, x, x_g, *p.glu);
    }
    const Tensor z = layer_norm(add(x, a), p.ln1.gain, p.ln1.bias, kLayerNormEps);
    return layer_norm(add(z, feed_forward(z, p.ff)), p.ln2.gain, p.ln2.bias, kLayerNormEps);
}

struct EncoderParams {
    Tensor in_W;  // d x d_m input projection
    Tensor in_b;  // d_m
    GeometryEmbedderParams geo;
    std::vector<EncoderLayerParams> layers;
};

// Appearance is projected to d_m once; X_G is embedded once and shared by
// every layer. Returns the refined region features X^r [N x d_m].
inline Tensor encode(const Tensor& appearance, const Tensor& geometry_raw,
                     const EncoderParams& p, GeometryMode mode, bool use_glu,
                     double attn_dropout = 0.0, Rng* dropout_rng = nullptr) {
    if (p.layers.empty()) throw ContractError("encode: need at least one layer");
    Tensor x = add_row_bias(matmul(appearance, p.in_W), p.in_b);
    const Tensor x_g = mode == GeometryMode::off
                           ? Tensor::zeros({appearance.rows(), p.in_W.cols()})
                           : embed_geometry(geometry_raw, p.geo);
    for (const EncoderLayerParams& layer : p.layers)
        x = encoder_layer(x, x_g, layer, mode, use_glu, attn_dropout, dropout_rng);
    return x;
}

}  // namespace gat
