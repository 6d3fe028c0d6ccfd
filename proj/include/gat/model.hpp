#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gat/decoder.hpp"
#include "gat/encoder.hpp"
#include "gat/scenes.hpp"
#include "gat/tensor.hpp"

namespace gat {

enum class PositionMode { sinusoidal, lstm };
enum class GluPlacement { none, enc, enc_dec };

struct ModelConfig {
    std::size_t d = 32;    // input region feature width
    std::size_t d_m = 64;  // model width
    std::size_t d_h = 128; // LSTM hidden width
    std::size_t d_w = 64;  // word embedding width
    std::size_t heads = 4;
    std::size_t layers_enc = 2;
    std::size_t layers_dec = 2;
    std::size_t d_ff = 128;
    std::size_t vocab = 0;
    std::size_t t_max = 16;
    GeometryMode geometry = GeometryMode::concat;
    PositionMode position = PositionMode::lstm;
    GluPlacement glu = GluPlacement::enc;
    bool decoder_self_attention = false;
    double dropout_lstm = 0.0;
    double dropout_attn = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (heads == 0 || d_m % heads != 0)
            throw ContractError("config: heads must divide d_m");
        for (const std::size_t v : {d, d_m, d_h, d_w, layers_enc, layers_dec, d_ff})
            if (v < 1) throw ContractError("config: all dimensions must be >= 1");
        if (t_max < 2) throw ContractError("config: t_max must be >= 2");
        if (vocab < 5) throw ContractError("config: vocabulary too small");
        if (dropout_lstm < 0.0 || dropout_lstm >= 1.0 || dropout_attn < 0.0 ||
            dropout_attn >= 1.0)
            throw ContractError("config: dropout rates must be in [0, 1)");
    }

    bool glu_enc() const { return glu != GluPlacement::none; }
    bool glu_dec() const { return glu == GluPlacement::enc_dec; }

    std::map<std::string, std::string> to_map() const {
        const auto fmt = [](double v) {
            std::ostringstream os;
            os.precision(17);
            os << v;
            return os.str();
        };
        std::map<std::string, std::string> m;
        m["d"] = std::to_string(d);
        m["d_m"] = std::to_string(d_m);
        m["d_h"] = std::to_string(d_h);
        m["d_w"] = std::to_string(d_w);
        m["heads"] = std::to_string(heads);
        m["layers_enc"] = std::to_string(layers_enc);
        m["layers_dec"] = std::to_string(layers_dec);
        m["d_ff"] = std::to_string(d_ff);
        m["vocab"] = std::to_string(vocab);
        m["t_max"] = std::to_string(t_max);
        m["geometry"] = geometry == GeometryMode::off      ? "off"
                        : geometry == GeometryMode::concat ? "concat"
                                                           : "add";
        m["position"] = position == PositionMode::lstm ? "lstm" : "sinusoidal";
        m["glu"] = glu == GluPlacement::none  ? "none"
                   : glu == GluPlacement::enc ? "enc"
                                              : "enc_dec";
        m["decoder_self_attention"] = decoder_self_attention ? "1" : "0";
        m["dropout_lstm"] = fmt(dropout_lstm);
        m["dropout_attn"] = fmt(dropout_attn);
        m["seed"] = std::to_string(seed);
        return m;
    }

    static ModelConfig from_map(const std::map<std::string, std::string>& m) {
        ModelConfig c;
        const auto get = [&m](const char* key) -> const std::string& {
            const auto it = m.find(key);
            if (it == m.end())
                throw ValidationError(std::string("config: missing key ") + key);
            return it->second;
        };
        try {
            c.d = std::stoul(get("d"));
            c.d_m = std::stoul(get("d_m"));
            c.d_h = std::stoul(get("d_h"));
            c.d_w = std::stoul(get("d_w"));
            c.heads = std::stoul(get("heads"));
            c.layers_enc = std::stoul(get("layers_enc"));
            c.layers_dec = std::stoul(get("layers_dec"));
            c.d_ff = std::stoul(get("d_ff"));
            c.vocab = std::stoul(get("vocab"));
            c.t_max = std::stoul(get("t_max"));
            c.dropout_lstm = std::stod(get("dropout_lstm"));
            c.dropout_attn = std::stod(get("dropout_attn"));
            c.seed = std::stoull(get("seed"));
        } catch (const std::logic_error& e) {
            throw ValidationError(std::string("config: bad numeric value: ") + e.what());
        }
        const std::string& geo = get("geometry");
        if (geo == "off")
            c.geometry = GeometryMode::off;
        else if (geo == "concat")
            c.geometry = GeometryMode::concat;
        else if (geo == "add")
            c.geometry = GeometryMode::add;
        else
            throw ValidationError("config: geometry must be off|concat|add, got " + geo);
        const std::string& pos = get("position");
        if (pos == "lstm")
            c.position = PositionMode::lstm;
        else if (pos == "sinusoidal")
            c.position = PositionMode::sinusoidal;
        else
            throw ValidationError("config: position must be lstm|sinusoidal, got " + pos);
        const std::string& g = get("glu");
        if (g == "none")
            c.glu = GluPlacement::none;
        else if (g == "enc")
            c.glu = GluPlacement::enc;
        else if (g == "enc_dec")
            c.glu = GluPlacement::enc_dec;
        else
            throw ValidationError("config: glu must be none|enc|enc_dec, got " + g);
        c.decoder_self_attention = get("decoder_self_attention") == "1";
        return c;
    }
};

// The complete named parameter collection of one model instance. Names are
// stable paths like "enc.l0.attn.h1.W_QA"; the map is ordered so iteration
// (and the checkpoint layout) is lexicographic.
class ModelParams {
   public:
    static ModelParams init(const ModelConfig& cfg) {
        cfg.validate();
        ModelParams mp;
        Rng rng(Rng::derive(cfg.seed, 0x696e6974));

        const auto xavier = [&rng](Shape shape) {
            const double fan_in = static_cast<double>(shape[0]);
            const double fan_out = static_cast<double>(shape[1]);
            const double bound = std::sqrt(6.0 / (fan_in + fan_out));
            std::vector<double> d(numel(shape));
            for (double& v : d) v = rng.uniform(-bound, bound);
            return Tensor::of(std::move(shape), std::move(d));
        };
        const auto put_linear = [&](const std::string& stem, std::size_t in, std::size_t out) {
            mp.params_.emplace(stem + ".W", xavier({in, out}));
            mp.params_.emplace(stem + ".b", Tensor::zeros({out}));
        };
        const auto put_ln = [&](const std::string& stem, std::size_t dim) {
            mp.params_.emplace(stem + ".gain", Tensor::full({dim}, 1.0));
            mp.params_.emplace(stem + ".bias", Tensor::zeros({dim}));
        };
        const auto put_glu = [&](const std::string& stem, std::size_t d_m) {
            mp.params_.emplace(stem + ".W_g", xavier({2 * d_m, d_m}));
            mp.params_.emplace(stem + ".b_g", Tensor::zeros({d_m}));
            mp.params_.emplace(stem + ".W_i", xavier({d_m, d_m}));
            mp.params_.emplace(stem + ".b_i", Tensor::zeros({d_m}));
        };
        const auto put_ff = [&](const std::string& stem, std::size_t d_m, std::size_t d_ff) {
            mp.params_.emplace(stem + ".W_1", xavier({d_m, d_ff}));
            mp.params_.emplace(stem + ".b_1", Tensor::zeros({d_ff}));
            mp.params_.emplace(stem + ".W_2", xavier({d_ff, d_m}));
            mp.params_.emplace(stem + ".b_2", Tensor::zeros({d_m}));
        };

        const std::size_t d_head = cfg.d_m / cfg.heads;
        mp.params_.emplace("emb.table", xavier({cfg.vocab, cfg.d_w}));

        put_linear("enc.in_proj", cfg.d, cfg.d_m);
        if (cfg.geometry != GeometryMode::off) {
            // box coordinates are uniform in (0,1) with std ~0.29, a quarter
            // of the unit variance the Xavier bound assumes; compensate so
            // the embedded geometry starts at the same magnitude as the
            // projected appearance
            const Tensor w = xavier({5, cfg.d_m});
            std::vector<double> scaled(w.vec());
            for (double& v : scaled) v *= 3.5;
            mp.params_.emplace("enc.geo.W", Tensor::of({5, cfg.d_m}, std::move(scaled)));
            mp.params_.emplace("enc.geo.b", Tensor::zeros({cfg.d_m}));
        }
        for (std::size_t l = 0; l < cfg.layers_enc; ++l) {
            const std::string stem = "enc.l" + std::to_string(l);
            for (std::size_t k = 0; k < cfg.heads; ++k) {
                const std::string hs = stem + ".attn.h" + std::to_string(k);
                mp.params_.emplace(hs + ".W_QA", xavier({cfg.d_m, d_head}));
                mp.params_.emplace(hs + ".W_KA", xavier({cfg.d_m, d_head}));
                mp.params_.emplace(hs + ".W_VA", xavier({cfg.d_m, d_head}));
                if (cfg.geometry != GeometryMode::off) {
                    mp.params_.emplace(hs + ".W_QG", xavier({cfg.d_m, d_head}));
                    mp.params_.emplace(hs + ".W_KG", xavier({cfg.d_m, d_head}));
                }
            }
            mp.params_.emplace(stem + ".attn.W_O", xavier({cfg.d_m, cfg.d_m}));
            if (cfg.glu_enc()) put_glu(stem + ".glu", cfg.d_m);
            put_ff(stem + ".ff", cfg.d_m, cfg.d_ff);
            put_ln(stem + ".ln1", cfg.d_m);
            put_ln(stem + ".ln2", cfg.d_m);
        }

        const std::size_t query_src = cfg.position == PositionMode::lstm ? cfg.d_h : cfg.d_w;
        put_linear("dec.query_proj", query_src, cfg.d_m);
        if (cfg.position == PositionMode::lstm) {
            mp.params_.emplace("dec.lstm.W_x", xavier({cfg.d_w + cfg.d_m, 4 * cfg.d_h}));
            mp.params_.emplace("dec.lstm.W_h", xavier({cfg.d_h, 4 * cfg.d_h}));
            std::vector<double> b(4 * cfg.d_h, 0.0);
            for (std::size_t j = cfg.d_h; j < 2 * cfg.d_h; ++j) b[j] = 1.0;  // forget bias
            mp.params_.emplace("dec.lstm.b", Tensor::of({4 * cfg.d_h}, std::move(b)));
        }
        for (std::size_t l = 0; l < cfg.layers_dec; ++l) {
            const std::string stem = "dec.l" + std::to_string(l);
            for (std::size_t k = 0; k < cfg.heads; ++k) {
                const std::string hs = stem + ".ca.h" + std::to_string(k);
                mp.params_.emplace(hs + ".W_Q", xavier({cfg.d_m, d_head}));
                mp.params_.emplace(hs + ".W_K", xavier({cfg.d_m, d_head}));
                mp.params_.emplace(hs + ".W_V", xavier({cfg.d_m, d_head}));
            }
            mp.params_.emplace(stem + ".ca.W_O", xavier({cfg.d_m, cfg.d_m}));
            if (cfg.decoder_self_attention) {
                for (std::size_t k = 0; k < cfg.heads; ++k) {
                    const std::string hs = stem + ".sa.h" + std::to_string(k);
                    mp.params_.emplace(hs + ".W_Q", xavier({cfg.d_m, d_head}));
                    mp.params_.emplace(hs + ".W_K", xavier({cfg.d_m, d_head}));
                    mp.params_.emplace(hs + ".W_V", xavier({cfg.d_m, d_head}));
                }
                mp.params_.emplace(stem + ".sa.W_O", xavier({cfg.d_m, cfg.d_m}));
                put_ln(stem + ".sa.ln", cfg.d_m);
            }
            if (cfg.glu_dec()) put_glu(stem + ".glu", cfg.d_m);
            put_ff(stem + ".ff", cfg.d_m, cfg.d_ff);
            put_ln(stem + ".ln1", cfg.d_m);
            put_ln(stem + ".ln2", cfg.d_m);
        }

        mp.params_.emplace("out.W_p", xavier({cfg.vocab, cfg.d_m}));
        mp.params_.emplace("out.b_p", Tensor::zeros({cfg.vocab}));
        return mp;
    }

    const std::map<std::string, Tensor>& map() const { return params_; }

    const Tensor& at(const std::string& name) const {
        const auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("params: unknown parameter " + name);
        return it->second;
    }

    void set(const std::string& name, Tensor t) {
        const auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("params: unknown parameter " + name);
        if (it->second.shape() != t.shape())
            throw DimensionError("params: shape change for " + name + ": " +
                                 shape_str(it->second.shape()) + " -> " + shape_str(t.shape()));
        it->second = std::move(t);
    }

    void insert_raw(const std::string& name, Tensor t) { params_[name] = std::move(t); }

   private:
    std::map<std::string, Tensor> params_;
};

// structured, possibly tape-bound view of the parameter map
struct BoundModel {
    ModelConfig cfg;
    EncoderParams enc;
    Tensor query_W, query_b;
    std::optional<LstmParams> lstm;
    std::vector<DecoderLayerParams> dec_layers;
    Tensor emb, w_p, b_p;
};

inline BoundModel bind(const ModelParams& mp, const ModelConfig& cfg, Tape* tape) {
    const auto p = [&](const std::string& name) {
        const Tensor& t = mp.at(name);
        return tape ? tape->watch(t) : t;
    };
    BoundModel m;
    m.cfg = cfg;
    m.emb = p("emb.table");
    m.enc.in_W = p("enc.in_proj.W");
    m.enc.in_b = p("enc.in_proj.b");
    if (cfg.geometry != GeometryMode::off) m.enc.geo = {p("enc.geo.W"), p("enc.geo.b")};
    for (std::size_t l = 0; l < cfg.layers_enc; ++l) {
        const std::string stem = "enc.l" + std::to_string(l);
        EncoderLayerParams layer;
        for (std::size_t k = 0; k < cfg.heads; ++k) {
            const std::string hs = stem + ".attn.h" + std::to_string(k);
            AttentionHeadParams head;
            head.W_QA = p(hs + ".W_QA");
            head.W_KA = p(hs + ".W_KA");
            head.W_VA = p(hs + ".W_VA");
            if (cfg.geometry != GeometryMode::off) {
                head.W_QG = p(hs + ".W_QG");
                head.W_KG = p(hs + ".W_KG");
            }
            layer.heads.push_back(head);
        }
        layer.W_O = p(stem + ".attn.W_O");
        if (cfg.glu_enc())
            layer.glu = GluParams{p(stem + ".glu.W_g"), p(stem + ".glu.b_g"),
                                  p(stem + ".glu.W_i"), p(stem + ".glu.b_i")};
        layer.ff = {p(stem + ".ff.W_1"), p(stem + ".ff.b_1"), p(stem + ".ff.W_2"),
                    p(stem + ".ff.b_2")};
        layer.ln1 = {p(stem + ".ln1.gain"), p(stem + ".ln1.bias")};
        layer.ln2 = {p(stem + ".ln2.gain"), p(stem + ".ln2.bias")};
        m.enc.layers.push_back(std::move(layer));
    }

    m.query_W = p("dec.query_proj.W");
    m.query_b = p("dec.query_proj.b");
    if (cfg.position == PositionMode::lstm)
        m.lstm = LstmParams{p("dec.lstm.W_x"), p("dec.lstm.W_h"), p("dec.lstm.b")};
    for (std::size_t l = 0; l < cfg.layers_dec; ++l) {
        const std::string stem = "dec.l" + std::to_string(l);
        DecoderLayerParams layer;
        for (std::size_t k = 0; k < cfg.heads; ++k) {
            const std::string hs = stem + ".ca.h" + std::to_string(k);
            layer.cross_heads.push_back({p(hs + ".W_Q"), p(hs + ".W_K"), p(hs + ".W_V")});
        }
        layer.cross_W_O = p(stem + ".ca.W_O");
        if (cfg.decoder_self_attention) {
            SelfAttnParams sa;
            for (std::size_t k = 0; k < cfg.heads; ++k) {
                const std::string hs = stem + ".sa.h" + std::to_string(k);
                sa.heads.push_back({p(hs + ".W_Q"), p(hs + ".W_K"), p(hs + ".W_V")});
            }
            sa.W_O = p(stem + ".sa.W_O");
            sa.ln = {p(stem + ".sa.ln.gain"), p(stem + ".sa.ln.bias")};
            layer.self_attn = std::move(sa);
        }
        if (cfg.glu_dec())
            layer.glu = GluParams{p(stem + ".glu.W_g"), p(stem + ".glu.b_g"),
                                  p(stem + ".glu.W_i"), p(stem + ".glu.b_i")};
        layer.ff = {p(stem + ".ff.W_1"), p(stem + ".ff.b_1"), p(stem + ".ff.W_2"),
                    p(stem + ".ff.b_2")};
        layer.ln1 = {p(stem + ".ln1.gain"), p(stem + ".ln1.bias")};
        layer.ln2 = {p(stem + ".ln2.gain"), p(stem + ".ln2.bias")};
        m.dec_layers.push_back(std::move(layer));
    }
    m.w_p = p("out.W_p");
    m.b_p = p("out.b_p");
    return m;
}

// ---- decoding state and stepping ----

struct DecodeState {
    LstmState lstm;
    DecoderCache cache;
    std::size_t t = 0;
};

// One image's evaluation context: refined regions plus the step function.
// Forking DecodeState gives independent continuations (used by beam search).
class ModelRun {
   public:
    ModelRun(const RegionSet& regions, const BoundModel& m, Rng* dropout_rng = nullptr)
        : m_(&m), rng_(dropout_rng) {
        regions.validate();
        if (regions.appearance.cols() != m.cfg.d)
            throw ArtifactMismatchError(
                "regions have feature width " + std::to_string(regions.appearance.cols()) +
                " but the model expects " + std::to_string(m.cfg.d));
        x_r_ = encode(regions.appearance, regions.geometry_raw, m.enc, m.cfg.geometry,
                      m.cfg.glu_enc(), m.cfg.dropout_attn, rng_);
        v_bar_ = mean_rows(x_r_);
    }

    DecodeState initial_state() const {
        DecodeState s;
        s.lstm = LstmState::zero(m_->cfg.d_h);
        s.cache = DecoderCache(m_->cfg.layers_dec);
        return s;
    }

    // consumes the previous token, advances the state, returns step logits
    Tensor step_logits(int input_token, DecodeState& state) const {
        const ModelConfig& cfg = m_->cfg;
        ++state.t;
        const Tensor w = reshape(embedding_lookup(m_->emb, {input_token}), {cfg.d_w});
        Tensor q_src;
        if (cfg.position == PositionMode::lstm) {
            const Tensor x = concat_last_dim(w, v_bar_);
            state.lstm = lstm_step(x, state.lstm, *m_->lstm);
            q_src = state.lstm.h;
            if (cfg.dropout_lstm > 0.0 && rng_) q_src = dropout(q_src, cfg.dropout_lstm, *rng_);
        } else {
            q_src = add(w, sinusoidal_encoding(state.t, cfg.d_w));
        }
        const Tensor q_dm = reshape(
            add_row_bias(matmul(reshape(q_src, {1, q_src.cols()}), m_->query_W), m_->query_b),
            {cfg.d_m});
        const Tensor f = decoder_step(q_dm, x_r_, m_->dec_layers,
                                      cfg.decoder_self_attention ? &state.cache : nullptr,
                                      cfg.glu_dec(), cfg.dropout_attn, rng_);
        return word_logits(f, m_->w_p, m_->b_p);
    }

    const Tensor& refined_regions() const { return x_r_; }
    const Tensor& pooled_regions() const { return v_bar_; }
    Rng* dropout_rng() const { return rng_; }

   private:
    const BoundModel* m_;
    Tensor x_r_;
    Tensor v_bar_;
    Rng* rng_;
};

// ---- teacher-forced loss ----

struct TrainItem {
    RegionSet regions;
    TokenSeq reference;  // content tokens, no BOS/EOS
};

struct BatchLoss {
    Tensor loss;              // scalar, mean over non-pad steps
    std::size_t steps = 0;    // scored steps
    std::size_t correct = 0;  // argmax hits (teacher-forced token accuracy)
};

namespace detail {

inline int argmax_token(const Tensor& logits) {
    int best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits[j] > logits[best]) best = static_cast<int>(j);
    return best;
}

}  // namespace detail

// Loss summed over the steps of one example; BOS-prefixed, EOS-suffixed,
// reference truncated to t_max content tokens. All steps run through the
// decoder stack as one batch: the position encodings are computed
// sequentially, after which every remaining op is row-wise (self-attention
// causally masked), so step t sees only the prefix.
inline BatchLoss example_xent(const TrainItem& item, const BoundModel& m, const ModelRun& run) {
    const ModelConfig& cfg = m.cfg;
    TokenSeq content = item.reference;
    if (content.size() > cfg.t_max) content.resize(cfg.t_max);
    for (int tok : content)
        if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab)
            throw ContractError("reference token " + std::to_string(tok) +
                                " outside vocabulary");
    TokenSeq inputs = {Vocabulary::kBos};
    inputs.insert(inputs.end(), content.begin(), content.end());
    TokenSeq targets = content;
    targets.push_back(Vocabulary::kEos);
    const std::size_t steps = targets.size();

    Tensor q_src;  // [steps x d_h] or [steps x d_w]
    if (cfg.position == PositionMode::lstm) {
        LstmState state = LstmState::zero(cfg.d_h);
        std::vector<Tensor> hs;
        hs.reserve(steps);
        for (std::size_t t = 0; t < steps; ++t) {
            const Tensor w = reshape(embedding_lookup(m.emb, {inputs[t]}), {cfg.d_w});
            state = lstm_step(concat_last_dim(w, run.pooled_regions()), state, *m.lstm);
            hs.push_back(state.h);
        }
        q_src = stack_rows(hs);
        if (cfg.dropout_lstm > 0.0 && run.dropout_rng())
            q_src = dropout(q_src, cfg.dropout_lstm, *run.dropout_rng());
    } else {
        std::vector<double> pe(steps * cfg.d_w);
        for (std::size_t t = 0; t < steps; ++t) {
            const Tensor row = sinusoidal_encoding(t + 1, cfg.d_w);
            std::copy_n(row.data().data(), cfg.d_w, pe.data() + t * cfg.d_w);
        }
        q_src = add(embedding_lookup(m.emb, inputs), Tensor::of({steps, cfg.d_w}, pe));
    }
    const Tensor queries = add_row_bias(matmul(q_src, m.query_W), m.query_b);
    const Tensor f_all =
        decoder_forward(queries, run.refined_regions(), m.dec_layers, cfg.glu_dec(),
                        cfg.dropout_attn, run.dropout_rng());
    const Tensor logits_all = add_row_bias(matmul_nt(f_all, m.w_p), m.b_p);

    BatchLoss out;
    for (std::size_t t = 0; t < steps; ++t) {
        int best = 0;
        for (std::size_t j = 1; j < cfg.vocab; ++j)
            if (logits_all.at(t, j) > logits_all.at(t, best)) best = static_cast<int>(j);
        if (best == targets[t]) ++out.correct;
    }
    out.loss = cross_entropy_rows_sum(logits_all, targets);
    out.steps = steps;
    return out;
}

inline BatchLoss forward_xent_bound(const std::vector<TrainItem>& batch, const BoundModel& m,
                                    Rng* dropout_rng = nullptr) {
    if (batch.empty()) throw ContractError("forward_xent: empty batch");
    BatchLoss agg;
    Tensor total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const ModelRun run(batch[i].regions, m, dropout_rng);
        const BatchLoss one = example_xent(batch[i], m, run);
        total = i == 0 ? one.loss : add(total, one.loss);
        agg.steps += one.steps;
        agg.correct += one.correct;
    }
    agg.loss = scale(total, 1.0 / static_cast<double>(agg.steps));
    return agg;
}

// dropout-free convenience wrapper used by tests and evaluation
inline double forward_xent(const std::vector<TrainItem>& batch, const ModelParams& params,
                           const ModelConfig& cfg) {
    const BoundModel m = bind(params, cfg, nullptr);
    return forward_xent_bound(batch, m).loss.item();
}

// ---- decoding ----

inline std::vector<double> log_softmax_values(const Tensor& logits) {
    double mx = logits[0];
    for (std::size_t j = 1; j < logits.size(); ++j) mx = std::max(mx, logits[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) se += std::exp(logits[j] - mx);
    const double lse = mx + std::log(se);
    std::vector<double> out(logits.size());
    for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] - lse;
    return out;
}

// argmax decoding; ties break toward the lowest token id
inline TokenSeq greedy_decode(const RegionSet& regions, const ModelParams& params,
                              const ModelConfig& cfg) {
    const BoundModel m = bind(params, cfg, nullptr);
    const ModelRun run(regions, m);
    DecodeState state = run.initial_state();
    TokenSeq tokens;
    int prev = Vocabulary::kBos;
    for (std::size_t t = 0; t < cfg.t_max; ++t) {
        const Tensor logits = run.step_logits(prev, state);
        const int tok = detail::argmax_token(logits);
        if (tok == Vocabulary::kEos) break;
        tokens.push_back(tok);
        prev = tok;
    }
    return tokens;
}

// Beam search over summed log-probabilities. Hypotheses that emit EOS move
// to a completed pool; the final pick maximizes total log-prob divided by
// emission count, ties broken by lexicographic token order.
inline TokenSeq beam_decode(const RegionSet& regions, const ModelParams& params,
                            const ModelConfig& cfg, std::size_t beam) {
    if (beam < 1) throw ContractError("beam_decode: beam must be >= 1");
    const BoundModel m = bind(params, cfg, nullptr);
    const ModelRun run(regions, m);

    struct Hyp {
        DecodeState state;
        TokenSeq tokens;
        double score = 0.0;
    };
    struct Done {
        TokenSeq tokens;
        double score = 0.0;
        std::size_t emissions = 0;
    };

    std::vector<Hyp> live;
    live.push_back({run.initial_state(), {}, 0.0});
    std::vector<Done> completed;

    for (std::size_t t = 0; t < cfg.t_max && !live.empty(); ++t) {
        struct Candidate {
            std::size_t parent;
            int token;
            double score;
            TokenSeq tokens;
        };
        std::vector<Candidate> candidates;
        std::vector<DecodeState> advanced(live.size());
        for (std::size_t i = 0; i < live.size(); ++i) {
            advanced[i] = live[i].state;
            const int prev = live[i].tokens.empty() ? Vocabulary::kBos : live[i].tokens.back();
            const Tensor logits = run.step_logits(prev, advanced[i]);
            const std::vector<double> logp = log_softmax_values(logits);
            for (std::size_t tok = 0; tok < logp.size(); ++tok) {
                Candidate c{i, static_cast<int>(tok), live[i].score + logp[tok],
                            live[i].tokens};
                c.tokens.push_back(static_cast<int>(tok));
                candidates.push_back(std::move(c));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Candidate& a, const Candidate& b) {
                             if (a.score != b.score) return a.score > b.score;
                             return a.tokens < b.tokens;
                         });
        if (candidates.size() > beam) candidates.resize(beam);

        std::vector<Hyp> next;
        for (const Candidate& c : candidates) {
            if (c.token == Vocabulary::kEos) {
                TokenSeq content = c.tokens;
                content.pop_back();
                completed.push_back({std::move(content), c.score, t + 1});
            } else {
                next.push_back({advanced[c.parent], c.tokens, c.score});
            }
        }
        live = std::move(next);
    }
    for (const Hyp& h : live) completed.push_back({h.tokens, h.score, cfg.t_max});

    const Done* best = nullptr;
    for (const Done& d : completed) {
        if (!best) {
            best = &d;
            continue;
        }
        const double a = d.score / static_cast<double>(d.emissions);
        const double b = best->score / static_cast<double>(best->emissions);
        if (a > b || (a == b && d.tokens < best->tokens)) best = &d;
    }
    return best ? best->tokens : TokenSeq{};
}

}  // namespace gat
