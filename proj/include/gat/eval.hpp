#pragma once

#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include "gat/checkpoint.hpp"
#include "gat/metrics.hpp"
#include "gat/model.hpp"
#include "gat/train.hpp"

namespace gat {

// every reference token must exist in the model's vocabulary
inline void check_vocab_coverage(const std::vector<CaptionPair>& pairs,
                                 const Vocabulary& vocab) {
    for (const auto& p : pairs)
        for (const auto& ref : p.refs)
            for (const auto& w : ref)
                if (vocab.id(w) == Vocabulary::kUnk && w != vocab.token(Vocabulary::kUnk))
                    throw ArtifactMismatchError(
                        "dataset token '" + w + "' is not in the checkpoint vocabulary");
}

// beam-decode every scene; parallel across scenes, results in scene order
inline std::vector<TokenSeq> decode_all(const std::vector<CaptionPair>& pairs,
                                        const ModelParams& params, const ModelConfig& cfg,
                                        std::size_t beam, std::size_t threads = 0) {
    std::vector<TokenSeq> out(pairs.size());
    const std::size_t workers = worker_count(threads, pairs.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < pairs.size(); ++i)
            out[i] = beam_decode(pairs[i].regions, params, cfg, beam);
        return out;
    }
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= pairs.size()) break;
                    out[i] = beam_decode(pairs[i].regions, params, cfg, beam);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

struct EvalReport {
    std::size_t scenes = 0;
    std::size_t beam = 0;
    std::vector<CorpusScore> scores;  // BLEU-1..4, ROUGE-L, CIDEr
    double spatial = 0.0;
};

inline EvalReport evaluate(const std::vector<CaptionPair>& pairs,
                           const std::vector<TokenSeq>& predictions, const Vocabulary& vocab,
                           std::size_t beam) {
    if (pairs.size() != predictions.size())
        throw ContractError("evaluate: prediction count mismatch");
    std::vector<std::vector<TokenSeq>> ref_ids;
    std::vector<std::vector<std::vector<std::string>>> ref_words;
    std::vector<std::vector<std::string>> pred_words;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::vector<TokenSeq> ids;
        for (const auto& r : pairs[i].refs) ids.push_back(vocab.encode(r));
        ref_ids.push_back(std::move(ids));
        ref_words.push_back(pairs[i].refs);
        pred_words.push_back(vocab.decode(predictions[i]));
    }
    EvalReport rep;
    rep.scenes = pairs.size();
    rep.beam = beam;
    for (std::size_t n = 1; n <= 4; ++n) rep.scores.push_back(bleu(predictions, ref_ids, n));
    rep.scores.push_back(rouge_l(predictions, ref_ids));
    rep.scores.push_back(cider(predictions, ref_ids));
    rep.spatial = spatial_accuracy(pred_words, ref_words);
    return rep;
}

}  // namespace gat
