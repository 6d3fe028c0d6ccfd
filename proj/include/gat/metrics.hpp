#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gat/errors.hpp"

namespace gat {

using TokenSeq = std::vector<int>;

// n-gram (as token-id tuple) -> occurrence count
using NGramCounts = std::map<std::vector<int>, std::size_t>;

inline NGramCounts count_ngrams(const TokenSeq& toks, std::size_t n) {
    NGramCounts counts;
    if (toks.size() < n) return counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        ++counts[std::vector<int>(toks.begin() + i, toks.begin() + i + n)];
    }
    return counts;
}

struct CorpusScore {
    std::string metric;
    double corpus = 0.0;
    std::vector<double> per_instance;
};

namespace detail {

inline void check_pairs(const std::vector<TokenSeq>& cands,
                        const std::vector<std::vector<TokenSeq>>& refs) {
    if (cands.size() != refs.size())
        throw ContractError("metrics: candidate/reference count mismatch");
    if (cands.empty()) throw ContractError("metrics: empty corpus");
    for (const auto& r : refs)
        if (r.empty()) throw ContractError("metrics: instance without references");
}

// closest reference length; ties broken toward the shorter reference
inline std::size_t closest_ref_len(std::size_t cand_len, const std::vector<TokenSeq>& refs) {
    std::size_t best = refs[0].size();
    for (const TokenSeq& r : refs) {
        const auto diff = [cand_len](std::size_t l) {
            return l > cand_len ? l - cand_len : cand_len - l;
        };
        if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best))
            best = r.size();
    }
    return best;
}

inline double bleu_from_counts(const std::vector<std::size_t>& clipped,
                               const std::vector<std::size_t>& total, std::size_t c_len,
                               std::size_t r_len, std::size_t n) {
    double log_p = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        if (clipped[k] == 0 || total[k] == 0) return 0.0;
        log_p += std::log(static_cast<double>(clipped[k]) / static_cast<double>(total[k]));
    }
    if (c_len == 0) return 0.0;
    const double bp =
        c_len >= r_len ? 1.0
                       : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
    return bp * std::exp(log_p / static_cast<double>(n));
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    const std::size_t m = a.size(), n = b.size();
    std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

}  // namespace detail

// Corpus BLEU-n: geometric mean of clipped modified n-gram precisions
// pooled over the corpus, times the brevity penalty. No smoothing: a zero
// precision at any order zeroes the score. Per-instance values are
// sentence-level BLEU of each pair on its own.
inline CorpusScore bleu(const std::vector<TokenSeq>& cands,
                        const std::vector<std::vector<TokenSeq>>& refs, std::size_t n) {
    detail::check_pairs(cands, refs);
    if (n < 1 || n > 4) throw ContractError("bleu: order must be 1..4");

    CorpusScore score;
    score.metric = "BLEU-" + std::to_string(n);
    std::vector<std::size_t> clipped(n + 1, 0), total(n + 1, 0);
    std::size_t c_len = 0, r_len = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        std::vector<std::size_t> inst_clipped(n + 1, 0), inst_total(n + 1, 0);
        const std::size_t inst_r = detail::closest_ref_len(cands[i].size(), refs[i]);
        for (std::size_t k = 1; k <= n; ++k) {
            const NGramCounts cg = count_ngrams(cands[i], k);
            NGramCounts max_ref;
            for (const TokenSeq& r : refs[i]) {
                for (const auto& [gram, cnt] : count_ngrams(r, k)) {
                    max_ref[gram] = std::max(max_ref[gram], cnt);
                }
            }
            for (const auto& [gram, cnt] : cg) {
                inst_total[k] += cnt;
                const auto it = max_ref.find(gram);
                if (it != max_ref.end()) inst_clipped[k] += std::min(cnt, it->second);
            }
            clipped[k] += inst_clipped[k];
            total[k] += inst_total[k];
        }
        c_len += cands[i].size();
        r_len += inst_r;
        score.per_instance.push_back(
            detail::bleu_from_counts(inst_clipped, inst_total, cands[i].size(), inst_r, n));
    }
    score.corpus = detail::bleu_from_counts(clipped, total, c_len, r_len, n);
    return score;
}

// ROUGE-L: per-instance LCS F-measure with beta^2 = 1.44, max over
// references; corpus value is the mean.
inline CorpusScore rouge_l(const std::vector<TokenSeq>& cands,
                           const std::vector<std::vector<TokenSeq>>& refs) {
    detail::check_pairs(cands, refs);
    constexpr double kBeta2 = 1.2 * 1.2;
    CorpusScore score;
    score.metric = "ROUGE-L";
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double best = 0.0;
        for (const TokenSeq& r : refs[i]) {
            const std::size_t lcs = detail::lcs_length(cands[i], r);
            if (lcs == 0 || cands[i].empty() || r.empty()) continue;
            const double p = static_cast<double>(lcs) / static_cast<double>(cands[i].size());
            const double rec = static_cast<double>(lcs) / static_cast<double>(r.size());
            best = std::max(best, (1.0 + kBeta2) * rec * p / (rec + kBeta2 * p));
        }
        score.per_instance.push_back(best);
        score.corpus += best;
    }
    score.corpus /= static_cast<double>(cands.size());
    return score;
}

// CIDEr: per order, TF(count) x IDF vectors with
// IDF = log(corpus_size / #instances whose references contain the gram);
// cosine against each reference times a Gaussian length penalty, averaged
// over references; mean over orders, scaled by 10. Grams absent from
// every reference set carry zero weight. Corpus value is the mean.
inline CorpusScore cider(const std::vector<TokenSeq>& cands,
                         const std::vector<std::vector<TokenSeq>>& refs, std::size_t n_max = 4,
                         double sigma = 6.0) {
    detail::check_pairs(cands, refs);
    if (cands.size() < 2) throw ContractError("cider: corpus must have >= 2 instances");

    const std::size_t m = cands.size();
    std::vector<std::map<std::vector<int>, std::size_t>> df(n_max + 1);
    for (const auto& ref_set : refs) {
        for (std::size_t k = 1; k <= n_max; ++k) {
            std::set<std::vector<int>> seen;
            for (const TokenSeq& r : ref_set) {
                for (const auto& [gram, cnt] : count_ngrams(r, k)) seen.insert(gram);
            }
            for (const auto& gram : seen) ++df[k][gram];
        }
    }
    const auto idf = [&](std::size_t k, const std::vector<int>& gram) {
        const auto it = df[k].find(gram);
        if (it == df[k].end()) return 0.0;
        return std::log(static_cast<double>(m) / static_cast<double>(it->second));
    };
    const auto tfidf_vec = [&](std::size_t k, const TokenSeq& toks) {
        std::map<std::vector<int>, double> vec;
        for (const auto& [gram, cnt] : count_ngrams(toks, k)) {
            const double w = static_cast<double>(cnt) * idf(k, gram);
            if (w != 0.0) vec[gram] = w;
        }
        return vec;
    };
    const auto norm = [](const std::map<std::vector<int>, double>& v) {
        double s = 0.0;
        for (const auto& [gram, w] : v) s += w * w;
        return std::sqrt(s);
    };

    CorpusScore score;
    score.metric = "CIDEr";
    for (std::size_t i = 0; i < m; ++i) {
        double order_sum = 0.0;
        for (std::size_t k = 1; k <= n_max; ++k) {
            const auto cvec = tfidf_vec(k, cands[i]);
            const double cnorm = norm(cvec);
            double sim_sum = 0.0;
            for (const TokenSeq& r : refs[i]) {
                const auto rvec = tfidf_vec(k, r);
                const double rnorm = norm(rvec);
                double cos = 0.0;
                if (cnorm > 0.0 && rnorm > 0.0) {
                    double dot = 0.0;
                    for (const auto& [gram, w] : cvec) {
                        const auto it = rvec.find(gram);
                        if (it != rvec.end()) dot += w * it->second;
                    }
                    cos = dot / (cnorm * rnorm);
                }
                const double dl =
                    static_cast<double>(cands[i].size()) - static_cast<double>(r.size());
                sim_sum += cos * std::exp(-dl * dl / (2.0 * sigma * sigma));
            }
            order_sum += sim_sum / static_cast<double>(refs[i].size());
        }
        const double inst = 10.0 * order_sum / static_cast<double>(n_max);
        score.per_instance.push_back(inst);
        score.corpus += inst;
    }
    score.corpus /= static_cast<double>(m);
    return score;
}

}  // namespace gat
