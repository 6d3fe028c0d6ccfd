#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "gat/model.hpp"

namespace gat {

struct TrainConfig {
    std::size_t epochs = 12;
    std::size_t batch_size = 16;
    double lr0 = 5e-4;
    double lr_decay = 0.8;
    std::size_t decay_every = 3;  // epochs per decay step
    double clip_norm = 5.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t threads = 0;  // 0: GAT_THREADS env, else hardware count
};

// epoch is 1-based; epochs 1..3 run at lr0, 4..6 at lr0*decay, ...
inline double lr_for_epoch(const TrainConfig& tc, std::size_t epoch) {
    return tc.lr0 * std::pow(tc.lr_decay, static_cast<double>((epoch - 1) / tc.decay_every));
}

inline std::size_t worker_count(std::size_t configured, std::size_t jobs) {
    std::size_t n = configured;
    if (n == 0) {
        if (const char* env = std::getenv("GAT_THREADS")) {
            const long v = std::strtol(env, nullptr, 10);
            if (v > 0) n = static_cast<std::size_t>(v);
        }
    }
    if (n == 0) n = std::max<unsigned>(1, std::thread::hardware_concurrency());
    return std::min(n, std::max<std::size_t>(1, jobs));
}

struct EpochStats {
    double mean_loss = 0.0;
    double token_accuracy = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    std::uint64_t seed = 0;
    double total_seconds = 0.0;
};

struct TrainOutcome {
    ModelParams params;
    TrainReport report;
};

class Adam {
   public:
    Adam(const TrainConfig& tc) : tc_(tc) {}

    void step(ModelParams& params, const std::map<std::string, std::vector<double>>& grads,
              double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(tc_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(tc_.beta2, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            const Tensor& p = params.at(name);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(g.size(), 0.0);
                v.assign(g.size(), 0.0);
            }
            std::vector<double> next(p.vec());
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = tc_.beta1 * m[i] + (1.0 - tc_.beta1) * g[i];
                v[i] = tc_.beta2 * v[i] + (1.0 - tc_.beta2) * g[i] * g[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                next[i] -= lr * mh / (std::sqrt(vh) + tc_.eps);
            }
            params.set(name, Tensor::of(p.shape(), std::move(next)));
        }
    }

   private:
    TrainConfig tc_;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

namespace detail {

struct ItemGrads {
    double loss_sum = 0.0;
    std::size_t steps = 0;
    std::size_t correct = 0;
    std::map<std::string, std::vector<double>> grads;
};

// forward+backward for one example on its own tape
inline ItemGrads example_grads(const TrainItem& item, const ModelParams& params,
                               const ModelConfig& cfg, std::uint64_t dropout_seed) {
    Tape tape;
    ModelParams watched;
    for (const auto& [name, t] : params.map()) watched.insert_raw(name, tape.watch(t));
    const BoundModel m = bind(watched, cfg, nullptr);
    Rng dropout_rng(dropout_seed);
    Rng* rng = cfg.dropout_lstm > 0.0 || cfg.dropout_attn > 0.0 ? &dropout_rng : nullptr;
    const ModelRun run(item.regions, m, rng);
    const BatchLoss one = example_xent(item, m, run);
    const GradMap gm = tape.backward(one.loss);

    ItemGrads out;
    out.loss_sum = one.loss.item();
    out.steps = one.steps;
    out.correct = one.correct;
    for (const auto& [name, t] : watched.map()) {
        const std::vector<double>* g = gm.of(t);
        if (g) out.grads.emplace(name, *g);
    }
    return out;
}

}  // namespace detail

// Gradients for the mean teacher-forced loss over the batch. Examples run
// on separate tapes (possibly in parallel) and are reduced in index order,
// so the result does not depend on the worker count.
inline detail::ItemGrads batch_grads(const std::vector<TrainItem>& batch,
                                     const ModelParams& params, const ModelConfig& cfg,
                                     std::uint64_t dropout_seed, std::size_t threads) {
    std::vector<detail::ItemGrads> results(batch.size());
    const std::size_t workers = worker_count(threads, batch.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < batch.size(); ++i)
            results[i] =
                detail::example_grads(batch[i], params, cfg, Rng::derive(dropout_seed, i));
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (;;) {
                        const std::size_t i = next.fetch_add(1);
                        if (i >= batch.size()) break;
                        results[i] = detail::example_grads(batch[i], params, cfg,
                                                           Rng::derive(dropout_seed, i));
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    detail::ItemGrads total;
    for (const auto& r : results) {
        total.loss_sum += r.loss_sum;
        total.steps += r.steps;
        total.correct += r.correct;
        for (const auto& [name, g] : r.grads) {
            auto& acc = total.grads[name];
            if (acc.empty()) acc.assign(g.size(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(total.steps);
    for (auto& [name, g] : total.grads)
        for (double& v : g) v *= inv;
    total.loss_sum *= inv;  // now the mean loss
    return total;
}

inline void clip_gradients(std::map<std::string, std::vector<double>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const double s = max_norm / norm;
    for (auto& [name, g] : grads)
        for (double& v : g) v *= s;
}

// Adam with the stepped learning-rate schedule and global-norm clipping.
// Deterministic given the config seed: initialization, shuffling and
// dropout all derive from it.
inline TrainOutcome train(const std::vector<TrainItem>& dataset, const ModelConfig& cfg,
                          const TrainConfig& tc) {
    if (dataset.empty()) throw ContractError("train: empty dataset");
    const auto t_start = std::chrono::steady_clock::now();
    TrainOutcome out;
    out.params = ModelParams::init(cfg);
    out.report.seed = cfg.seed;
    Adam adam(tc);

    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        const auto e_start = std::chrono::steady_clock::now();
        Rng shuffle_rng(Rng::derive(cfg.seed, 0x50000000ULL + epoch));
        shuffle_rng.shuffle(order);
        const double lr = lr_for_epoch(tc, epoch);

        double loss_weighted = 0.0;
        std::size_t steps_total = 0, correct_total = 0, batch_index = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += tc.batch_size) {
            const std::size_t end = std::min(order.size(), begin + tc.batch_size);
            std::vector<TrainItem> batch;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i) batch.push_back(dataset[order[i]]);

            const std::uint64_t drop_seed =
                Rng::derive(cfg.seed, 0xd0000000ULL + epoch * 100000 + batch_index);
            detail::ItemGrads g = batch_grads(batch, out.params, cfg, drop_seed, tc.threads);
            if (!std::isfinite(g.loss_sum)) {
                for (const auto& [name, t] : out.params.map())
                    if (!all_finite(t))
                        throw NumericError("training diverged: first non-finite parameter " +
                                           name);
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch));
            }
            clip_gradients(g.grads, tc.clip_norm);
            adam.step(out.params, g.grads, lr);

            loss_weighted += g.loss_sum * static_cast<double>(g.steps);
            steps_total += g.steps;
            correct_total += g.correct;
            ++batch_index;
        }
        EpochStats es;
        es.mean_loss = loss_weighted / static_cast<double>(steps_total);
        es.token_accuracy =
            static_cast<double>(correct_total) / static_cast<double>(steps_total);
        es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start)
                         .count();
        out.report.epochs.push_back(es);
    }
    out.report.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return out;
}

}  // namespace gat
