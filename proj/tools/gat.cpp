// Command-line interface: dataset generation, training, evaluation,
// captioning, the ablation harness and the gradient-check suite.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gat/ablation.hpp"
#include "gat/checkpoint.hpp"
#include "gat/eval.hpp"
#include "gat/gradcheck_suite.hpp"
#include "gat/model.hpp"
#include "gat/scenes.hpp"
#include "gat/train.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitArtifact = 4;

struct ModelFlags {
    gat::ModelConfig cfg;
    std::string geometry = "concat";
    std::string position = "lstm";
    std::string glu = "enc";

    void add_options(CLI::App* cmd) {
        cmd->add_option("--d-m", cfg.d_m, "model width");
        cmd->add_option("--d-h", cfg.d_h, "LSTM hidden width");
        cmd->add_option("--d-w", cfg.d_w, "word embedding width");
        cmd->add_option("--heads", cfg.heads, "attention heads");
        cmd->add_option("--layers-enc", cfg.layers_enc, "encoder layers");
        cmd->add_option("--layers-dec", cfg.layers_dec, "decoder layers");
        cmd->add_option("--d-ff", cfg.d_ff, "feed-forward width");
        cmd->add_option("--t-max", cfg.t_max, "caption length cap");
        cmd->add_option("--mode-geometry", geometry, "off|concat|add")
            ->check(CLI::IsMember({"off", "concat", "add"}));
        cmd->add_option("--mode-position", position, "sinusoidal|lstm")
            ->check(CLI::IsMember({"sinusoidal", "lstm"}));
        cmd->add_option("--glu", glu, "none|enc|enc_dec")
            ->check(CLI::IsMember({"none", "enc", "enc_dec"}));
        cmd->add_flag("--self-attention", cfg.decoder_self_attention,
                      "enable the decoder masked self-attention sub-layer");
        cmd->add_option("--dropout-lstm", cfg.dropout_lstm, "LSTM output dropout rate");
        cmd->add_option("--dropout-attn", cfg.dropout_attn, "attention dropout rate");
        cmd->add_option("--seed", cfg.seed, "random seed");
    }

    gat::ModelConfig resolve() const {
        gat::ModelConfig c = cfg;
        c.geometry = geometry == "off"      ? gat::GeometryMode::off
                     : geometry == "concat" ? gat::GeometryMode::concat
                                            : gat::GeometryMode::add;
        c.position =
            position == "lstm" ? gat::PositionMode::lstm : gat::PositionMode::sinusoidal;
        c.glu = glu == "none"  ? gat::GluPlacement::none
                : glu == "enc" ? gat::GluPlacement::enc
                               : gat::GluPlacement::enc_dec;
        return c;
    }
};

struct TrainFlags {
    gat::TrainConfig tc;

    void add_options(CLI::App* cmd) {
        cmd->add_option("--epochs", tc.epochs, "training epochs");
        cmd->add_option("--batch", tc.batch_size, "batch size");
        cmd->add_option("--lr", tc.lr0, "initial learning rate");
        cmd->add_option("--lr-decay", tc.lr_decay, "decay factor");
        cmd->add_option("--decay-every", tc.decay_every, "epochs per decay step");
        cmd->add_option("--clip", tc.clip_norm, "gradient norm clip");
        cmd->add_option("--threads", tc.threads, "worker threads (0 = GAT_THREADS/auto)");
    }
};

json score_to_json(const gat::CorpusScore& s) {
    return {{"corpus", s.corpus}, {"per_instance", s.per_instance}};
}

json report_to_json(const gat::EvalReport& rep) {
    json metrics;
    for (const auto& s : rep.scores) metrics[s.metric] = score_to_json(s);
    return {{"scenes", rep.scenes},
            {"beam", rep.beam},
            {"metrics", metrics},
            {"spatial_accuracy", rep.spatial}};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw gat::IoError("cannot write " + path);
    out << text;
    if (!out) throw gat::IoError("write failed for " + path);
}

void print_eval_table(const gat::EvalReport& rep) {
    std::cout << std::fixed << std::setprecision(4);
    std::cout << "| metric | corpus |\n|---|---|\n";
    for (const auto& s : rep.scores) std::cout << "| " << s.metric << " | " << s.corpus
                                               << " |\n";
    std::cout << "| spatial_accuracy | " << rep.spatial << " |\n";
    std::cout << "(" << rep.scenes << " scenes, beam " << rep.beam << ")\n";
}

int cmd_gen(const gat::GenParams& gp, const std::string& out_path) {
    const auto scenes = gat::generate(gp);
    gat::write_jsonl(out_path, scenes);
    std::vector<gat::CaptionPair> pairs;
    for (const auto& s : scenes) pairs.push_back(s.pair);
    const gat::Vocabulary vocab = gat::Vocabulary::from_pairs(pairs);
    std::cout << "wrote " << scenes.size() << " scenes to " << out_path << " (vocabulary "
              << vocab.size() << " tokens, feature dim " << gp.feature_dim << ")\n";
    return kExitOk;
}

int cmd_train(const std::string& data_path, const std::string& ckpt_path, ModelFlags& mf,
              const TrainFlags& tf) {
    const auto pairs = gat::read_jsonl(data_path);
    const gat::Vocabulary vocab = gat::Vocabulary::from_pairs(pairs);
    gat::ModelConfig cfg = mf.resolve();
    cfg.d = pairs[0].regions.appearance.cols();
    cfg.vocab = vocab.size();
    cfg.validate();

    std::vector<gat::TrainItem> items;
    for (const auto& p : pairs)
        for (const auto& ref : p.refs) items.push_back({p.regions, vocab.encode(ref)});
    std::cout << "training on " << items.size() << " (scene, reference) pairs from "
              << pairs.size() << " scenes\n";

    const gat::TrainOutcome out = gat::train(items, cfg, tf.tc);
    for (std::size_t e = 0; e < out.report.epochs.size(); ++e) {
        const auto& es = out.report.epochs[e];
        std::cout << "epoch " << std::setw(3) << e + 1 << "  loss " << std::fixed
                  << std::setprecision(4) << es.mean_loss << "  acc " << es.token_accuracy
                  << "  lr " << std::setprecision(6) << gat::lr_for_epoch(tf.tc, e + 1)
                  << "\n";
    }
    gat::save_checkpoint(out.params, cfg, vocab, ckpt_path);

    json report = {{"seed", out.report.seed},
                   {"total_seconds", out.report.total_seconds},
                   {"epochs", json::array()}};
    for (const auto& es : out.report.epochs)
        report["epochs"].push_back({{"mean_loss", es.mean_loss},
                                    {"token_accuracy", es.token_accuracy},
                                    {"seconds", es.seconds}});
    const std::string report_path = ckpt_path + ".report.json";
    write_text(report_path, report.dump(2) + "\n");
    std::cout << "checkpoint written to " << ckpt_path << ", report to " << report_path
              << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& data_path, const std::string& ckpt_path, std::size_t beam,
             const std::string& json_path, std::size_t threads) {
    const gat::Checkpoint ck = gat::load_checkpoint(ckpt_path);
    const auto pairs = gat::read_jsonl(data_path);
    gat::check_vocab_coverage(pairs, ck.vocab);
    const auto predictions = gat::decode_all(pairs, ck.params, ck.cfg, beam, threads);
    const gat::EvalReport rep = gat::evaluate(pairs, predictions, ck.vocab, beam);
    print_eval_table(rep);
    if (!json_path.empty()) write_text(json_path, report_to_json(rep).dump(2) + "\n");
    return kExitOk;
}

int cmd_caption(const std::string& data_path, const std::string& ckpt_path, std::size_t beam,
                std::size_t limit) {
    const gat::Checkpoint ck = gat::load_checkpoint(ckpt_path);
    const auto pairs = gat::read_jsonl(data_path);
    gat::check_vocab_coverage(pairs, ck.vocab);
    const std::size_t n = limit == 0 ? pairs.size() : std::min(limit, pairs.size());
    for (std::size_t i = 0; i < n; ++i) {
        const gat::TokenSeq toks = gat::beam_decode(pairs[i].regions, ck.params, ck.cfg, beam);
        std::cout << "scene " << i << "\n  caption:";
        for (const auto& w : ck.vocab.decode(toks)) std::cout << " " << w;
        std::cout << "\n  reference:";
        for (const auto& w : pairs[i].refs[0]) std::cout << " " << w;
        std::cout << "\n";
    }
    return kExitOk;
}

int cmd_ablate(const std::string& train_path, const std::string& test_path,
               std::size_t n_seeds, ModelFlags& mf, const TrainFlags& tf, std::size_t beam,
               bool table1_only, const std::string& md_path, const std::string& json_path) {
    const auto train_pairs = gat::read_jsonl(train_path);
    const auto test_pairs = gat::read_jsonl(test_path);
    const gat::Vocabulary vocab = gat::Vocabulary::from_pairs(train_pairs);

    gat::AblationSettings settings;
    settings.model = mf.resolve();
    settings.model.d = train_pairs[0].regions.appearance.cols();
    settings.model.vocab = vocab.size();
    settings.train = tf.tc;
    settings.beam = beam;
    settings.include_strategy_rows = !table1_only;
    settings.seeds.clear();
    for (std::size_t s = 1; s <= n_seeds; ++s) settings.seeds.push_back(s);

    const gat::AblationTable table =
        gat::run_ablation(train_pairs, test_pairs, vocab, settings, &std::cout);
    const std::string md = gat::format_ablation_markdown(table);
    std::cout << "\n" << md;
    std::cout << std::fixed << std::setprecision(1) << "total " << table.seconds << "s\n";
    if (!md_path.empty()) write_text(md_path, md);
    if (!json_path.empty()) {
        json rows = json::array();
        for (const auto& r : table.rows)
            rows.push_back({{"name", r.name},
                            {"spatial_accuracy", r.spatial},
                            {"bleu4", r.bleu4},
                            {"cider", r.cider}});
        write_text(json_path,
                   json{{"seeds", table.seeds}, {"rows", rows}, {"seconds", table.seconds}}
                           .dump(2) +
                       "\n");
    }
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& corrupt) {
    const gat::SuiteOutcome outcome = gat::run_gradcheck_suite(seed, corrupt);
    for (const auto& r : outcome.results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(24) << r.name
                  << " max rel err " << std::scientific << std::setprecision(3)
                  << r.max_rel_err << std::defaultfloat;
        if (!r.pass) std::cout << "  worst: " << r.worst;
        std::cout << "\n";
    }
    std::cout << outcome.results.size() << " checks in " << std::fixed
              << std::setprecision(1) << outcome.seconds << "s\n";
    return outcome.all_pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Geometry-attention captioner: synthetic scenes, training, evaluation"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset");
    gat::GenParams gp;
    std::string gen_out;
    gen->add_option("--seed", gp.seed, "dataset seed");
    gen->add_option("--scenes", gp.n_scenes, "number of scenes")
        ->check(CLI::PositiveNumber)
        ->required();
    gen->add_option("--out", gen_out, "output JSONL path")->required();
    gen->add_option("--objects-min", gp.min_objects, "minimum objects per scene");
    gen->add_option("--objects-max", gp.max_objects, "maximum objects per scene");
    gen->add_option("--dim", gp.feature_dim, "appearance feature width");
    gen->add_option("--noise", gp.noise_sigma, "appearance noise sigma");

    // train
    auto* tr = app.add_subcommand("train", "train a model on a dataset");
    std::string train_data, train_ckpt;
    ModelFlags train_mf;
    TrainFlags train_tf;
    tr->add_option("--data", train_data, "training dataset (JSONL)")->required();
    tr->add_option("--out-ckpt", train_ckpt, "checkpoint output path")->required();
    tr->set_config("--config", "", "key=value config file; flags override");
    train_mf.add_options(tr);
    train_tf.add_options(tr);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_data, eval_ckpt, eval_json;
    std::size_t eval_beam = 5, eval_threads = 0;
    ev->add_option("--data", eval_data, "dataset (JSONL)")->required();
    ev->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    ev->add_option("--beam", eval_beam, "beam width")->check(CLI::PositiveNumber);
    ev->add_option("--out-json", eval_json, "write the report as JSON");
    ev->add_option("--threads", eval_threads, "worker threads");

    // caption
    auto* cap = app.add_subcommand("caption", "print captions for scenes");
    std::string cap_data, cap_ckpt;
    std::size_t cap_beam = 5, cap_limit = 5;
    cap->add_option("--data", cap_data, "dataset (JSONL)")->required();
    cap->add_option("--ckpt", cap_ckpt, "checkpoint path")->required();
    cap->add_option("--beam", cap_beam, "beam width")->check(CLI::PositiveNumber);
    cap->add_option("--limit", cap_limit, "scenes to caption (0 = all)");

    // ablate
    auto* ab = app.add_subcommand("ablate", "train and score the ablation variants");
    std::string ab_train, ab_test, ab_md, ab_json;
    std::size_t ab_seeds = 3, ab_beam = 5;
    bool ab_table1 = false;
    ModelFlags ab_mf;
    TrainFlags ab_tf;
    ab->add_option("--data", ab_train, "training dataset (JSONL)")->required();
    ab->add_option("--test", ab_test, "held-out dataset (JSONL)")->required();
    ab->add_option("--seeds", ab_seeds, "number of seeds")->check(CLI::PositiveNumber);
    ab->add_option("--beam", ab_beam, "beam width for scoring");
    ab->add_flag("--table1-only", ab_table1, "skip the combination-strategy rows");
    ab->add_option("--out", ab_md, "write the markdown table here");
    ab->add_option("--json", ab_json, "write results as JSON");
    ab_mf.add_options(ab);
    ab_tf.add_options(ab);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    std::uint64_t gc_seed = 1;
    std::string gc_corrupt;
    gc->add_option("--seed", gc_seed, "suite seed");
    gc->add_option("--corrupt", gc_corrupt, "perturb the named check (harness self-test)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) return cmd_gen(gp, gen_out);
        if (*tr) return cmd_train(train_data, train_ckpt, train_mf, train_tf);
        if (*ev) return cmd_eval(eval_data, eval_ckpt, eval_beam, eval_json, eval_threads);
        if (*cap) return cmd_caption(cap_data, cap_ckpt, cap_beam, cap_limit);
        if (*ab)
            return cmd_ablate(ab_train, ab_test, ab_seeds, ab_mf, ab_tf, ab_beam, ab_table1,
                              ab_md, ab_json);
        if (*gc) return cmd_gradcheck(gc_seed, gc_corrupt);
    } catch (const gat::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const gat::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const gat::ArtifactMismatchError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return kExitArtifact;
    } catch (const gat::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}
