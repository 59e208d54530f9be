#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bicat/config.hpp"
#include "bicat/eval.hpp"
#include "bicat/markov.hpp"
#include "bicat/sha1.hpp"

namespace bicat {

namespace fsys = std::filesystem;

namespace detail {

inline std::string read_file_bytes(const fsys::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
    return buf.str();
}

/// Durable write: temp file in the same directory, then rename.
inline void atomic_write_file(const fsys::path& path, const std::string& content) {
    fsys::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    const fsys::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IoError("write failure on '" + tmp.string() + "'");
    }
    fsys::rename(tmp, path);
}

inline std::string file_digest(const fsys::path& path) {
    return blob_digest(read_file_bytes(path));
}

inline void require_artifact(const fsys::path& path, const std::string& stage,
                             const std::string& producer) {
    if (!fsys::exists(path))
        throw StageOrderError(stage + ": missing prerequisite artifact '" + path.string() +
                              "' (run `" + producer + "` first)");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage manifests.
// ---------------------------------------------------------------------------

struct Manifest {
    std::string stage;
    int format_version = 1;
    std::string config_digest;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;
    std::vector<std::pair<std::string, std::string>> outputs;
};

inline nlohmann::ordered_json to_json(const Manifest& m) {
    nlohmann::ordered_json j;
    j["stage"] = m.stage;
    j["format_version"] = m.format_version;
    j["config_digest"] = m.config_digest;
    j["seed"] = m.seed;
    nlohmann::ordered_json in, out;
    for (const auto& [name, digest] : m.inputs) in[name] = digest;
    for (const auto& [name, digest] : m.outputs) out[name] = digest;
    j["inputs"] = in;
    j["outputs"] = out;
    return j;
}

namespace detail {

inline void write_manifest(const fsys::path& out_dir, const ExperimentConfig& cfg,
                           const std::string& stage,
                           const std::vector<fsys::path>& input_files,
                           const std::vector<fsys::path>& output_files) {
    Manifest m;
    m.stage = stage;
    m.config_digest = sha1_hex(cfg.serialize(/*include_out=*/false));
    m.seed = cfg.seed;
    for (const fsys::path& p : input_files)
        m.inputs.emplace_back(p.filename().string(), file_digest(p));
    for (const fsys::path& p : output_files)
        m.outputs.emplace_back(p.filename().string(), file_digest(p));
    atomic_write_file(out_dir / (stage + ".manifest.json"), to_json(m).dump(2) + "\n");
}

inline std::string loss_csv(const std::vector<EpochTrace>& trace, const char* header) {
    std::string out = header;
    out += "\n";
    for (std::size_t e = 0; e < trace.size(); ++e) {
        out += std::to_string(e) + "," + format_double(trace[e].loss_reverse) + "," +
               format_double(trace[e].loss_forward) + "," +
               format_double(trace[e].loss_total) + "\n";
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline stages.  Each consumes the previous stage's files from the output
// directory and adds its own, plus a manifest of content digests.
// ---------------------------------------------------------------------------

struct PrepareSummary {
    std::size_t interactions = 0;
    std::size_t malformed = 0;
    std::size_t users = 0;
    std::size_t items = 0;
    std::map<std::size_t, std::size_t> length_histogram;
};

inline PrepareSummary cmd_prepare(const ExperimentConfig& cfg,
                                  std::ostream& log = std::cout) {
    cfg.validate();
    if (cfg.data_input.empty()) throw ConfigError("prepare: data.input is not set");
    const fsys::path out_dir(cfg.out_dir);
    std::ifstream in(cfg.data_input);
    if (!in) throw IoError("prepare: cannot open input '" + cfg.data_input + "'");
    const ColumnFormat fmt = ColumnFormat::from_spec(cfg.data_format, cfg.data_delimiter);
    ParseResult parsed = parse_interactions(in, fmt);
    CorpusData corpus = build_sequences(parsed.interactions, cfg.data_min_len);
    if (corpus.sequences.empty())
        throw DataError("prepare: empty corpus after min-length filtering");

    PrepareSummary summary;
    summary.interactions = parsed.interactions.size();
    summary.malformed = parsed.malformed;
    summary.users = corpus.sequences.size();
    summary.items = corpus.vocab.size();
    for (const UserSequence& s : corpus.sequences) ++summary.length_histogram[s.items.size()];

    std::ostringstream seqs, vocab, hist;
    write_sequences_file(seqs, corpus.sequences);
    write_vocab_file(vocab, corpus.vocab);
    hist << "length,count\n";
    for (const auto& [len, count] : summary.length_histogram)
        hist << len << ',' << count << '\n';

    detail::atomic_write_file(out_dir / "sequences.tsv", seqs.str());
    detail::atomic_write_file(out_dir / "vocab.tsv", vocab.str());
    detail::atomic_write_file(out_dir / "length_histogram.csv", hist.str());
    detail::write_manifest(out_dir, cfg, "prepare", {fsys::path(cfg.data_input)},
                           {out_dir / "sequences.tsv", out_dir / "vocab.tsv",
                            out_dir / "length_histogram.csv"});

    log << "prepare: " << summary.interactions << " interactions (" << summary.malformed
        << " malformed), " << summary.users << " users, " << summary.items << " items\n";
    return summary;
}

namespace detail {

struct LoadedCorpus {
    Vocab vocab;
    std::vector<UserSequence> sequences;
};

inline LoadedCorpus load_corpus(const fsys::path& out_dir, const std::string& stage) {
    require_artifact(out_dir / "sequences.tsv", stage, "prepare");
    require_artifact(out_dir / "vocab.tsv", stage, "prepare");
    LoadedCorpus c;
    std::ifstream seqs(out_dir / "sequences.tsv");
    c.sequences = read_sequences_file(seqs);
    std::ifstream vocab(out_dir / "vocab.tsv");
    c.vocab = read_vocab_file(vocab);
    return c;
}

inline std::vector<std::vector<int>> train_parts(const std::vector<UserSequence>& seqs) {
    std::vector<std::vector<int>> out;
    for (const UserSequence& s : seqs) {
        if (s.items.size() < 3) continue;
        out.push_back(leave_one_out(s).train);
    }
    return out;
}

}  // namespace detail

inline void cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
    cfg.validate();
    const fsys::path out_dir(cfg.out_dir);
    detail::LoadedCorpus corpus = detail::load_corpus(out_dir, "pretrain");

    PretrainConfig pt = cfg.pretrain;
    pt.seed = stage_seed(cfg.seed, "pretrain");
    ModelParams params =
        ModelParams::init(cfg.encoder, corpus.vocab.size(), stage_seed(cfg.seed, "init"));

    std::vector<fsys::path> outputs;
    TrainCallbacks callbacks;
    if (pt.checkpoint_every > 0) {
        callbacks.on_epoch = [&](std::size_t epoch, const EpochTrace&) {
            if ((epoch + 1) % pt.checkpoint_every != 0) return;
            const fsys::path path =
                out_dir / ("pretrain_epoch" + std::to_string(epoch + 1) + ".ckpt");
            std::ostringstream buf;
            save_checkpoint(buf, cfg.encoder, params);
            detail::atomic_write_file(path, buf.str());
            outputs.push_back(path);
        };
    }
    std::vector<EpochTrace> trace =
        run_pretrain(detail::train_parts(corpus.sequences), params, cfg.encoder, pt,
                     callbacks);

    std::ostringstream ckpt;
    save_checkpoint(ckpt, cfg.encoder, params);
    detail::atomic_write_file(out_dir / "pretrain.ckpt", ckpt.str());
    detail::atomic_write_file(out_dir / "pretrain_loss.csv",
                              detail::loss_csv(trace, "epoch,loss_reverse,loss_forward,loss_total"));
    outputs.insert(outputs.begin(),
                   {out_dir / "pretrain.ckpt", out_dir / "pretrain_loss.csv"});
    detail::write_manifest(out_dir, cfg, "pretrain",
                           {out_dir / "sequences.tsv", out_dir / "vocab.tsv"}, outputs);
    if (!trace.empty())
        log << "pretrain: " << trace.size() << " epochs, final loss "
            << detail::format_double(trace.back().loss_total) << "\n";
}

inline void cmd_augment(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
    cfg.validate();
    const fsys::path out_dir(cfg.out_dir);
    detail::LoadedCorpus corpus = detail::load_corpus(out_dir, "augment");

    // The augment stage works on the training portion of each sequence.
    std::vector<UserSequence> trains;
    for (const UserSequence& s : corpus.sequences) {
        if (s.items.size() < 3) continue;
        trains.push_back({s.user, leave_one_out(s).train});
    }

    AugmentConfig ac = cfg.augment;
    ac.seed = stage_seed(cfg.seed, "augment");
    AugmentedCorpus augmented;
    std::vector<fsys::path> inputs{out_dir / "sequences.tsv", out_dir / "vocab.tsv"};
    switch (ac.strategy) {
        case AugmentStrategy::bicat:
        case AugmentStrategy::reverse_only: {
            detail::require_artifact(out_dir / "pretrain.ckpt", "augment", "pretrain");
            inputs.push_back(out_dir / "pretrain.ckpt");
            Checkpoint ck = load_checkpoint_file((out_dir / "pretrain.ckpt").string());
            if (ck.params.vocab_size != corpus.vocab.size())
                throw CompatibilityError(
                    "augment: checkpoint vocabulary (" +
                    std::to_string(ck.params.vocab_size) + ") does not match vocab.tsv (" +
                    std::to_string(corpus.vocab.size()) + ")");
            augmented = augment_corpus(trains, ck.params, ck.config, ac);
            break;
        }
        case AugmentStrategy::none:
            augmented = identity_corpus(trains);
            break;
        default:
            augmented = perturb_corpus(trains, ac.strategy, ac, corpus.vocab.size());
            break;
    }

    std::ostringstream buf;
    write_augmented_file(buf, augmented);
    detail::atomic_write_file(out_dir / "augmented.tsv", buf.str());
    detail::write_manifest(out_dir, cfg, "augment", inputs, {out_dir / "augmented.tsv"});

    std::size_t generated = 0;
    for (const AugmentedSequence& a : augmented.sequences) generated += a.generated;
    log << "augment: strategy " << to_string(ac.strategy) << ", " << generated
        << " pseudo-prior items over " << augmented.sequences.size() << " sequences\n";
}

inline void cmd_finetune(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
    cfg.validate();
    const fsys::path out_dir(cfg.out_dir);
    detail::LoadedCorpus corpus = detail::load_corpus(out_dir, "finetune");
    detail::require_artifact(out_dir / "augmented.tsv", "finetune", "augment");

    std::ifstream aug_in(out_dir / "augmented.tsv");
    AugmentedCorpus augmented = read_augmented_file(aug_in);

    // Restore the true original training sequences; the augmented file's tail
    // reconstruction is not authoritative for the perturbation strategies.
    {
        std::map<int, const UserSequence*> by_user;
        for (const UserSequence& s : corpus.sequences) by_user[s.user] = &s;
        for (AugmentedSequence& a : augmented.sequences) {
            auto it = by_user.find(a.user);
            if (it == by_user.end())
                throw CompatibilityError("finetune: augmented user " +
                                         std::to_string(a.user) +
                                         " is absent from sequences.tsv");
            a.original = leave_one_out(*it->second).train;
        }
    }

    FinetuneConfig ft = cfg.finetune;
    ft.seed = stage_seed(cfg.seed, "finetune");

    ModelParams params = [&]() {
        if (ft.retrain_from_scratch)
            return ModelParams::init(cfg.encoder, corpus.vocab.size(),
                                     stage_seed(cfg.seed, "init.rt"));
        detail::require_artifact(out_dir / "pretrain.ckpt", "finetune", "pretrain");
        Checkpoint ck = load_checkpoint_file((out_dir / "pretrain.ckpt").string());
        if (ck.params.vocab_size != corpus.vocab.size())
            throw CompatibilityError("finetune: checkpoint vocabulary (" +
                                     std::to_string(ck.params.vocab_size) +
                                     ") does not match vocab.tsv (" +
                                     std::to_string(corpus.vocab.size()) + ")");
        return ck.params;
    }();

    std::vector<FinetuneEpochTrace> trace = run_finetune(augmented, params, cfg.encoder, ft);

    std::ostringstream ckpt;
    save_checkpoint(ckpt, cfg.encoder, params);
    detail::atomic_write_file(out_dir / "finetune.ckpt", ckpt.str());
    std::string csv = "epoch,loss_bce,loss_kl,loss_total\n";
    for (std::size_t e = 0; e < trace.size(); ++e)
        csv += std::to_string(e) + "," + detail::format_double(trace[e].loss_bce) + "," +
               detail::format_double(trace[e].loss_kl) + "," +
               detail::format_double(trace[e].loss_total) + "\n";
    detail::atomic_write_file(out_dir / "finetune_loss.csv", csv);

    std::vector<fsys::path> inputs{out_dir / "sequences.tsv", out_dir / "vocab.tsv",
                                   out_dir / "augmented.tsv"};
    if (!ft.retrain_from_scratch) inputs.push_back(out_dir / "pretrain.ckpt");
    detail::write_manifest(out_dir, cfg, "finetune", inputs,
                           {out_dir / "finetune.ckpt", out_dir / "finetune_loss.csv"});
    if (!trace.empty())
        log << "finetune: " << trace.size() << " epochs, final loss "
            << detail::format_double(trace.back().loss_total) << "\n";
}

inline MetricsReport cmd_evaluate(const ExperimentConfig& cfg,
                                  const std::string& checkpoint_override = "",
                                  std::ostream& log = std::cout) {
    cfg.validate();
    const fsys::path out_dir(cfg.out_dir);
    detail::LoadedCorpus corpus = detail::load_corpus(out_dir, "evaluate");
    const fsys::path ckpt_path = checkpoint_override.empty()
                                     ? out_dir / "finetune.ckpt"
                                     : fsys::path(checkpoint_override);
    detail::require_artifact(ckpt_path, "evaluate", "finetune");
    Checkpoint ck = load_checkpoint_file(ckpt_path.string());
    if (ck.params.vocab_size != corpus.vocab.size())
        throw CompatibilityError("evaluate: checkpoint vocabulary (" +
                                 std::to_string(ck.params.vocab_size) +
                                 ") does not match vocab.tsv (" +
                                 std::to_string(corpus.vocab.size()) + ")");
    if (ck.config.d != cfg.encoder.d || ck.config.n != cfg.encoder.n ||
        ck.config.h != cfg.encoder.h || ck.config.layers != cfg.encoder.layers)
        throw CompatibilityError("evaluate: checkpoint encoder configuration differs from "
                                 "the experiment config");

    AugmentedCorpus augmented;
    const AugmentedCorpus* aug_ptr = nullptr;
    if (cfg.augment_eval_inputs) {
        detail::require_artifact(out_dir / "augmented.tsv", "evaluate", "augment");
        std::ifstream aug_in(out_dir / "augmented.tsv");
        augmented = read_augmented_file(aug_in);
        aug_ptr = &augmented;
    }

    std::vector<EvalUser> users = make_eval_users(corpus.sequences, false, aug_ptr);
    Scorer scorer = make_encoder_scorer(ck.params, ck.config);
    const std::string fingerprint = detail::sha1_hex(cfg.serialize(false));

    std::vector<MetricsReport> reports;
    std::vector<fsys::path> outputs;
    for (std::size_t s = 0; s < cfg.eval_seeds; ++s) {
        EvalOptions opts;
        opts.ks = cfg.eval_ks;
        opts.negative_count = cfg.eval_negatives;
        opts.full_catalog = cfg.eval_full_catalog;
        opts.seed = stage_seed(cfg.seed, "evaluate.seed" + std::to_string(s));
        opts.config_fingerprint = fingerprint;
        MetricsReport rep = evaluate(scorer, users, corpus.vocab.size(), opts);
        const std::string stem = "metrics_seed" + std::to_string(s);
        detail::atomic_write_file(out_dir / (stem + ".json"), to_json(rep).dump(2) + "\n");
        std::ostringstream csv;
        write_metrics_csv(csv, rep);
        detail::atomic_write_file(out_dir / (stem + ".csv"), csv.str());
        outputs.push_back(out_dir / (stem + ".json"));
        outputs.push_back(out_dir / (stem + ".csv"));
        reports.push_back(std::move(rep));
    }
    MetricsReport avg = average_reports(reports);
    detail::atomic_write_file(out_dir / "metrics_avg.json", to_json(avg).dump(2) + "\n");
    std::ostringstream avg_csv;
    write_metrics_csv(avg_csv, avg);
    detail::atomic_write_file(out_dir / "metrics_avg.csv", avg_csv.str());
    outputs.push_back(out_dir / "metrics_avg.json");
    outputs.push_back(out_dir / "metrics_avg.csv");

    if (cfg.eval_export_embeddings > 0) {
        std::ostringstream emb;
        export_embeddings(emb, ck.params, corpus.vocab, cfg.eval_export_embeddings,
                          stage_seed(cfg.seed, "export_embeddings"));
        detail::atomic_write_file(out_dir / "embeddings.tsv", emb.str());
        outputs.push_back(out_dir / "embeddings.tsv");
    }

    std::vector<fsys::path> inputs{out_dir / "sequences.tsv", out_dir / "vocab.tsv",
                                   ckpt_path};
    if (aug_ptr != nullptr) inputs.push_back(out_dir / "augmented.tsv");
    detail::write_manifest(out_dir, cfg, "evaluate", inputs, outputs);

    log << "evaluate: " << avg.user_count << " users";
    for (const auto& [name, value] : avg.overall.metrics)
        log << ", " << name << " " << detail::format_double(value);
    log << "\n";
    return avg;
}

inline CounterexampleReport cmd_oracle(const std::string& corpus_path,
                                       const std::string& out_path = "",
                                       std::ostream& log = std::cout) {
    std::ifstream in(corpus_path);
    if (!in) throw IoError("oracle: cannot open '" + corpus_path + "'");
    const auto corpus = read_symbol_corpus(in);
    if (corpus.empty()) throw UndefinedConditionalError("oracle: empty symbol corpus");
    NgramCounts counts(corpus, 3);
    CounterexampleReport rep = counterexample_report(counts);
    const nlohmann::ordered_json j = to_json(rep);
    log << "forward conditional before augmentation   " << to_string(rep.forward_before)
        << "\n"
        << "reverse-inference choice                   " << rep.reverse_choice << "\n"
        << "forward conditional after reverse choice   " << to_string(rep.forward_after_reverse)
        << "\n"
        << "forward-constrained choice                 " << rep.forward_choice << "\n"
        << "forward conditional after forward choice   " << to_string(rep.forward_after_forward)
        << "\n"
        << "reverse choice degraded forward conditional "
        << (rep.reverse_degrades_forward ? "true" : "false") << "\n";
    if (!out_path.empty())
        detail::atomic_write_file(out_path, j.dump(2) + "\n");
    else
        log << j.dump(2) << "\n";
    return rep;
}

}  // namespace bicat
