#pragma once

#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bicat/augment.hpp"
#include "bicat/corpus.hpp"
#include "bicat/encoder.hpp"
#include "bicat/finetune.hpp"
#include "bicat/pretrain.hpp"

namespace bicat {

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    std::size_t b = s.find_last_not_of(" \t");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("config: " + key + " must be true or false, got '" + v + "'");
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " must be a non-negative integer, got '" + v +
                          "'");
    }
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " must be a real number, got '" + v + "'");
    }
}

inline std::vector<std::size_t> parse_size_list(const std::string& key,
                                                const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ','))
        out.push_back(parse_size(key, trim(part)));
    if (out.empty()) throw ConfigError("config: " + key + " must not be empty");
    return out;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

}  // namespace detail

/// Flat `section.key = value` configuration covering every pipeline stage.
/// One master seed fans out to per-stage streams via stage_seed().
struct ExperimentConfig {
    std::string data_input;
    std::string data_format = "user,item,rating,timestamp";
    char data_delimiter = ',';
    std::size_t data_min_len = 3;

    std::uint64_t seed = 42;
    std::string out_dir = "runs";

    EncoderConfig encoder;
    PretrainConfig pretrain;
    AugmentConfig augment;
    FinetuneConfig finetune;

    std::vector<std::size_t> eval_ks{1, 5, 10};
    std::size_t eval_negatives = 100;
    bool eval_full_catalog = false;
    std::size_t eval_seeds = 10;
    std::string eval_sampling = "uniform";  // placeholder for popularity sampling
    std::size_t eval_export_embeddings = 0;
    bool augment_eval_inputs = false;

    void validate() const {
        encoder.validate();
        pretrain.validate();
        augment.validate();
        finetune.validate();
        if (eval_seeds < 1) throw ConfigError("config: eval.seeds must be at least 1");
        if (eval_sampling != "uniform")
            throw ConfigError("config: eval.sampling supports only 'uniform', got '" +
                              eval_sampling + "'");
        if (data_min_len < 3)
            throw ConfigError("config: data.min_len below 3 cannot produce splits");
    }

    /// Key/value view in canonical order.  The output directory is a
    /// reproducibility-neutral field and is skipped from digests.
    std::vector<std::pair<std::string, std::string>> to_kv(bool include_out = true) const {
        using detail::format_double;
        std::vector<std::pair<std::string, std::string>> kv;
        kv.emplace_back("data.input", data_input);
        kv.emplace_back("data.format", data_format);
        kv.emplace_back("data.delimiter", std::string(1, data_delimiter));
        kv.emplace_back("data.min_len", std::to_string(data_min_len));
        kv.emplace_back("seed", std::to_string(seed));
        if (include_out) kv.emplace_back("out", out_dir);
        kv.emplace_back("encoder.n", std::to_string(encoder.n));
        kv.emplace_back("encoder.d", std::to_string(encoder.d));
        kv.emplace_back("encoder.heads", std::to_string(encoder.h));
        kv.emplace_back("encoder.layers", std::to_string(encoder.layers));
        kv.emplace_back("encoder.dropout", format_double(encoder.dropout));
        kv.emplace_back("encoder.sqrt_d_scale", encoder.sqrt_d_scale ? "true" : "false");
        kv.emplace_back("pretrain.lambda", format_double(pretrain.lambda));
        kv.emplace_back("pretrain.epochs", std::to_string(pretrain.epochs));
        kv.emplace_back("pretrain.batch_size", std::to_string(pretrain.batch_size));
        kv.emplace_back("pretrain.lr", format_double(pretrain.lr));
        kv.emplace_back("pretrain.checkpoint_every",
                        std::to_string(pretrain.checkpoint_every));
        kv.emplace_back("pretrain.forward_last_only",
                        pretrain.forward_last_only ? "true" : "false");
        kv.emplace_back("pretrain.clip_k", std::to_string(pretrain.clip_k));
        kv.emplace_back("augment.k", std::to_string(augment.max_generated));
        kv.emplace_back("augment.m", std::to_string(augment.short_threshold));
        kv.emplace_back("augment.strategy", to_string(augment.strategy));
        kv.emplace_back("augment.ratio", format_double(augment.ratio));
        kv.emplace_back("augment.top_k", std::to_string(augment.top_k));
        kv.emplace_back("augment.eval_inputs", augment_eval_inputs ? "true" : "false");
        kv.emplace_back("finetune.alpha", format_double(finetune.alpha));
        kv.emplace_back("finetune.clip_k", std::to_string(finetune.clip_k));
        kv.emplace_back("finetune.epochs", std::to_string(finetune.epochs));
        kv.emplace_back("finetune.batch_size", std::to_string(finetune.batch_size));
        kv.emplace_back("finetune.lr", format_double(finetune.lr));
        kv.emplace_back("finetune.rt", finetune.retrain_from_scratch ? "true" : "false");
        kv.emplace_back("finetune.kl_sample", std::to_string(finetune.kl_sample));
        kv.emplace_back("eval.ks", detail::join_sizes(eval_ks));
        kv.emplace_back("eval.negatives", std::to_string(eval_negatives));
        kv.emplace_back("eval.full_catalog", eval_full_catalog ? "true" : "false");
        kv.emplace_back("eval.seeds", std::to_string(eval_seeds));
        kv.emplace_back("eval.sampling", eval_sampling);
        kv.emplace_back("eval.export_embeddings", std::to_string(eval_export_embeddings));
        return kv;
    }

    std::string serialize(bool include_out = true) const {
        std::string out;
        for (const auto& [k, v] : to_kv(include_out)) {
            out += k;
            out += " = ";
            out += v;
            out += "\n";
        }
        return out;
    }

    void set(const std::string& key, const std::string& value) {
        using namespace detail;
        if (key == "data.input") data_input = value;
        else if (key == "data.format") data_format = value;
        else if (key == "data.delimiter") {
            if (value.size() != 1)
                throw ConfigError("config: data.delimiter must be one character");
            data_delimiter = value[0];
        } else if (key == "data.min_len") data_min_len = parse_size(key, value);
        else if (key == "seed") seed = parse_size(key, value);
        else if (key == "out") out_dir = value;
        else if (key == "encoder.n") encoder.n = parse_size(key, value);
        else if (key == "encoder.d") encoder.d = parse_size(key, value);
        else if (key == "encoder.heads") encoder.h = parse_size(key, value);
        else if (key == "encoder.layers") encoder.layers = parse_size(key, value);
        else if (key == "encoder.dropout") encoder.dropout = parse_real(key, value);
        else if (key == "encoder.sqrt_d_scale") encoder.sqrt_d_scale = parse_bool(key, value);
        else if (key == "pretrain.lambda") pretrain.lambda = parse_real(key, value);
        else if (key == "pretrain.epochs") pretrain.epochs = parse_size(key, value);
        else if (key == "pretrain.batch_size") pretrain.batch_size = parse_size(key, value);
        else if (key == "pretrain.lr") pretrain.lr = parse_real(key, value);
        else if (key == "pretrain.checkpoint_every")
            pretrain.checkpoint_every = parse_size(key, value);
        else if (key == "pretrain.forward_last_only")
            pretrain.forward_last_only = parse_bool(key, value);
        else if (key == "pretrain.clip_k") pretrain.clip_k = parse_size(key, value);
        else if (key == "augment.k") augment.max_generated = parse_size(key, value);
        else if (key == "augment.m") augment.short_threshold = parse_size(key, value);
        else if (key == "augment.strategy") augment.strategy = augment_strategy_from(value);
        else if (key == "augment.ratio") augment.ratio = parse_real(key, value);
        else if (key == "augment.top_k") augment.top_k = parse_size(key, value);
        else if (key == "augment.eval_inputs") augment_eval_inputs = parse_bool(key, value);
        else if (key == "finetune.alpha") finetune.alpha = parse_real(key, value);
        else if (key == "finetune.clip_k") finetune.clip_k = parse_size(key, value);
        else if (key == "finetune.epochs") finetune.epochs = parse_size(key, value);
        else if (key == "finetune.batch_size") finetune.batch_size = parse_size(key, value);
        else if (key == "finetune.lr") finetune.lr = parse_real(key, value);
        else if (key == "finetune.rt") finetune.retrain_from_scratch = parse_bool(key, value);
        else if (key == "finetune.kl_sample") finetune.kl_sample = parse_size(key, value);
        else if (key == "eval.ks") eval_ks = parse_size_list(key, value);
        else if (key == "eval.negatives") eval_negatives = parse_size(key, value);
        else if (key == "eval.full_catalog") eval_full_catalog = parse_bool(key, value);
        else if (key == "eval.seeds") eval_seeds = parse_size(key, value);
        else if (key == "eval.sampling") eval_sampling = value;
        else if (key == "eval.export_embeddings")
            eval_export_embeddings = parse_size(key, value);
        else throw ConfigError("config: unknown key '" + key + "'");
    }

    static ExperimentConfig parse(std::istream& in) {
        ExperimentConfig cfg;
        std::map<std::string, bool> seen;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": expected 'key = value'");
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            if (seen[key])
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": duplicate key '" + key + "'");
            seen[key] = true;
            cfg.set(key, value);
        }
        return cfg;
    }

    static ExperimentConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    bool operator==(const ExperimentConfig& o) const { return to_kv() == o.to_kv(); }
};

}  // namespace bicat
