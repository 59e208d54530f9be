#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bicat/augment.hpp"
#include "bicat/corpus.hpp"
#include "bicat/encoder.hpp"

namespace bicat {

/// Scores a candidate list given a model input; index i of the result scores
/// candidates[i].  Abstract so that tests can rank with synthetic scorers.
using Scorer =
    std::function<std::vector<double>(const std::vector<int>&, const std::vector<int>&)>;

inline Scorer make_encoder_scorer(ModelParams& params, const EncoderConfig& enc) {
    return [&params, enc](const std::vector<int>& input,
                          const std::vector<int>& candidates) {
        const std::vector<int> padded = pad_truncate(input, enc.n);
        const Tensor h = encode_eval(padded, params, enc);
        Tensor row({1, enc.d});
        for (std::size_t j = 0; j < enc.d; ++j) row.at(0, j) = h.at(enc.n - 1, j);
        const Tensor scores = relevance(row, params);
        std::vector<double> out;
        out.reserve(candidates.size());
        for (int c : candidates) out.push_back(scores.at(0, static_cast<std::size_t>(c)));
        return out;
    };
}

struct RankedResult {
    int user = 0;
    std::size_t rank = 0;             // 1-based rank of the ground truth
    std::size_t candidate_count = 0;
    std::size_t tie_count = 0;        // other candidates sharing the truth's score
};

/// Ranks the ground truth among the candidates: one plus the number of
/// strictly higher scores, with ties broken by candidate list order.
inline RankedResult rank_candidates(const Scorer& scorer, const std::vector<int>& input,
                                    const std::vector<int>& candidates, int truth,
                                    int user = 0) {
    std::size_t truth_index = candidates.size();
    std::size_t truth_seen = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i] == truth) {
            truth_index = i;
            ++truth_seen;
        }
    }
    if (truth_seen != 1)
        throw ProtocolError("rank_candidates: ground truth must appear exactly once, found " +
                            std::to_string(truth_seen));
    const std::vector<double> scores = scorer(input, candidates);
    if (scores.size() != candidates.size())
        throw ProtocolError("rank_candidates: scorer returned " +
                            std::to_string(scores.size()) + " scores for " +
                            std::to_string(candidates.size()) + " candidates");
    const double target = scores[truth_index];
    RankedResult res;
    res.user = user;
    res.candidate_count = candidates.size();
    std::size_t higher = 0, ties_before = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i == truth_index) continue;
        if (scores[i] > target) ++higher;
        if (scores[i] == target) {
            ++res.tie_count;
            if (i < truth_index) ++ties_before;
        }
    }
    res.rank = 1 + higher + ties_before;
    return res;
}

inline double recall_at_k(const std::vector<RankedResult>& results, std::size_t k) {
    if (results.empty()) throw MetricError("recall: no results");
    if (k < 1) throw MetricError("recall: k must be at least 1");
    double hits = 0;
    for (const RankedResult& r : results) hits += (r.rank <= k) ? 1.0 : 0.0;
    return hits / static_cast<double>(results.size());
}

inline double ndcg_at_k(const std::vector<RankedResult>& results, std::size_t k) {
    if (results.empty()) throw MetricError("ndcg: no results");
    if (k < 1) throw MetricError("ndcg: k must be at least 1");
    double total = 0;
    for (const RankedResult& r : results)
        if (r.rank <= k) total += 1.0 / std::log2(static_cast<double>(r.rank) + 1.0);
    return total / static_cast<double>(results.size());
}

inline double mrr(const std::vector<RankedResult>& results) {
    if (results.empty()) throw MetricError("mrr: no results");
    double total = 0;
    for (const RankedResult& r : results) total += 1.0 / static_cast<double>(r.rank);
    return total / static_cast<double>(results.size());
}

// ---------------------------------------------------------------------------
// Corpus-level evaluation.
// ---------------------------------------------------------------------------

/// One user prepared for ranking: the model input, the target, the exclusion
/// history, and the pre-augmentation sequence length that keys the buckets.
struct EvalUser {
    int user = 0;
    std::vector<int> input;
    int truth = 0;
    std::vector<int> history;
    std::size_t original_length = 0;
};

/// Builds the evaluation roster from full user sequences.  With
/// `validation` the second-last item is the target and the input stops
/// before it.  An augmented corpus, when supplied, contributes its
/// pseudo-prior prefix to the inputs.
inline std::vector<EvalUser> make_eval_users(const std::vector<UserSequence>& seqs,
                                             bool validation = false,
                                             const AugmentedCorpus* augmented = nullptr) {
    std::unordered_map<int, const AugmentedSequence*> prior;
    if (augmented != nullptr)
        for (const AugmentedSequence& a : augmented->sequences) prior[a.user] = &a;
    std::vector<EvalUser> out;
    for (const UserSequence& s : seqs) {
        if (s.items.size() < 3) continue;
        SplitSequence split = leave_one_out(s);
        EvalUser u;
        u.user = s.user;
        u.history = s.items;
        u.original_length = s.items.size();
        if (validation) {
            u.input = split.train;
            u.truth = split.valid;
        } else {
            u.input = split.test_input();
            u.truth = split.test;
        }
        auto it = prior.find(s.user);
        if (it != prior.end() && it->second->generated > 0) {
            std::vector<int> with_prior(
                it->second->augmented.begin(),
                it->second->augmented.begin() +
                    static_cast<std::ptrdiff_t>(it->second->generated));
            with_prior.insert(with_prior.end(), u.input.begin(), u.input.end());
            u.input = std::move(with_prior);
        }
        out.push_back(std::move(u));
    }
    return out;
}

struct EvalOptions {
    std::vector<std::size_t> ks{1, 5, 10};
    std::size_t negative_count = 100;
    bool full_catalog = false;  // rank against every non-interacted item instead
    std::uint64_t seed = 0;
    std::string config_fingerprint;
};

struct MetricsBucket {
    std::string label;
    std::size_t count = 0;
    std::vector<std::pair<std::string, double>> metrics;
};

struct MetricsReport {
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    std::size_t user_count = 0;
    double tie_rate = 0.0;
    MetricsBucket overall;
    std::vector<MetricsBucket> buckets;
};

namespace detail {

inline const char* bucket_label(std::size_t len) {
    if (len <= 3) return "L<=3";
    if (len <= 20) return "3<L<=20";
    if (len <= 50) return "20<L<=50";
    return "L>50";
}

inline std::vector<std::pair<std::string, double>> metric_values(
    const std::vector<RankedResult>& results, const std::vector<std::size_t>& ks) {
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t k : ks)
        out.emplace_back("recall@" + std::to_string(k), recall_at_k(results, k));
    for (std::size_t k : ks)
        out.emplace_back("ndcg@" + std::to_string(k), ndcg_at_k(results, k));
    out.emplace_back("mrr", mrr(results));
    return out;
}

}  // namespace detail

/// Ranks every eligible user against sampled (or full-catalog) negatives and
/// aggregates metrics overall and per length bucket.  Pure: identical inputs
/// and seed give identical reports.
inline MetricsReport evaluate(const Scorer& scorer, const std::vector<EvalUser>& users,
                              std::size_t vocab_size, const EvalOptions& opts = {}) {
    Rng rng(stage_seed(opts.seed, "evaluate"));
    std::vector<RankedResult> all;
    std::map<std::string, std::vector<RankedResult>> per_bucket;
    std::size_t tied_users = 0;
    for (const EvalUser& u : users) {
        std::size_t count = opts.negative_count;
        if (opts.full_catalog) {
            std::unordered_set<int> interacted(u.history.begin(), u.history.end());
            interacted.insert(u.truth);
            count = vocab_size - interacted.size();
        }
        std::vector<int> candidates =
            sample_eval_candidates(u.history, u.truth, vocab_size, rng, count);
        RankedResult r = rank_candidates(scorer, u.input, candidates, u.truth, u.user);
        if (r.tie_count > 0) ++tied_users;
        all.push_back(r);
        per_bucket[detail::bucket_label(u.original_length)].push_back(r);
    }
    if (all.empty()) throw MetricError("evaluate: no eligible users");

    MetricsReport rep;
    rep.seed = opts.seed;
    rep.config_fingerprint = opts.config_fingerprint;
    rep.user_count = all.size();
    rep.tie_rate = static_cast<double>(tied_users) / static_cast<double>(all.size());
    rep.overall.label = "all";
    rep.overall.count = all.size();
    rep.overall.metrics = detail::metric_values(all, opts.ks);
    for (const char* label : {"L<=3", "3<L<=20", "20<L<=50", "L>50"}) {
        MetricsBucket b;
        b.label = label;
        auto it = per_bucket.find(label);
        if (it != per_bucket.end()) {
            b.count = it->second.size();
            b.metrics = detail::metric_values(it->second, opts.ks);
        } else {
            b.count = 0;
            for (std::size_t k : opts.ks) {
                b.metrics.emplace_back("recall@" + std::to_string(k), 0.0);
            }
            for (std::size_t k : opts.ks)
                b.metrics.emplace_back("ndcg@" + std::to_string(k), 0.0);
            b.metrics.emplace_back("mrr", 0.0);
        }
        rep.buckets.push_back(std::move(b));
    }
    return rep;
}

/// Element-wise mean of reports produced with identical rosters.
inline MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw MetricError("average_reports: nothing to average");
    MetricsReport avg = reports[0];
    auto add_into = [](MetricsBucket& dst, const MetricsBucket& src, double w) {
        for (std::size_t i = 0; i < dst.metrics.size(); ++i)
            dst.metrics[i].second += w * src.metrics[i].second;
    };
    const double w = 1.0 / static_cast<double>(reports.size());
    for (auto& m : avg.overall.metrics) m.second *= w;
    for (auto& b : avg.buckets)
        for (auto& m : b.metrics) m.second *= w;
    avg.tie_rate *= w;
    for (std::size_t r = 1; r < reports.size(); ++r) {
        add_into(avg.overall, reports[r].overall, w);
        for (std::size_t b = 0; b < avg.buckets.size(); ++b)
            add_into(avg.buckets[b], reports[r].buckets[b], w);
        avg.tie_rate += w * reports[r].tie_rate;
    }
    return avg;
}

inline nlohmann::ordered_json to_json(const MetricsReport& rep) {
    nlohmann::ordered_json j;
    j["seed"] = rep.seed;
    j["config_fingerprint"] = rep.config_fingerprint;
    j["user_count"] = rep.user_count;
    j["tie_rate"] = rep.tie_rate;
    auto bucket_json = [](const MetricsBucket& b) {
        nlohmann::ordered_json bj;
        bj["count"] = b.count;
        for (const auto& [name, value] : b.metrics) bj[name] = value;
        return bj;
    };
    j["overall"] = bucket_json(rep.overall);
    nlohmann::ordered_json buckets;
    for (const MetricsBucket& b : rep.buckets) buckets[b.label] = bucket_json(b);
    j["buckets"] = buckets;
    return j;
}

inline void write_metrics_csv(std::ostream& out, const MetricsReport& rep) {
    out << "bucket,metric,value,count\n";
    char buf[64];
    auto emit = [&](const MetricsBucket& b) {
        for (const auto& [name, value] : b.metrics) {
            std::snprintf(buf, sizeof buf, "%.17g", value);
            out << b.label << ',' << name << ',' << buf << ',' << b.count << '\n';
        }
    };
    emit(rep.overall);
    for (const MetricsBucket& b : rep.buckets) emit(b);
}

/// Seeded sample of item embeddings, one row per item:
/// item <TAB> x1 <TAB> ... <TAB> xd.
inline void export_embeddings(std::ostream& out, ModelParams& params, const Vocab& vocab,
                              std::size_t sample_size, std::uint64_t seed) {
    if (sample_size > params.vocab_size)
        throw SamplingError("export_embeddings: sample of " + std::to_string(sample_size) +
                            " from " + std::to_string(params.vocab_size) + " items");
    Rng rng(stage_seed(seed, "export_embeddings"));
    std::vector<int> pool(params.vocab_size);
    for (std::size_t v = 0; v < params.vocab_size; ++v) pool[v] = static_cast<int>(v) + 1;
    for (std::size_t i = 0; i < sample_size; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    char buf[64];
    const std::size_t d = params.item_table.value.cols();
    for (std::size_t i = 0; i < sample_size; ++i) {
        const int item = pool[i];
        out << vocab.item_of(item);
        for (std::size_t jdx = 0; jdx < d; ++jdx) {
            std::snprintf(buf, sizeof buf, "%.17g",
                          params.item_table.value.at(static_cast<std::size_t>(item), jdx));
            out << '\t' << buf;
        }
        out << '\n';
    }
}

}  // namespace bicat
