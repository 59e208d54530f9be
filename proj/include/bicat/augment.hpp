#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bicat/encoder.hpp"
#include "bicat/pretrain.hpp"

namespace bicat {

enum class AugmentStrategy { bicat, reverse_only, mask, crop, replace, add, none };

inline const char* to_string(AugmentStrategy s) {
    switch (s) {
        case AugmentStrategy::bicat: return "bicat";
        case AugmentStrategy::reverse_only: return "reverse_only";
        case AugmentStrategy::mask: return "mask";
        case AugmentStrategy::crop: return "crop";
        case AugmentStrategy::replace: return "replace";
        case AugmentStrategy::add: return "add";
        case AugmentStrategy::none: return "none";
    }
    return "none";
}

inline AugmentStrategy augment_strategy_from(const std::string& s) {
    if (s == "bicat") return AugmentStrategy::bicat;
    if (s == "reverse_only") return AugmentStrategy::reverse_only;
    if (s == "mask") return AugmentStrategy::mask;
    if (s == "crop") return AugmentStrategy::crop;
    if (s == "replace") return AugmentStrategy::replace;
    if (s == "add") return AugmentStrategy::add;
    if (s == "none") return AugmentStrategy::none;
    throw ConfigError("unknown augmentation strategy '" + s + "'");
}

struct AugmentConfig {
    std::size_t max_generated = 15;    // K: pseudo-prior items per sequence
    std::size_t short_threshold = 18;  // M: sequences shorter than this get augmented
    AugmentStrategy strategy = AugmentStrategy::bicat;
    double ratio = 0.2;     // perturbation ratio of the baseline strategies
    std::size_t top_k = 0;  // 0 = greedy decoding; >0 samples from the top-k scores
    std::uint64_t seed = 0;

    void validate() const {
        if (short_threshold < 1) throw ConfigError("augment: M must be at least 1");
        if (strategy == AugmentStrategy::mask || strategy == AugmentStrategy::crop ||
            strategy == AugmentStrategy::replace || strategy == AugmentStrategy::add) {
            if (!(ratio > 0.0 && ratio < 1.0))
                throw ConfigError("augment: ratio must lie in (0,1)");
        }
    }
};

/// Per-user augmentation outcome.  For the generation strategies the suffix
/// of `augmented` of length |original| is exactly `original`.
struct AugmentedSequence {
    int user = 0;
    std::vector<int> original;
    std::vector<int> augmented;
    std::size_t generated = 0;  // g_u: pseudo-prior items prepended
};

struct AugmentedCorpus {
    std::vector<AugmentedSequence> sequences;
};

namespace detail {

/// Greedy (or top-k stochastic) next-item choice for the reverse direction.
/// Items already in the working sequence are dispreferred, matching the
/// non-interacted-item convention (see argmax_item).
inline int decode_next(const std::vector<int>& working, ModelParams& params,
                       const EncoderConfig& enc, std::size_t top_k, Rng* rng) {
    if (params.vocab_size == 0)
        throw GenerationError("augment: empty vocabulary, nothing to generate");
    const std::vector<int> padded = pad_truncate(working, enc.n);
    if (top_k <= 1) return predict_next(padded, params, enc);

    const Tensor scores = last_position_scores(padded, params, enc);
    std::unordered_set<int> banned;
    for (int v : working) banned.insert(v);
    std::vector<std::pair<double, int>> ranked;
    for (int v = 1; v <= static_cast<int>(params.vocab_size); ++v)
        if (banned.count(v) == 0)
            ranked.emplace_back(scores.at(0, static_cast<std::size_t>(v)), v);
    if (ranked.empty())
        for (int v = 1; v <= static_cast<int>(params.vocab_size); ++v)
            ranked.emplace_back(scores.at(0, static_cast<std::size_t>(v)), v);
    const std::size_t k = std::min(top_k, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k),
                      ranked.end(), [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
    // Softmax over the retained scores.
    double mx = ranked[0].first;
    double total = 0.0;
    std::vector<double> w(k);
    for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp(ranked[i].first - mx);
        total += w[i];
    }
    double u = uniform01(*rng) * total;
    for (std::size_t i = 0; i < k; ++i) {
        u -= w[i];
        if (u < 0.0) return ranked[i].second;
    }
    return ranked[k - 1].second;
}

}  // namespace detail

/// Recursive pseudo-prior generation, oldest item first.  The reversed
/// sequence is extended one step at a time; generation stops after K items or
/// as soon as the working length reaches the threshold M, whichever comes
/// first.  Items generated earlier become context for later ones.
inline std::vector<int> recursive_generate(const std::vector<int>& seq, ModelParams& params,
                                           const EncoderConfig& enc, std::size_t K,
                                           std::size_t M, std::size_t top_k = 0,
                                           Rng* rng = nullptr) {
    if (seq.empty()) throw GenerationError("recursive_generate: empty sequence");
    if (seq.size() >= M) return {};
    std::vector<int> working = reverse_sequence(seq);
    std::vector<int> generated;  // collected newest-first, flipped on return
    for (std::size_t k = 0; k < K && working.size() < M; ++k) {
        const int item = detail::decode_next(working, params, enc, top_k, rng);
        working.push_back(item);
        generated.push_back(item);
    }
    return reverse_sequence(generated);
}

/// Applies pseudo-prior generation to every sequence shorter than M.
inline AugmentedCorpus augment_corpus(const std::vector<UserSequence>& train_seqs,
                                      ModelParams& params, const EncoderConfig& enc,
                                      const AugmentConfig& cfg) {
    cfg.validate();
    if (cfg.strategy != AugmentStrategy::bicat &&
        cfg.strategy != AugmentStrategy::reverse_only)
        throw ConfigError("augment_corpus: generation requires the bicat or reverse_only "
                          "strategy, got " + std::string(to_string(cfg.strategy)));
    Rng rng(stage_seed(cfg.seed, "augment"));
    AugmentedCorpus out;
    for (const UserSequence& s : train_seqs) {
        AugmentedSequence a;
        a.user = s.user;
        a.original = s.items;
        std::vector<int> prior =
            s.items.size() < cfg.short_threshold
                ? recursive_generate(s.items, params, enc, cfg.max_generated,
                                     cfg.short_threshold, cfg.top_k, &rng)
                : std::vector<int>{};
        a.generated = prior.size();
        a.augmented = std::move(prior);
        a.augmented.insert(a.augmented.end(), s.items.begin(), s.items.end());
        out.sequences.push_back(std::move(a));
    }
    return out;
}

struct BaselineResult {
    std::vector<int> items;
    bool changed = false;
};

/// The four conventional random perturbations.  Pure: the input list is never
/// modified.  Sequences shorter than 2 come back unchanged and flagged.
inline BaselineResult baseline_augment(const std::vector<int>& seq, AugmentStrategy kind,
                                       Rng& rng, double ratio, std::size_t vocab_size) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw ConfigError("baseline_augment: ratio must lie in (0,1)");
    if (seq.size() < 2) return {seq, false};
    const std::size_t count =
        static_cast<std::size_t>(ratio * static_cast<double>(seq.size()));
    BaselineResult res{seq, true};
    switch (kind) {
        case AugmentStrategy::mask: {
            if (count == 0) return {seq, false};
            std::vector<std::size_t> order(seq.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_inplace(order, rng);
            for (std::size_t i = 0; i < count; ++i) res.items[order[i]] = 0;
            return res;
        }
        case AugmentStrategy::crop: {
            const std::size_t keep = static_cast<std::size_t>(
                std::ceil((1.0 - ratio) * static_cast<double>(seq.size())));
            if (keep >= seq.size()) return {seq, false};
            const std::size_t start =
                static_cast<std::size_t>(uniform_below(rng, seq.size() - keep + 1));
            res.items.assign(seq.begin() + static_cast<std::ptrdiff_t>(start),
                             seq.begin() + static_cast<std::ptrdiff_t>(start + keep));
            return res;
        }
        case AugmentStrategy::replace: {
            if (count == 0) return {seq, false};
            if (vocab_size < 2)
                throw SamplingError("baseline_augment: need at least two items to replace");
            std::vector<std::size_t> order(seq.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            shuffle_inplace(order, rng);
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t pos = order[i];
                int repl;
                do {
                    repl = static_cast<int>(uniform_below(rng, vocab_size)) + 1;
                } while (repl == seq[pos]);
                res.items[pos] = repl;
            }
            return res;
        }
        case AugmentStrategy::add: {
            if (count == 0) return {seq, false};
            if (vocab_size == 0)
                throw SamplingError("baseline_augment: empty vocabulary");
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t pos =
                    static_cast<std::size_t>(uniform_below(rng, res.items.size() + 1));
                const int item = static_cast<int>(uniform_below(rng, vocab_size)) + 1;
                res.items.insert(res.items.begin() + static_cast<std::ptrdiff_t>(pos), item);
            }
            return res;
        }
        default:
            throw ConfigError("baseline_augment: strategy must be one of mask, crop, "
                              "replace, add");
    }
}

/// Rewrites a corpus with one of the baseline perturbations, seeded.
inline AugmentedCorpus perturb_corpus(const std::vector<UserSequence>& train_seqs,
                                      AugmentStrategy kind, const AugmentConfig& cfg,
                                      std::size_t vocab_size) {
    Rng rng(stage_seed(cfg.seed, "augment.baseline"));
    AugmentedCorpus out;
    for (const UserSequence& s : train_seqs) {
        AugmentedSequence a;
        a.user = s.user;
        a.original = s.items;
        a.augmented = baseline_augment(s.items, kind, rng, cfg.ratio, vocab_size).items;
        a.generated = 0;
        out.sequences.push_back(std::move(a));
    }
    return out;
}

/// Identity corpus for the `none` strategy.
inline AugmentedCorpus identity_corpus(const std::vector<UserSequence>& train_seqs) {
    AugmentedCorpus out;
    for (const UserSequence& s : train_seqs)
        out.sequences.push_back({s.user, s.items, s.items, 0});
    return out;
}

// ---------------------------------------------------------------------------
// Augmented corpus file: user <TAB> g_u <TAB> item item ...
// The first g_u items of the list are the pseudo-prior prefix.
// ---------------------------------------------------------------------------

inline void write_augmented_file(std::ostream& out, const AugmentedCorpus& corpus) {
    for (const AugmentedSequence& a : corpus.sequences) {
        out << a.user << '\t' << a.generated << '\t';
        for (std::size_t i = 0; i < a.augmented.size(); ++i) {
            if (i) out << ' ';
            out << a.augmented[i];
        }
        out << '\n';
    }
}

inline AugmentedCorpus read_augmented_file(std::istream& in) {
    AugmentedCorpus out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        AugmentedSequence a;
        long long g = 0;
        if (!(ss >> a.user >> g) || g < 0)
            throw DataError("augmented file: bad header fields: " + line);
        int item;
        while (ss >> item) a.augmented.push_back(item);
        a.generated = static_cast<std::size_t>(g);
        if (a.augmented.size() < a.generated)
            throw DataError("augmented file: fewer items than generated count: " + line);
        a.original.assign(a.augmented.begin() + static_cast<std::ptrdiff_t>(a.generated),
                          a.augmented.end());
        out.sequences.push_back(std::move(a));
    }
    return out;
}

}  // namespace bicat
