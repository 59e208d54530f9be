#pragma once

#include <boost/rational.hpp>

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "bicat/error.hpp"

#include <nlohmann/json.hpp>

namespace bicat {

using Rational = boost::rational<long long>;

inline std::string to_string(const Rational& r) {
    return std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
}

/// Exact occurrence counts of every contiguous symbol window up to a fixed
/// order.  Each window is counted once per position, so overlapping
/// occurrences all count.
class NgramCounts {
public:
    using Sequence = std::vector<std::string>;

    NgramCounts(const std::vector<Sequence>& sequences, std::size_t max_order = 3)
        : max_order_(max_order) {
        if (max_order_ < 1) throw ConfigError("ngram counts: order must be at least 1");
        for (const Sequence& seq : sequences) {
            for (std::size_t i = 0; i < seq.size(); ++i) {
                alphabet_.insert(seq[i]);
                std::string key;
                for (std::size_t w = 0; w < max_order_ && i + w < seq.size(); ++w) {
                    if (w) key += kSep;
                    key += seq[i + w];
                    ++counts_[key];
                }
                if (i + 1 < seq.size()) ++noninitial_[seq[i + 1]];
            }
        }
    }

    std::size_t max_order() const { return max_order_; }
    const std::set<std::string>& alphabet() const { return alphabet_; }

    long long count(const std::vector<std::string>& window) const {
        if (window.empty())
            throw ConfigError("ngram counts: empty window");
        if (window.size() > max_order_)
            throw ConfigError("ngram counts: window of length " +
                              std::to_string(window.size()) + " exceeds stored order " +
                              std::to_string(max_order_));
        std::string key;
        for (std::size_t i = 0; i < window.size(); ++i) {
            if (i) key += kSep;
            key += window[i];
        }
        auto it = counts_.find(key);
        return it == counts_.end() ? 0 : it->second;
    }

    /// Occurrences of `symbol` that have a predecessor in their sequence.
    long long noninitial_count(const std::string& symbol) const {
        auto it = noninitial_.find(symbol);
        return it == noninitial_.end() ? 0 : it->second;
    }

    /// Total number of adjacent ordered pairs in the corpus.
    long long pair_total() const {
        long long t = 0;
        for (const auto& [sym, c] : noninitial_) t += c;
        return t;
    }

private:
    static constexpr char kSep = '\x1f';
    std::size_t max_order_;
    std::unordered_map<std::string, long long> counts_;
    std::unordered_map<std::string, long long> noninitial_;
    std::set<std::string> alphabet_;
};

/// P_F(next | context) = count(context ++ [next]) / count(context).
inline Rational forward_conditional(const NgramCounts& counts,
                                    const std::vector<std::string>& context,
                                    const std::string& next) {
    const long long denom = counts.count(context);
    if (denom == 0)
        throw UndefinedConditionalError("forward conditional: context never occurs");
    std::vector<std::string> extended = context;
    extended.push_back(next);
    return Rational(counts.count(extended), denom);
}

/// P_R(prev | anchor) = count([prev, anchor]) / #(non-initial occurrences of
/// anchor).
inline Rational reverse_conditional(const NgramCounts& counts, const std::string& anchor,
                                    const std::string& prev) {
    const long long denom = counts.noninitial_count(anchor);
    if (denom == 0)
        throw UndefinedConditionalError("reverse conditional: '" + anchor +
                                        "' never has a predecessor");
    return Rational(counts.count({prev, anchor}), denom);
}

struct ArgmaxChoice {
    std::string symbol;
    Rational probability{0};
    bool tied = false;  // another symbol achieved the same maximum
};

/// The symbol most likely to precede the head of `seq`, by reverse inference.
/// Ties break lexicographically and are flagged.
inline ArgmaxChoice best_reverse_augment(const NgramCounts& counts,
                                         const std::vector<std::string>& seq) {
    if (seq.empty()) throw ConfigError("best_reverse_augment: empty sequence");
    const std::string& head = seq.front();
    ArgmaxChoice best;
    bool found = false;
    for (const std::string& cand : counts.alphabet()) {
        const Rational p = reverse_conditional(counts, head, cand);
        if (!found || p > best.probability) {
            best = {cand, p, false};
            found = true;
        } else if (p == best.probability) {
            best.tied = true;
        }
    }
    if (!found) throw UndefinedConditionalError("best_reverse_augment: no candidates");
    return best;
}

/// The symbol c maximizing P_F(target | [c] ++ seq).  Candidates whose
/// context never occurs are skipped.
inline ArgmaxChoice best_forward_augment(const NgramCounts& counts,
                                         const std::vector<std::string>& seq,
                                         const std::string& target) {
    ArgmaxChoice best;
    bool found = false;
    for (const std::string& cand : counts.alphabet()) {
        std::vector<std::string> ctx;
        ctx.push_back(cand);
        ctx.insert(ctx.end(), seq.begin(), seq.end());
        Rational p;
        try {
            p = forward_conditional(counts, ctx, target);
        } catch (const UndefinedConditionalError&) {
            continue;
        }
        if (!found || p > best.probability) {
            best = {cand, p, false};
            found = true;
        } else if (p == best.probability) {
            best.tied = true;
        }
    }
    if (!found)
        throw UndefinedConditionalError(
            "best_forward_augment: no candidate context occurs in the corpus");
    return best;
}

/// Residual of P(A|B) = P(B|A) P(A) / P(B) over the adjacent-pair event
/// space: P(A) is the share of pairs starting with A, P(B) the share ending
/// with B.  Exactly zero whenever defined.
inline Rational bayes_identity_check(const NgramCounts& counts, const std::string& a,
                                     const std::string& b) {
    if (counts.count({b}) == 0 || counts.count({a}) == 0)
        throw UndefinedConditionalError("bayes check: symbol never occurs");
    long long a_first = 0;
    for (const std::string& y : counts.alphabet()) a_first += counts.count({a, y});
    const long long b_second = counts.noninitial_count(b);
    const long long total = counts.pair_total();
    if (a_first == 0 || b_second == 0 || total == 0)
        throw UndefinedConditionalError("bayes check: zero marginal for '" + a + "' or '" +
                                        b + "'");
    const long long c_ab = counts.count({a, b});
    const Rational p_a_given_b(c_ab, b_second);
    const Rational p_b_given_a(c_ab, a_first);
    const Rational p_a(a_first, total);
    const Rational p_b(b_second, total);
    const Rational reconstructed = p_b_given_a * p_a / p_b;
    return p_a_given_b > reconstructed ? p_a_given_b - reconstructed
                                       : reconstructed - p_a_given_b;
}

/// The quantities behind the reverse-vs-forward augmentation comparison for a
/// one-symbol context and its observed continuation.
struct CounterexampleReport {
    std::string context;
    std::string target;
    Rational forward_before{0};        // P_F(target | context)
    std::string reverse_choice;        // argmax of reverse inference
    Rational forward_after_reverse{0}; // P_F(target | reverse_choice ++ context)
    std::string forward_choice;        // argmax of the forward-constrained pick
    Rational forward_after_forward{0};
    bool reverse_degrades_forward = false;
};

inline CounterexampleReport counterexample_report(const NgramCounts& counts,
                                                  const std::string& context = "C",
                                                  const std::string& target = "A") {
    CounterexampleReport rep;
    rep.context = context;
    rep.target = target;
    rep.forward_before = forward_conditional(counts, {context}, target);
    const ArgmaxChoice rev = best_reverse_augment(counts, {context});
    rep.reverse_choice = rev.symbol;
    rep.forward_after_reverse =
        forward_conditional(counts, {rev.symbol, context}, target);
    const ArgmaxChoice fwd = best_forward_augment(counts, {context}, target);
    rep.forward_choice = fwd.symbol;
    rep.forward_after_forward = fwd.probability;
    rep.reverse_degrades_forward = rep.forward_after_reverse < rep.forward_before;
    return rep;
}

inline nlohmann::ordered_json to_json(const CounterexampleReport& rep) {
    nlohmann::ordered_json j;
    j["context"] = rep.context;
    j["target"] = rep.target;
    j["forward_before"] = to_string(rep.forward_before);
    j["reverse_choice"] = rep.reverse_choice;
    j["forward_after_reverse"] = to_string(rep.forward_after_reverse);
    j["forward_choice"] = rep.forward_choice;
    j["forward_after_forward"] = to_string(rep.forward_after_forward);
    j["reverse_degrades_forward"] = rep.reverse_degrades_forward;
    return j;
}

/// Symbol corpus file: one sequence per line, whitespace-separated symbols.
inline std::vector<NgramCounts::Sequence> read_symbol_corpus(std::istream& in) {
    std::vector<NgramCounts::Sequence> out;
    std::string line;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        NgramCounts::Sequence seq;
        std::string sym;
        while (ss >> sym) seq.push_back(sym);
        if (!seq.empty()) out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace bicat
