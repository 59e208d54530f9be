#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "bicat/error.hpp"
#include "bicat/rng.hpp"

namespace bicat {

/// One raw user-item event.  Ratings, when present in the input, are dropped.
struct Interaction {
    std::string user;
    std::string item;
    std::int64_t timestamp = 0;
};

/// Bijection between item strings and dense indices in [1, |V|].
/// Index 0 is reserved for padding and never maps to a real item.
class Vocab {
public:
    int add(const std::string& item) {
        auto it = to_index_.find(item);
        if (it != to_index_.end()) return it->second;
        const int idx = static_cast<int>(to_item_.size()) + 1;
        to_index_.emplace(item, idx);
        to_item_.push_back(item);
        return idx;
    }

    int index_of(const std::string& item) const {
        auto it = to_index_.find(item);
        if (it == to_index_.end())
            throw DataError("vocab: unknown item '" + item + "'");
        return it->second;
    }

    const std::string& item_of(int index) const {
        if (index < 1 || index > static_cast<int>(to_item_.size()))
            throw DataError("vocab: index " + std::to_string(index) + " out of range");
        return to_item_[static_cast<std::size_t>(index - 1)];
    }

    bool contains(const std::string& item) const { return to_index_.count(item) != 0; }
    std::size_t size() const { return to_item_.size(); }

private:
    std::unordered_map<std::string, int> to_index_;
    std::vector<std::string> to_item_;
};

/// Chronologically ordered item indices of one user.
struct UserSequence {
    int user = 0;
    std::vector<int> items;
};

/// Leave-one-out split: last item for test, second last for validation.
struct SplitSequence {
    std::vector<int> train;
    int valid = 0;
    int test = 0;

    /// The input fed to the model when scoring the test target.
    std::vector<int> test_input() const {
        std::vector<int> in = train;
        in.push_back(valid);
        return in;
    }
};

struct ColumnFormat {
    char delimiter = ',';
    int user_col = 0;
    int item_col = 1;
    int timestamp_col = 3;  // default order: user,item,rating,timestamp
    int min_columns = 4;

    static ColumnFormat from_spec(const std::string& spec, char delim = ',') {
        ColumnFormat f;
        f.delimiter = delim;
        f.user_col = f.item_col = f.timestamp_col = -1;
        std::stringstream ss(spec);
        std::string field;
        int col = 0;
        while (std::getline(ss, field, ',')) {
            if (field == "user") f.user_col = col;
            else if (field == "item") f.item_col = col;
            else if (field == "timestamp") f.timestamp_col = col;
            else if (field != "rating" && !field.empty())
                throw ConfigError("column format: unknown field '" + field + "'");
            ++col;
        }
        if (f.user_col < 0 || f.item_col < 0 || f.timestamp_col < 0)
            throw ConfigError("column format must name user, item and timestamp: " + spec);
        f.min_columns = col;
        return f;
    }
};

struct ParseResult {
    std::vector<Interaction> interactions;
    std::size_t malformed = 0;
};

/// Parses delimited interaction records.  Malformed lines are counted, not
/// fatal, unless they are the majority of the input.
inline ParseResult parse_interactions(std::istream& in, const ColumnFormat& fmt = {}) {
    if (!in.good()) throw IoError("parse_interactions: unreadable input stream");
    ParseResult res;
    std::string line;
    std::size_t nonempty = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ++nonempty;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, fmt.delimiter)) cols.push_back(field);
        const int needed = std::max({fmt.user_col, fmt.item_col, fmt.timestamp_col}) + 1;
        if (static_cast<int>(cols.size()) < needed) {
            ++res.malformed;
            continue;
        }
        Interaction it;
        it.user = cols[static_cast<std::size_t>(fmt.user_col)];
        it.item = cols[static_cast<std::size_t>(fmt.item_col)];
        const std::string& ts = cols[static_cast<std::size_t>(fmt.timestamp_col)];
        try {
            std::size_t pos = 0;
            it.timestamp = std::stoll(ts, &pos);
            if (pos != ts.size()) throw std::invalid_argument(ts);
        } catch (const std::exception&) {
            ++res.malformed;
            continue;
        }
        if (it.user.empty() || it.item.empty() || it.timestamp < 0) {
            ++res.malformed;
            continue;
        }
        res.interactions.push_back(std::move(it));
    }
    if (in.bad()) throw IoError("parse_interactions: stream read failure");
    if (nonempty > 0 && res.malformed * 2 > nonempty)
        throw DataError("parse_interactions: " + std::to_string(res.malformed) + " of " +
                        std::to_string(nonempty) + " records malformed");
    return res;
}

struct CorpusData {
    Vocab vocab;
    std::vector<UserSequence> sequences;
};

/// Groups interactions by user, orders each user's items by timestamp (ties
/// broken by input order), drops users with fewer than min_len items, and
/// builds the vocabulary over exactly the retained items.
inline CorpusData build_sequences(const std::vector<Interaction>& interactions,
                                  std::size_t min_len = 3) {
    std::vector<std::string> user_order;
    std::unordered_map<std::string, std::vector<std::pair<std::int64_t, std::size_t>>> per_user;
    for (std::size_t i = 0; i < interactions.size(); ++i) {
        const Interaction& it = interactions[i];
        auto [iter, inserted] = per_user.try_emplace(it.user);
        if (inserted) user_order.push_back(it.user);
        iter->second.emplace_back(it.timestamp, i);
    }
    CorpusData out;
    for (const std::string& u : user_order) {
        auto& events = per_user[u];
        if (events.size() < min_len) continue;
        std::stable_sort(events.begin(), events.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        UserSequence seq;
        seq.user = static_cast<int>(out.sequences.size());
        seq.items.reserve(events.size());
        for (const auto& [ts, idx] : events)
            seq.items.push_back(out.vocab.add(interactions[idx].item));
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

inline SplitSequence leave_one_out(const UserSequence& seq) {
    if (seq.items.size() < 3)
        throw SplitError("leave_one_out: sequence of length " +
                         std::to_string(seq.items.size()) + " cannot be split");
    SplitSequence s;
    s.train.assign(seq.items.begin(), seq.items.end() - 2);
    s.valid = seq.items[seq.items.size() - 2];
    s.test = seq.items.back();
    return s;
}

/// Fixed-width view: keep the last n items, or left-pad with 0.
inline std::vector<int> pad_truncate(const std::vector<int>& items, std::size_t n) {
    if (n < 1) throw ShapeError("pad_truncate: n must be positive");
    std::vector<int> out(n, 0);
    const std::size_t take = std::min(items.size(), n);
    for (std::size_t i = 0; i < take; ++i)
        out[n - take + i] = items[items.size() - take + i];
    return out;
}

/// One negative item per supervised position, uniform over the vocabulary
/// excluding every item the exclusion set contains.
inline std::vector<int> sample_train_negatives(std::size_t positions,
                                               const std::unordered_set<int>& exclude,
                                               std::size_t vocab_size, Rng& rng) {
    if (vocab_size <= exclude.size())
        throw SamplingError("sample_train_negatives: vocabulary exhausted (" +
                            std::to_string(vocab_size) + " items, " +
                            std::to_string(exclude.size()) + " excluded)");
    std::vector<int> out;
    out.reserve(positions);
    for (std::size_t i = 0; i < positions; ++i) {
        int neg;
        do {
            neg = static_cast<int>(uniform_below(rng, vocab_size)) + 1;
        } while (exclude.count(neg) != 0);
        out.push_back(neg);
    }
    return out;
}

/// Ground-truth item plus `count` distinct never-interacted items, in a
/// seeded random order.
inline std::vector<int> sample_eval_candidates(const std::vector<int>& history, int truth,
                                               std::size_t vocab_size, Rng& rng,
                                               std::size_t count = 100) {
    std::unordered_set<int> seen(history.begin(), history.end());
    seen.insert(truth);
    std::vector<int> pool;
    pool.reserve(vocab_size);
    for (int v = 1; v <= static_cast<int>(vocab_size); ++v)
        if (seen.count(v) == 0) pool.push_back(v);
    if (pool.size() < count)
        throw SamplingError("sample_eval_candidates: only " + std::to_string(pool.size()) +
                            " non-interacted items available, need " + std::to_string(count));
    // Partial Fisher-Yates for the first `count` slots.
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    std::vector<int> cands(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
    cands.push_back(truth);
    shuffle_inplace(cands, rng);
    return cands;
}

// ---------------------------------------------------------------------------
// Corpus artifact files.
// ---------------------------------------------------------------------------

inline void write_sequences_file(std::ostream& out, const std::vector<UserSequence>& seqs) {
    for (const UserSequence& s : seqs) {
        out << s.user << '\t';
        for (std::size_t i = 0; i < s.items.size(); ++i) {
            if (i) out << ' ';
            out << s.items[i];
        }
        out << '\n';
    }
}

inline std::vector<UserSequence> read_sequences_file(std::istream& in) {
    std::vector<UserSequence> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        UserSequence s;
        if (!(ss >> s.user)) throw DataError("sequences file: bad user field: " + line);
        int item;
        while (ss >> item) s.items.push_back(item);
        if (s.items.empty()) throw DataError("sequences file: empty sequence: " + line);
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_vocab_file(std::ostream& out, const Vocab& vocab) {
    for (int i = 1; i <= static_cast<int>(vocab.size()); ++i)
        out << vocab.item_of(i) << '\t' << i << '\n';
}

inline Vocab read_vocab_file(std::istream& in) {
    Vocab v;
    std::string line;
    int expected = 1;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("vocab file: missing tab: " + line);
        const std::string item = line.substr(0, tab);
        const int idx = std::stoi(line.substr(tab + 1));
        if (idx != expected)
            throw DataError("vocab file: indices must be dense from 1, got " + line);
        v.add(item);
        ++expected;
    }
    return v;
}

}  // namespace bicat
