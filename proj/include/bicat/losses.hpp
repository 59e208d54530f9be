#pragma once

#include <unordered_set>
#include <vector>

#include "bicat/autograd.hpp"
#include "bicat/corpus.hpp"
#include "bicat/encoder.hpp"

namespace bicat {

/// One training view of one sequence: a padded input plus the supervised
/// (position, target, negative) triples that feed the ranking loss.
struct SeqView {
    std::vector<int> padded;             // width-n model input
    std::vector<std::size_t> positions;  // supervised slots, ascending
    std::vector<int> targets;            // positive item per slot
    std::vector<int> negatives;          // sampled negative per slot

    bool supervised() const { return !positions.empty(); }
};

/// Pads `inputs` to width n and records supervision for every kept slot whose
/// target is a real item.  `targets` must parallel `inputs`; a zero target
/// marks an unsupervised slot.
inline SeqView make_view(const std::vector<int>& inputs, const std::vector<int>& targets,
                         std::size_t n) {
    if (inputs.size() != targets.size())
        throw ShapeError("make_view: inputs and targets must align");
    SeqView v;
    v.padded = pad_truncate(inputs, n);
    const std::size_t take = std::min(inputs.size(), n);
    const std::size_t in_off = inputs.size() - take;
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t slot = n - take + i;
        if (v.padded[slot] != 0 && targets[in_off + i] != 0) {
            v.positions.push_back(slot);
            v.targets.push_back(targets[in_off + i]);
        }
    }
    return v;
}

/// Enabled flags over `supervised_count` positions in sequence order: the
/// earliest clip_k are disabled, but the final position always survives.
inline std::vector<char> informative_clip(std::size_t supervised_count, std::size_t clip_k) {
    std::vector<char> mask(supervised_count, 1);
    if (supervised_count == 0) return mask;
    const std::size_t drop = std::min(clip_k, supervised_count - 1);
    for (std::size_t i = 0; i < drop; ++i) mask[i] = 0;
    return mask;
}

inline void apply_clip(SeqView& v, std::size_t clip_k) {
    const std::vector<char> mask = informative_clip(v.positions.size(), clip_k);
    SeqView kept;
    kept.padded = v.padded;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        kept.positions.push_back(v.positions[i]);
        kept.targets.push_back(v.targets[i]);
        if (i < v.negatives.size()) kept.negatives.push_back(v.negatives[i]);
    }
    v = std::move(kept);
}

/// Draws one negative per supervised position, uniform over the vocabulary
/// minus the view's own items.
inline void sample_view_negatives(SeqView& v, std::size_t vocab_size, Rng& rng) {
    std::unordered_set<int> exclude;
    for (int it : v.padded)
        if (it != 0) exclude.insert(it);
    for (int it : v.targets) exclude.insert(it);
    v.negatives = sample_train_negatives(v.positions.size(), exclude, vocab_size, rng);
}

/// -mean over enabled entries of [log sigma(pos) + log(1 - sigma(neg))].
/// The mask marks clipped or padded entries with zero.
inline Val bce_position_loss(Val scores_pos, Val scores_neg, const Tensor& mask) {
    bool any = false;
    for (std::size_t k = 0; k < mask.numel(); ++k)
        if (mask.at(k) != 0.0) any = true;
    if (!any) throw LossError("bce_position_loss: no supervised positions");
    Val per_pos = add(log_sigmoid(scores_pos), log_sigmoid(scale(scores_neg, -1.0)));
    return scale(mean_masked(per_pos, mask), -1.0);
}

struct BatchLossParts {
    Val loss;               // scalar; invalid when count == 0
    std::size_t count = 0;  // supervised positions contributing
};

/// Encodes every supervised view of a batch through one shared graph and
/// reduces the per-position ranking loss over all of them.
inline BatchLossParts batch_bce(Graph& g, std::vector<SeqView>& views, ModelParams& params,
                                const EncoderConfig& cfg, bool train_mode, Rng* rng,
                                std::vector<Val>* hidden_out = nullptr) {
    std::vector<Val> rows;
    std::vector<std::size_t> pos_idx, neg_idx;
    for (SeqView& v : views) {
        if (!v.supervised() && hidden_out == nullptr) continue;
        Val h = encode(g, v.padded, params, cfg, train_mode, rng);
        if (hidden_out != nullptr) hidden_out->push_back(h);
        if (!v.supervised()) continue;
        rows.push_back(gather_rows(h, v.positions));
        for (std::size_t i = 0; i < v.targets.size(); ++i) {
            pos_idx.push_back(static_cast<std::size_t>(v.targets[i]));
            neg_idx.push_back(static_cast<std::size_t>(v.negatives[i]));
        }
    }
    BatchLossParts parts;
    parts.count = pos_idx.size();
    if (parts.count == 0) return parts;
    Val hidden = rows.size() == 1 ? rows[0] : concat_rows(rows);
    Val pos_emb = gather_rows(g.leaf(params.item_table), pos_idx);
    Val neg_emb = gather_rows(g.leaf(params.item_table), neg_idx);
    Val r_pos = rowwise_dot(hidden, pos_emb);
    Val r_neg = rowwise_dot(hidden, neg_emb);
    parts.loss = bce_position_loss(r_pos, r_neg, Tensor::full({parts.count}, 1.0));
    return parts;
}

}  // namespace bicat
