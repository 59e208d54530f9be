#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bicat/losses.hpp"
#include "bicat/optim.hpp"

namespace bicat {

struct PretrainConfig {
    double lambda = 0.4;  // weight of the forward learning constraint
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // epochs between periodic checkpoints; 0 = none
    bool forward_last_only = false;    // supervise only the final forward position
    std::size_t clip_k = 0;            // early-position clipping (off by default here)

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw ConfigError("pretrain: lambda must be finite and non-negative");
        if (batch_size < 1) throw ConfigError("pretrain: batch size must be positive");
        if (!std::isfinite(lr) || lr < 0.0)
            throw ConfigError("pretrain: learning rate must be finite and non-negative");
    }
};

/// Paired inputs of one pre-training step: the mirrored sequences with their
/// past-direction targets, and the shifted pseudo-prior views with their
/// future-direction targets.
struct DirectionalBatch {
    std::vector<SeqView> reverse;
    std::vector<SeqView> forward;  // stays empty when lambda == 0
};

inline std::vector<int> reverse_sequence(std::vector<int> items) {
    std::reverse(items.begin(), items.end());
    return items;
}

namespace detail {

/// Mirror input with next-older targets; the final slot (the sequence's first
/// item) has nothing left to predict and stays unsupervised.
inline SeqView make_reverse_view(const std::vector<int>& seq, std::size_t n) {
    std::vector<int> mirror = reverse_sequence(seq);
    std::vector<int> targets(mirror.size(), 0);
    for (std::size_t i = 0; i + 1 < mirror.size(); ++i) targets[i] = mirror[i + 1];
    return make_view(mirror, targets, n);
}

/// Pseudo-prior view: v0 prepended, the final original item moved into the
/// target row, every shifted slot supervised (or only the last, behind the
/// flag).
inline SeqView make_forward_view(const std::vector<int>& seq, int v0, std::size_t n,
                                 bool last_only) {
    std::vector<int> inputs;
    inputs.push_back(v0);
    inputs.insert(inputs.end(), seq.begin(), seq.end() - 1);
    std::vector<int> targets(seq.begin(), seq.end());
    if (last_only)
        for (std::size_t i = 0; i + 1 < targets.size(); ++i) targets[i] = 0;
    return make_view(inputs, targets, n);
}

inline int greedy_from_hidden(const Tensor& h, std::size_t slot, ModelParams& params,
                              const std::vector<int>& context) {
    Tensor row({1, h.cols()});
    for (std::size_t j = 0; j < h.cols(); ++j) row.at(0, j) = h.at(slot, j);
    const Tensor scores = relevance(row, params);
    std::unordered_set<int> banned;
    for (int v : context)
        if (v != 0) banned.insert(v);
    return argmax_item(scores, params.vocab_size, banned);
}

}  // namespace detail

/// Materializes both directional views of a batch at the current parameters,
/// with the pseudo-prior slot filled by the model's greedy reverse prediction
/// in eval mode.  Used by loss evaluation and the gradient checks; the
/// training step fuses the prediction into its own forward pass instead.
inline DirectionalBatch build_directional_batch(const std::vector<std::vector<int>>& seqs,
                                                ModelParams& params, const EncoderConfig& enc,
                                                const PretrainConfig& cfg, Rng& rng) {
    DirectionalBatch batch;
    for (const std::vector<int>& seq : seqs) {
        if (seq.empty()) continue;
        SeqView rev = detail::make_reverse_view(seq, enc.n);
        apply_clip(rev, cfg.clip_k);
        if (rev.supervised()) sample_view_negatives(rev, params.vocab_size, rng);
        batch.reverse.push_back(std::move(rev));
        if (cfg.lambda != 0.0) {
            const int v0 = predict_next(pad_truncate(reverse_sequence(seq), enc.n), params, enc);
            SeqView fwd = detail::make_forward_view(seq, v0, enc.n, cfg.forward_last_only);
            apply_clip(fwd, cfg.clip_k);
            if (fwd.supervised()) sample_view_negatives(fwd, params.vocab_size, rng);
            batch.forward.push_back(std::move(fwd));
        }
    }
    return batch;
}

struct PretrainStepResult {
    double loss_reverse = 0.0;
    double loss_forward = 0.0;
    double loss_total = 0.0;
    bool stepped = false;
};

/// Loss of a frozen directional batch at the current parameters;
/// L = L_reverse + lambda * L_forward.  With with_grad the gradients are left
/// in the parameters.
inline PretrainStepResult pretrain_loss(DirectionalBatch& batch, ModelParams& params,
                                        const EncoderConfig& enc, double lambda,
                                        bool with_grad = false) {
    Graph g;
    PretrainStepResult res;
    BatchLossParts rev = batch_bce(g, batch.reverse, params, enc, false, nullptr);
    Val total;
    if (rev.count > 0) {
        res.loss_reverse = rev.loss.value().at(0);
        total = rev.loss;
    }
    if (lambda != 0.0 && !batch.forward.empty()) {
        BatchLossParts fwd = batch_bce(g, batch.forward, params, enc, false, nullptr);
        if (fwd.count > 0) {
            res.loss_forward = fwd.loss.value().at(0);
            Val weighted = scale(fwd.loss, lambda);
            total = total.valid() ? add(total, weighted) : weighted;
        }
    }
    if (!total.valid()) throw LossError("pretrain_loss: batch has no supervised positions");
    res.loss_total = total.value().at(0);
    if (with_grad) g.backward(total);
    return res;
}

/// One gradient step on L_reverse + lambda * L_forward through a single
/// shared encoder.  The pseudo-prior item of each forward view is the greedy
/// prediction read off the same reverse pass that produced the reverse loss,
/// with no gradient through the discrete choice.  With lambda == 0 the
/// forward side is skipped entirely and the step is pure reverse training.
inline PretrainStepResult pretrain_step(const std::vector<std::vector<int>>& seqs,
                                        ModelParams& params, const EncoderConfig& enc,
                                        const PretrainConfig& cfg, Adam& opt, Rng& rng,
                                        std::size_t step_index) {
    Graph g;
    PretrainStepResult res;

    std::vector<SeqView> rev_views;
    std::vector<const std::vector<int>*> kept;
    for (const std::vector<int>& seq : seqs) {
        if (seq.empty()) continue;
        SeqView rev = detail::make_reverse_view(seq, enc.n);
        apply_clip(rev, cfg.clip_k);
        if (rev.supervised()) sample_view_negatives(rev, params.vocab_size, rng);
        rev_views.push_back(std::move(rev));
        kept.push_back(&seq);
    }
    std::vector<Val> rev_hidden;
    BatchLossParts rev =
        batch_bce(g, rev_views, params, enc, true, &rng, &rev_hidden);

    Val total;
    if (rev.count > 0) {
        res.loss_reverse = rev.loss.value().at(0);
        total = rev.loss;
    }

    if (cfg.lambda != 0.0) {
        std::vector<SeqView> fwd_views;
        for (std::size_t s = 0; s < kept.size(); ++s) {
            const int v0 =
                detail::greedy_from_hidden(rev_hidden[s].value(), enc.n - 1, params, *kept[s]);
            SeqView fwd = detail::make_forward_view(*kept[s], v0, enc.n, cfg.forward_last_only);
            apply_clip(fwd, cfg.clip_k);
            if (fwd.supervised()) sample_view_negatives(fwd, params.vocab_size, rng);
            fwd_views.push_back(std::move(fwd));
        }
        BatchLossParts fwd = batch_bce(g, fwd_views, params, enc, true, &rng);
        if (fwd.count > 0) {
            res.loss_forward = fwd.loss.value().at(0);
            Val weighted = scale(fwd.loss, cfg.lambda);
            total = total.valid() ? add(total, weighted) : weighted;
        }
    }

    if (!total.valid()) return res;  // nothing supervised in this batch
    res.loss_total = total.value().at(0);
    if (!std::isfinite(res.loss_total))
        throw DivergenceError("pretrain: non-finite loss", step_index);
    g.backward(total);
    opt.step();
    params.zero_padding_row();
    res.stepped = true;
    return res;
}

struct EpochTrace {
    double loss_reverse = 0.0;
    double loss_forward = 0.0;
    double loss_total = 0.0;
};

struct TrainCallbacks {
    // Called after each epoch with the epoch index (0-based) and its means.
    std::function<void(std::size_t, const EpochTrace&)> on_epoch;
};

/// Epoch loop with seeded shuffling.  Returns per-epoch mean losses.
inline std::vector<EpochTrace> run_pretrain(const std::vector<std::vector<int>>& train_seqs,
                                            ModelParams& params, const EncoderConfig& enc,
                                            const PretrainConfig& cfg,
                                            const TrainCallbacks& callbacks = {}) {
    cfg.validate();
    enc.validate();
    Adam opt(params.all(), cfg.lr);
    Rng order_rng(stage_seed(cfg.seed, "pretrain.order"));
    Rng step_rng(stage_seed(cfg.seed, "pretrain.step"));
    std::vector<std::size_t> idx(train_seqs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    std::vector<EpochTrace> trace;
    std::size_t step_index = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_inplace(idx, order_rng);
        EpochTrace et;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(start + cfg.batch_size, idx.size());
            std::vector<std::vector<int>> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(train_seqs[idx[i]]);
            PretrainStepResult r =
                pretrain_step(batch, params, enc, cfg, opt, step_rng, step_index++);
            if (!r.stepped) continue;
            et.loss_reverse += r.loss_reverse;
            et.loss_forward += r.loss_forward;
            et.loss_total += r.loss_total;
            ++steps;
        }
        if (steps > 0) {
            et.loss_reverse /= static_cast<double>(steps);
            et.loss_forward /= static_cast<double>(steps);
            et.loss_total /= static_cast<double>(steps);
        }
        trace.push_back(et);
        if (callbacks.on_epoch) callbacks.on_epoch(epoch, et);
    }
    return trace;
}

}  // namespace bicat
