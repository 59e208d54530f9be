#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bicat/augment.hpp"
#include "bicat/losses.hpp"
#include "bicat/optim.hpp"

namespace bicat {

struct FinetuneConfig {
    double alpha = 1.0;     // weight of the distillation term
    std::size_t clip_k = 8; // early supervised positions removed per sequence
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool retrain_from_scratch = false;  // skip the pre-trained checkpoint
    std::size_t kl_sample = 0;          // 0 = full vocabulary distributions

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha))
            throw ConfigError("finetune: alpha must be finite and non-negative");
        if (batch_size < 1) throw ConfigError("finetune: batch size must be positive");
        if (!std::isfinite(lr) || lr < 0.0)
            throw ConfigError("finetune: learning rate must be finite and non-negative");
    }
};

/// One user's pair of training views.  Both views are right-aligned to width
/// n, so the aligned distillation slots coincide: the last `kl_count` slots
/// of each view hold the same trailing items.
struct DualView {
    SeqView aug;                  // clipped next-item supervision on the augmented view
    std::vector<int> org_padded;  // original view input (distillation only)
    std::size_t kl_count = 0;     // aligned positions, matched from the end backwards
};

struct DualBatch {
    std::vector<DualView> views;
};

/// Builds the paired views for a batch of augmented sequences.  Negatives are
/// drawn only for the clipped supervision of the augmented view; the original
/// view participates through the distillation term alone.
inline DualBatch build_dual_batch(const std::vector<const AugmentedSequence*>& seqs,
                                  std::size_t vocab_size, const EncoderConfig& enc,
                                  const FinetuneConfig& cfg, Rng& rng) {
    DualBatch batch;
    for (const AugmentedSequence* s : seqs) {
        if (s->augmented.size() < 2) continue;  // nothing to supervise
        DualView dv;
        std::vector<int> inputs(s->augmented.begin(), s->augmented.end() - 1);
        std::vector<int> targets(s->augmented.begin() + 1, s->augmented.end());
        dv.aug = make_view(inputs, targets, enc.n);
        apply_clip(dv.aug, cfg.clip_k);
        if (dv.aug.supervised()) sample_view_negatives(dv.aug, vocab_size, rng);
        if (cfg.alpha != 0.0 && s->original.size() >= 2) {
            std::vector<int> org_inputs(s->original.begin(), s->original.end() - 1);
            dv.org_padded = pad_truncate(org_inputs, enc.n);
            const std::size_t aug_real = std::min(inputs.size(), enc.n);
            const std::size_t org_real = std::min(org_inputs.size(), enc.n);
            dv.kl_count = std::min(aug_real, org_real);
        }
        batch.views.push_back(std::move(dv));
    }
    return batch;
}

/// Per-position probability vectors over the real items (padding excluded) at
/// the given slots of an encoded view.
inline Tensor prediction_distribution(const std::vector<int>& padded,
                                      const std::vector<std::size_t>& positions,
                                      ModelParams& params, const EncoderConfig& enc) {
    const Tensor h = encode_eval(padded, params, enc);
    Tensor rows({positions.size(), enc.d});
    for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t j = 0; j < enc.d; ++j) rows.at(i, j) = h.at(positions[i], j);
    const Tensor scores = relevance(rows, params);
    Tensor real({positions.size(), params.vocab_size});
    for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t v = 0; v < params.vocab_size; ++v)
            real.at(i, v) = scores.at(i, v + 1);
    return softmax_rows(real);
}

/// Symmetric Kullback-Leibler divergence between two stacks of aligned
/// probability rows, averaged over rows, with probabilities clamped at 1e-12
/// inside the logarithms.
inline double bidirectional_kl(const Tensor& p1, const Tensor& p2) {
    if (p1.ndim() != 2 || p2.ndim() != 2 || !p1.same_shape(p2))
        throw ShapeError("bidirectional_kl: distributions are not aligned, " +
                         p1.shape_string() + " vs " + p2.shape_string());
    const double eps = 1e-12;
    const std::size_t m = p1.rows(), k = p1.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double d12 = 0.0, d21 = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double a = p1.at(i, j), b = p2.at(i, j);
            const double la = std::log(std::max(a, eps)), lb = std::log(std::max(b, eps));
            d12 += a * (la - lb);
            d21 += b * (lb - la);
        }
        total += 0.5 * (d12 + d21);
    }
    return total / static_cast<double>(m);
}

namespace detail {

/// Recorded symmetric KL between two logit stacks, averaged over rows.
inline Val sym_kl_rows(Val logits1, Val logits2) {
    const std::size_t m = logits1.value().rows();
    Val lp1 = log_softmax_rows(logits1);
    Val lp2 = log_softmax_rows(logits2);
    Val p1 = exp_elem(lp1);
    Val p2 = exp_elem(lp2);
    Val d12 = sum_all(mul(p1, sub(lp1, lp2)));
    Val d21 = sum_all(mul(p2, sub(lp2, lp1)));
    return scale(add(d12, d21), 0.5 / static_cast<double>(m));
}

/// Item rows participating in the distillation distributions: the whole
/// vocabulary minus padding, or a seeded sample of it.
inline std::vector<std::size_t> kl_item_rows(std::size_t vocab_size, std::size_t sample,
                                             Rng& rng) {
    std::vector<std::size_t> rows;
    if (sample == 0 || sample >= vocab_size) {
        rows.resize(vocab_size);
        for (std::size_t v = 0; v < vocab_size; ++v) rows[v] = v + 1;
        return rows;
    }
    std::vector<std::size_t> pool(vocab_size);
    for (std::size_t v = 0; v < vocab_size; ++v) pool[v] = v + 1;
    for (std::size_t i = 0; i < sample; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(uniform_below(rng, pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    rows.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(sample));
    std::sort(rows.begin(), rows.end());
    return rows;
}

}  // namespace detail

struct FinetuneStepResult {
    double loss_bce = 0.0;
    double loss_kl = 0.0;
    double loss_total = 0.0;
    bool stepped = false;
};

/// Loss of a frozen dual batch at the current parameters (eval-mode encoder);
/// with_grad leaves gradients in the parameters.  alpha == 0 never touches
/// the distillation graph.
inline FinetuneStepResult finetune_loss(DualBatch& batch, ModelParams& params,
                                        const EncoderConfig& enc, double alpha,
                                        bool with_grad = false, std::size_t kl_sample = 0,
                                        Rng* kl_rng = nullptr) {
    Graph g;
    FinetuneStepResult res;
    std::vector<Val> aug_hidden;
    std::vector<SeqView> flat;
    flat.reserve(batch.views.size());
    for (DualView& dv : batch.views) flat.push_back(dv.aug);
    BatchLossParts bce = batch_bce(g, flat, params, enc, false, nullptr,
                                   alpha != 0.0 ? &aug_hidden : nullptr);
    Val total;
    if (bce.count > 0) {
        res.loss_bce = bce.loss.value().at(0);
        total = bce.loss;
    }

    if (alpha != 0.0) {
        Rng dummy(0);
        const std::vector<std::size_t> item_rows = detail::kl_item_rows(
            params.vocab_size, kl_sample, kl_rng != nullptr ? *kl_rng : dummy);
        std::vector<Val> aug_rows, org_rows;
        for (std::size_t i = 0; i < batch.views.size(); ++i) {
            DualView& dv = batch.views[i];
            if (dv.kl_count == 0) continue;
            std::vector<std::size_t> slots;
            for (std::size_t s = enc.n - dv.kl_count; s < enc.n; ++s) slots.push_back(s);
            aug_rows.push_back(gather_rows(aug_hidden[i], slots));
            Val org_h = encode(g, dv.org_padded, params, enc, false, nullptr);
            org_rows.push_back(gather_rows(org_h, slots));
        }
        if (!aug_rows.empty()) {
            Val ha = aug_rows.size() == 1 ? aug_rows[0] : concat_rows(aug_rows);
            Val ho = org_rows.size() == 1 ? org_rows[0] : concat_rows(org_rows);
            Val table = gather_rows(g.leaf(params.item_table), item_rows);
            Val s1 = matmul_nt(ha, table);
            Val s2 = matmul_nt(ho, table);
            Val kl = detail::sym_kl_rows(s1, s2);
            res.loss_kl = kl.value().at(0);
            Val weighted = scale(kl, alpha);
            total = total.valid() ? add(total, weighted) : weighted;
        }
    }
    if (!total.valid()) throw LossError("finetune_loss: batch has no supervised positions");
    res.loss_total = total.value().at(0);
    if (with_grad) g.backward(total);
    return res;
}

/// One gradient step on L_BCE(augmented view) + alpha * L_KL(augmented vs
/// original view).  Gradient flows through both distributions.  With
/// alpha == 0 the step is exactly the plain clipped ranking-loss step: the
/// original views are neither encoded nor recorded.
inline FinetuneStepResult finetune_step(DualBatch& batch, ModelParams& params,
                                        const EncoderConfig& enc, const FinetuneConfig& cfg,
                                        Adam& opt, Rng& rng, std::size_t step_index) {
    Graph g;
    FinetuneStepResult res;
    std::vector<Val> aug_hidden;
    std::vector<SeqView> flat;
    flat.reserve(batch.views.size());
    for (DualView& dv : batch.views) flat.push_back(dv.aug);
    BatchLossParts bce = batch_bce(g, flat, params, enc, true, &rng,
                                   cfg.alpha != 0.0 ? &aug_hidden : nullptr);
    Val total;
    if (bce.count > 0) {
        res.loss_bce = bce.loss.value().at(0);
        total = bce.loss;
    }

    if (cfg.alpha != 0.0) {
        const std::vector<std::size_t> item_rows =
            detail::kl_item_rows(params.vocab_size, cfg.kl_sample, rng);
        std::vector<Val> aug_rows, org_rows;
        for (std::size_t i = 0; i < batch.views.size(); ++i) {
            DualView& dv = batch.views[i];
            if (dv.kl_count == 0) continue;
            std::vector<std::size_t> slots;
            for (std::size_t s = enc.n - dv.kl_count; s < enc.n; ++s) slots.push_back(s);
            aug_rows.push_back(gather_rows(aug_hidden[i], slots));
            Val org_h = encode(g, dv.org_padded, params, enc, true, &rng);
            org_rows.push_back(gather_rows(org_h, slots));
        }
        if (!aug_rows.empty()) {
            Val ha = aug_rows.size() == 1 ? aug_rows[0] : concat_rows(aug_rows);
            Val ho = org_rows.size() == 1 ? org_rows[0] : concat_rows(org_rows);
            Val table = gather_rows(g.leaf(params.item_table), item_rows);
            Val s1 = matmul_nt(ha, table);
            Val s2 = matmul_nt(ho, table);
            Val kl = detail::sym_kl_rows(s1, s2);
            res.loss_kl = kl.value().at(0);
            Val weighted = scale(kl, cfg.alpha);
            total = total.valid() ? add(total, weighted) : weighted;
        }
    }

    if (!total.valid()) return res;
    res.loss_total = total.value().at(0);
    if (!std::isfinite(res.loss_total))
        throw DivergenceError("finetune: non-finite loss", step_index);
    g.backward(total);
    opt.step();
    params.zero_padding_row();
    res.stepped = true;
    return res;
}

struct FinetuneEpochTrace {
    double loss_bce = 0.0;
    double loss_kl = 0.0;
    double loss_total = 0.0;
};

/// Epoch loop over the augmented corpus, both views sampled per user.
inline std::vector<FinetuneEpochTrace> run_finetune(const AugmentedCorpus& corpus,
                                                    ModelParams& params,
                                                    const EncoderConfig& enc,
                                                    const FinetuneConfig& cfg,
                                                    const TrainCallbacks& callbacks = {}) {
    cfg.validate();
    enc.validate();
    Adam opt(params.all(), cfg.lr);
    Rng order_rng(stage_seed(cfg.seed, "finetune.order"));
    Rng step_rng(stage_seed(cfg.seed, "finetune.step"));
    std::vector<std::size_t> idx(corpus.sequences.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    std::vector<FinetuneEpochTrace> trace;
    std::size_t step_index = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_inplace(idx, order_rng);
        FinetuneEpochTrace et;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(start + cfg.batch_size, idx.size());
            std::vector<const AugmentedSequence*> seqs;
            for (std::size_t i = start; i < stop; ++i)
                seqs.push_back(&corpus.sequences[idx[i]]);
            DualBatch batch = build_dual_batch(seqs, params.vocab_size, enc, cfg, step_rng);
            FinetuneStepResult r =
                finetune_step(batch, params, enc, cfg, opt, step_rng, step_index++);
            if (!r.stepped) continue;
            et.loss_bce += r.loss_bce;
            et.loss_kl += r.loss_kl;
            et.loss_total += r.loss_total;
            ++steps;
        }
        if (steps > 0) {
            et.loss_bce /= static_cast<double>(steps);
            et.loss_kl /= static_cast<double>(steps);
            et.loss_total /= static_cast<double>(steps);
        }
        trace.push_back(et);
        if (callbacks.on_epoch) {
            EpochTrace compat{et.loss_bce, et.loss_kl, et.loss_total};
            callbacks.on_epoch(epoch, compat);
        }
    }
    return trace;
}

}  // namespace bicat
