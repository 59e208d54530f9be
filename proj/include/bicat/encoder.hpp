#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include "bicat/autograd.hpp"
#include "bicat/corpus.hpp"
#include "bicat/error.hpp"
#include "bicat/rng.hpp"
#include "bicat/tensor.hpp"

namespace bicat {

struct EncoderConfig {
    std::size_t n = 100;     // max sequence length
    std::size_t d = 128;     // embedding size
    std::size_t h = 4;       // attention heads
    std::size_t layers = 2;  // stacked transformer layers
    double dropout = 0.0;    // probability in [0,1)
    // The printed attention temperature is sqrt(d); heads operate in d/h
    // dimensions, so per-head sqrt(d/h) is the default.  Flip to use sqrt(d)
    // literally.
    bool sqrt_d_scale = false;

    void validate() const {
        if (n < 1) throw ConfigError("encoder: n must be at least 1");
        if (layers < 1) throw ConfigError("encoder: layers must be at least 1");
        if (d == 0 || h == 0 || d % h != 0)
            throw ConfigError("encoder: d (" + std::to_string(d) +
                              ") must be divisible by heads (" + std::to_string(h) + ")");
        if (!(dropout >= 0.0 && dropout < 1.0))
            throw ConfigError("encoder: dropout must lie in [0,1)");
    }

    std::size_t head_dim() const { return d / h; }
};

struct LayerParams {
    std::vector<Parameter> wq, wk, wv;  // one [d x d/h] block per head
    Parameter wo;                       // [d x d]
    Parameter w1, b1, w2, b2;           // position-wise feed-forward
    Parameter ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

/// All learnable state of the encoder.  The item table stores one row per
/// item index; row 0 is the padding embedding and is pinned to zero.
struct ModelParams {
    std::size_t vocab_size = 0;  // number of real items; table has vocab_size+1 rows
    Parameter item_table;        // [(V+1) x d]
    Parameter pos_table;         // [n x d]
    std::vector<LayerParams> layers;

    ModelParams(const EncoderConfig& cfg, std::size_t vocab)
        : vocab_size(vocab),
          item_table("item_table", Tensor({vocab + 1, cfg.d})),
          pos_table("pos_table", Tensor({cfg.n, cfg.d})) {
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            LayerParams lp{
                {}, {}, {},
                Parameter(p + "wo", Tensor({cfg.d, cfg.d})),
                Parameter(p + "w1", Tensor({cfg.d, cfg.d})),
                Parameter(p + "b1", Tensor({cfg.d})),
                Parameter(p + "w2", Tensor({cfg.d, cfg.d})),
                Parameter(p + "b2", Tensor({cfg.d})),
                Parameter(p + "ln1_gain", Tensor::full({cfg.d}, 1.0)),
                Parameter(p + "ln1_bias", Tensor({cfg.d})),
                Parameter(p + "ln2_gain", Tensor::full({cfg.d}, 1.0)),
                Parameter(p + "ln2_bias", Tensor({cfg.d})),
            };
            for (std::size_t hh = 0; hh < cfg.h; ++hh) {
                const std::string hp = p + "h" + std::to_string(hh) + ".";
                lp.wq.emplace_back(hp + "wq", Tensor({cfg.d, cfg.head_dim()}));
                lp.wk.emplace_back(hp + "wk", Tensor({cfg.d, cfg.head_dim()}));
                lp.wv.emplace_back(hp + "wv", Tensor({cfg.d, cfg.head_dim()}));
            }
            layers.push_back(std::move(lp));
        }
    }

    /// Seeded init: every weight uniform in [-1/sqrt(d), 1/sqrt(d)], layer
    /// norm gains at 1, biases at 0, padding row pinned to zero.
    static ModelParams init(const EncoderConfig& cfg, std::size_t vocab, std::uint64_t seed) {
        cfg.validate();
        ModelParams mp(cfg, vocab);
        Rng rng(seed);
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
        auto fill = [&](Parameter& p) {
            for (std::size_t k = 0; k < p.value.numel(); ++k)
                p.value.at(k) = uniform_real(rng, -bound, bound);
        };
        fill(mp.item_table);
        fill(mp.pos_table);
        for (LayerParams& lp : mp.layers) {
            for (Parameter& p : lp.wq) fill(p);
            for (Parameter& p : lp.wk) fill(p);
            for (Parameter& p : lp.wv) fill(p);
            fill(lp.wo);
            fill(lp.w1);
            fill(lp.w2);
        }
        mp.zero_padding_row();
        return mp;
    }

    std::vector<Parameter*> all() {
        std::vector<Parameter*> out{&item_table, &pos_table};
        for (LayerParams& lp : layers) {
            for (Parameter& p : lp.wq) out.push_back(&p);
            for (Parameter& p : lp.wk) out.push_back(&p);
            for (Parameter& p : lp.wv) out.push_back(&p);
            out.push_back(&lp.wo);
            out.push_back(&lp.w1);
            out.push_back(&lp.b1);
            out.push_back(&lp.w2);
            out.push_back(&lp.b2);
            out.push_back(&lp.ln1_gain);
            out.push_back(&lp.ln1_bias);
            out.push_back(&lp.ln2_gain);
            out.push_back(&lp.ln2_bias);
        }
        return out;
    }

    void zero_grad() {
        for (Parameter* p : all()) p->zero_grad();
    }

    /// The padding embedding never trains: re-pin after every update.
    void zero_padding_row() {
        const std::size_t d = item_table.value.cols();
        for (std::size_t j = 0; j < d; ++j) {
            item_table.value.at(0, j) = 0.0;
            item_table.grad.at(0, j) = 0.0;
        }
    }

    std::size_t param_count() {
        std::size_t total = 0;
        for (Parameter* p : all()) total += p->value.numel();
        return total;
    }
};

/// Expected parameter count from config arithmetic alone.
inline std::size_t expected_param_count(const EncoderConfig& cfg, std::size_t vocab) {
    const std::size_t d = cfg.d;
    const std::size_t per_layer = 3 * d * d  // per-head q,k,v blocks sum to d*d each
                                  + d * d    // output projection
                                  + 2 * d * d + 2 * d  // feed-forward
                                  + 4 * d;             // two layer norms
    return (vocab + 1) * d + cfg.n * d + cfg.layers * per_layer;
}

namespace detail {

/// Additive attention mask for a width-w padded input: position i may attend
/// to position j iff j <= i and the key at j is a real item.  Padding queries
/// end up fully masked and produce zero attention rows.
inline Tensor causal_padding_mask(const std::vector<int>& padded) {
    const std::size_t w = padded.size();
    const double ninf = -std::numeric_limits<double>::infinity();
    Tensor mask({w, w});
    for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j)
            if (j > i || padded[j] == 0) mask.at(i, j) = ninf;
    return mask;
}

/// Train-time inverted dropout mask; identity at p = 0.
inline Tensor dropout_mask(const std::vector<std::size_t>& shape, double p, Rng& rng) {
    Tensor mask = Tensor::full(shape, 1.0);
    if (p <= 0.0) return mask;
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t k = 0; k < mask.numel(); ++k)
        mask.at(k) = (uniform01(rng) < p) ? 0.0 : keep_scale;
    return mask;
}

}  // namespace detail

/// Sum of item and position embeddings for a padded input of width w <= n.
/// Position rows are taken right-aligned from the table so the most recent
/// item always receives position n-1, regardless of the padded width.
inline Val embed(Graph& g, const std::vector<int>& padded, ModelParams& params,
                 const EncoderConfig& cfg) {
    const std::size_t w = padded.size();
    if (w < 1 || w > cfg.n)
        throw ShapeError("embed: input width " + std::to_string(w) +
                         " outside [1, n=" + std::to_string(cfg.n) + "]");
    std::vector<std::size_t> item_rows, pos_rows;
    item_rows.reserve(w);
    pos_rows.reserve(w);
    for (std::size_t i = 0; i < w; ++i) {
        if (padded[i] < 0 || padded[i] > static_cast<int>(params.vocab_size))
            throw ShapeError("embed: item index " + std::to_string(padded[i]) +
                             " outside [0, " + std::to_string(params.vocab_size) + "]");
        item_rows.push_back(static_cast<std::size_t>(padded[i]));
        pos_rows.push_back(cfg.n - w + i);
    }
    Val items = gather_rows(g.leaf(params.item_table), std::move(item_rows));
    Val pos = gather_rows(g.leaf(params.pos_table), std::move(pos_rows));
    return add(items, pos);
}

/// Scaled dot-product attention over h heads with a fixed additive mask,
/// concatenated and projected by the output matrix.
inline Val multi_head_attention(Graph& g, Val x, LayerParams& layer, const Tensor& mask,
                                const EncoderConfig& cfg) {
    const double width = cfg.sqrt_d_scale ? static_cast<double>(cfg.d)
                                          : static_cast<double>(cfg.head_dim());
    const double inv_temp = 1.0 / std::sqrt(width);
    std::vector<Val> heads;
    heads.reserve(cfg.h);
    for (std::size_t hh = 0; hh < cfg.h; ++hh) {
        Val q = matmul(x, g.leaf(layer.wq[hh]));
        Val k = matmul(x, g.leaf(layer.wk[hh]));
        Val v = matmul(x, g.leaf(layer.wv[hh]));
        Val scores = scale(matmul_nt(q, k), inv_temp);
        Val probs = masked_softmax_rows(scores, mask);
        heads.push_back(matmul(probs, v));
    }
    Val merged = cfg.h == 1 ? heads[0] : concat_cols(heads);
    return matmul(merged, g.leaf(layer.wo));
}

/// Position-wise feed-forward: ReLU(x W1 + b1) W2 + b2, same weights at every
/// position.
inline Val pffn(Graph& g, Val x, LayerParams& layer) {
    Val hidden = relu(add_bias(matmul(x, g.leaf(layer.w1)), g.leaf(layer.b1)));
    return add_bias(matmul(hidden, g.leaf(layer.w2)), g.leaf(layer.b2));
}

/// Full encoder stack.  Per layer: attention sub-layer, dropout (train mode),
/// residual, layer norm; then the feed-forward sub-layer with the same
/// wrapping.  Deterministic in eval mode.
inline Val encode(Graph& g, const std::vector<int>& padded, ModelParams& params,
                  const EncoderConfig& cfg, bool train_mode = false, Rng* rng = nullptr) {
    cfg.validate();
    if (train_mode && cfg.dropout > 0.0 && rng == nullptr)
        throw ConfigError("encode: train mode with dropout needs a generator");
    const Tensor mask = detail::causal_padding_mask(padded);
    auto maybe_dropout = [&](Val v) {
        if (!train_mode || cfg.dropout <= 0.0) return v;
        return mul_const(v, detail::dropout_mask(v.value().shape(), cfg.dropout, *rng));
    };
    Val x = maybe_dropout(embed(g, padded, params, cfg));
    for (LayerParams& layer : params.layers) {
        Val attn = multi_head_attention(g, x, layer, mask, cfg);
        x = layer_norm(add(x, maybe_dropout(attn)), g.leaf(layer.ln1_gain),
                       g.leaf(layer.ln1_bias));
        Val ff = pffn(g, x, layer);
        x = layer_norm(add(x, maybe_dropout(ff)), g.leaf(layer.ln2_gain),
                       g.leaf(layer.ln2_bias));
    }
    return x;
}

/// Relevance of every item at the given hidden rows: scores[i][v] is the dot
/// product with item v's embedding.  Column 0 belongs to padding and must be
/// excluded from ranking by the caller.
inline Val relevance_scores(Graph& g, Val hidden_rows, ModelParams& params) {
    return matmul_nt(hidden_rows, g.leaf(params.item_table));
}

/// Plain-value convenience for inference paths.
inline Tensor relevance(const Tensor& hidden_rows, const ModelParams& params) {
    return matmul_nt(hidden_rows, params.item_table.value);
}

/// Eval-mode hidden states without keeping a caller-visible graph.
inline Tensor encode_eval(const std::vector<int>& padded, ModelParams& params,
                          const EncoderConfig& cfg) {
    Graph g;
    return encode(g, padded, params, cfg, false, nullptr).value();
}

/// Greedy choice over non-padding items from a relevance row, preferring
/// items outside `banned`.  The shared input/output embedding table inflates
/// the score of items already present in the context (their embedding sits in
/// the residual stream), so decoding prefers unseen items and only falls back
/// to the full catalog when nothing else remains.
inline int argmax_item(const Tensor& score_row, std::size_t vocab_size,
                       const std::unordered_set<int>& banned = {}) {
    if (vocab_size == 0) throw GenerationError("argmax_item: empty vocabulary");
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int v = 1; v <= static_cast<int>(vocab_size); ++v) {
        if (banned.count(v) != 0) continue;
        if (score_row.at(0, static_cast<std::size_t>(v)) > best_score) {
            best_score = score_row.at(0, static_cast<std::size_t>(v));
            best = v;
        }
    }
    if (best == 0 && !banned.empty()) return argmax_item(score_row, vocab_size, {});
    if (best == 0) throw GenerationError("argmax_item: no non-padding candidate");
    return best;
}

/// Relevance scores of the final position of a padded input, as a 1 x (V+1)
/// row.
inline Tensor last_position_scores(const std::vector<int>& padded, ModelParams& params,
                                   const EncoderConfig& cfg) {
    const Tensor h = encode_eval(padded, params, cfg);
    const std::size_t last = padded.size() - 1;
    Tensor row({1, h.cols()});
    for (std::size_t j = 0; j < h.cols(); ++j) row.at(0, j) = h.at(last, j);
    return relevance(row, params);
}

/// Greedy next-item choice from the final real position; padding is never a
/// candidate and context items are dispreferred (see argmax_item).
inline int predict_next(const std::vector<int>& padded, ModelParams& params,
                        const EncoderConfig& cfg) {
    std::unordered_set<int> banned;
    for (int v : padded)
        if (v != 0) banned.insert(v);
    return argmax_item(last_position_scores(padded, params, cfg), params.vocab_size,
                       banned);
}

// ---------------------------------------------------------------------------
// Checkpoint archive: config header plus every named tensor, little-endian.
// Round-trips bit-exactly.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kCkptMagic[8] = {'B', 'C', 'K', 'P', 'T', 'v', '0', '1'};

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: truncated stream");
    return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const EncoderConfig& cfg, ModelParams& params) {
    out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    detail::write_pod<std::uint64_t>(out, cfg.n);
    detail::write_pod<std::uint64_t>(out, cfg.d);
    detail::write_pod<std::uint64_t>(out, cfg.h);
    detail::write_pod<std::uint64_t>(out, cfg.layers);
    detail::write_pod<double>(out, cfg.dropout);
    detail::write_pod<std::uint8_t>(out, cfg.sqrt_d_scale ? 1 : 0);
    detail::write_pod<std::uint64_t>(out, params.vocab_size);
    const auto all = params.all();
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(all.size()));
    for (const Parameter* p : all) {
        detail::write_pod<std::uint16_t>(out, static_cast<std::uint16_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(p->value.ndim()));
        for (std::size_t e : p->value.shape()) detail::write_pod<std::uint64_t>(out, e);
        out.write(reinterpret_cast<const char*>(p->value.data().data()),
                  static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    }
    if (!out) throw IoError("checkpoint: write failure");
}

struct Checkpoint {
    EncoderConfig config;
    ModelParams params;
};

inline Checkpoint load_checkpoint(std::istream& in) {
    char magic[sizeof(detail::kCkptMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0)
        throw DataError("checkpoint: bad magic or unsupported version");
    EncoderConfig cfg;
    cfg.n = detail::read_pod<std::uint64_t>(in);
    cfg.d = detail::read_pod<std::uint64_t>(in);
    cfg.h = detail::read_pod<std::uint64_t>(in);
    cfg.layers = detail::read_pod<std::uint64_t>(in);
    cfg.dropout = detail::read_pod<double>(in);
    cfg.sqrt_d_scale = detail::read_pod<std::uint8_t>(in) != 0;
    const std::uint64_t vocab = detail::read_pod<std::uint64_t>(in);
    cfg.validate();

    Checkpoint ck{cfg, ModelParams(cfg, vocab)};
    const auto all = ck.params.all();
    const std::uint32_t count = detail::read_pod<std::uint32_t>(in);
    if (count != all.size())
        throw DataError("checkpoint: expected " + std::to_string(all.size()) +
                        " tensors, found " + std::to_string(count));
    for (Parameter* p : all) {
        const std::uint16_t name_len = detail::read_pod<std::uint16_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (name != p->name)
            throw DataError("checkpoint: tensor '" + name + "' where '" + p->name +
                            "' was expected");
        const std::uint8_t ndim = detail::read_pod<std::uint8_t>(in);
        std::vector<std::size_t> shape(ndim);
        for (std::uint8_t i = 0; i < ndim; ++i)
            shape[i] = detail::read_pod<std::uint64_t>(in);
        if (shape != p->value.shape())
            throw DataError("checkpoint: tensor '" + name + "' has shape " +
                            Tensor::shape_string(shape) + ", expected " +
                            p->value.shape_string());
        in.read(reinterpret_cast<char*>(p->value.data().data()),
                static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated tensor data for '" + name + "'");
    }
    return ck;
}

inline void save_checkpoint_file(const std::string& path, const EncoderConfig& cfg,
                                 ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    save_checkpoint(out, cfg, params);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    return load_checkpoint(in);
}

}  // namespace bicat
