#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bicat/pretrain.hpp"

using namespace bicat;

namespace {

EncoderConfig toy_encoder(std::size_t n = 8, std::size_t d = 8, std::size_t h = 2,
                          std::size_t layers = 1) {
    EncoderConfig cfg;
    cfg.n = n;
    cfg.d = d;
    cfg.h = h;
    cfg.layers = layers;
    cfg.dropout = 0.0;
    return cfg;
}

std::vector<std::vector<int>> toy_corpus() {
    return {{1, 2, 3}, {2, 3, 4}, {3, 4, 5, 6}};
}

}  // namespace

TEST_CASE("reverse_sequence mirrors and is an involution") {
    CHECK(reverse_sequence({1, 2, 3}) == std::vector<int>{3, 2, 1});
    CHECK(reverse_sequence({}) == std::vector<int>{});

    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<int> v;
        const std::size_t len = uniform_below(rng, 15);
        for (std::size_t i = 0; i < len; ++i)
            v.push_back(static_cast<int>(uniform_below(rng, 100)));
        CHECK(reverse_sequence(reverse_sequence(v)) == v);
    }
}

TEST_CASE("bce_position_loss formula cases") {
    SECTION("saturated scores drive the loss to zero") {
        Graph g;
        Val pos = g.constant(Tensor({2}, {50.0, 60.0}));
        Val neg = g.constant(Tensor({2}, {-55.0, -70.0}));
        Val loss = bce_position_loss(pos, neg, Tensor::full({2}, 1.0));
        CHECK(loss.value().at(0) == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("zero scores give 2 log 2 per position") {
        Graph g;
        Val pos = g.constant(Tensor({3}));
        Val neg = g.constant(Tensor({3}));
        Val loss = bce_position_loss(pos, neg, Tensor::full({3}, 1.0));
        CHECK(loss.value().at(0) == Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    }
    SECTION("random scores match an extended-precision evaluation") {
        Rng rng(17);
        const std::size_t m = 9;
        Tensor pos({m}), neg({m}), mask({m});
        long double expect = 0.0L;
        std::size_t enabled = 0;
        for (std::size_t i = 0; i < m; ++i) {
            pos.at(i) = uniform_real(rng, -4.0, 4.0);
            neg.at(i) = uniform_real(rng, -4.0, 4.0);
            mask.at(i) = (i % 3 == 0) ? 0.0 : 1.0;
            if (mask.at(i) != 0.0) {
                const long double sp = 1.0L / (1.0L + std::exp(-(long double)pos.at(i)));
                const long double sn = 1.0L / (1.0L + std::exp(-(long double)neg.at(i)));
                expect += -(std::log(sp) + std::log(1.0L - sn));
                ++enabled;
            }
        }
        expect /= static_cast<long double>(enabled);
        Graph g;
        Val loss = bce_position_loss(g.constant(pos), g.constant(neg), mask);
        CHECK(std::abs(loss.value().at(0) - static_cast<double>(expect)) < 1e-10);
    }
    SECTION("empty mask is an error") {
        Graph g;
        Val pos = g.constant(Tensor({2}));
        Val neg = g.constant(Tensor({2}));
        CHECK_THROWS_AS(bce_position_loss(pos, neg, Tensor({2})), LossError);
    }
}

TEST_CASE("directional views honor the mirror and shift constructions") {
    const std::vector<int> seq{1, 2, 3};
    SeqView rev = detail::make_reverse_view(seq, 5);
    CHECK(rev.padded == std::vector<int>{0, 0, 3, 2, 1});
    // Supervision follows next-older items; the oldest item has no target.
    CHECK(rev.positions == std::vector<std::size_t>{2, 3});
    CHECK(rev.targets == std::vector<int>{2, 1});

    SeqView fwd = detail::make_forward_view(seq, 9, 5, false);
    CHECK(fwd.padded == std::vector<int>{0, 0, 9, 1, 2});
    CHECK(fwd.positions == std::vector<std::size_t>{2, 3, 4});
    CHECK(fwd.targets == std::vector<int>{1, 2, 3});

    SeqView fwd_last = detail::make_forward_view(seq, 9, 5, true);
    CHECK(fwd_last.positions == std::vector<std::size_t>{4});
    CHECK(fwd_last.targets == std::vector<int>{3});
}

TEST_CASE("informative_clip keeps at least the final position") {
    CHECK(informative_clip(4, 0) == std::vector<char>{1, 1, 1, 1});
    CHECK(informative_clip(4, 2) == std::vector<char>{0, 0, 1, 1});
    CHECK(informative_clip(1, 8) == std::vector<char>{1});
    CHECK(informative_clip(2, 8) == std::vector<char>{0, 1});
    // Monotonicity: positions enabled at clip_k+1 are a subset of clip_k.
    for (std::size_t count = 1; count <= 6; ++count) {
        for (std::size_t k = 0; k + 1 <= 8; ++k) {
            auto a = informative_clip(count, k);
            auto b = informative_clip(count, k + 1);
            for (std::size_t i = 0; i < count; ++i)
                if (b[i]) CHECK(a[i]);
        }
    }
}

TEST_CASE("lambda zero reduces the step to reverse-only training") {
    EncoderConfig enc = toy_encoder();
    ModelParams params = ModelParams::init(enc, 6, 5);
    PretrainConfig cfg;
    cfg.lambda = 0.0;
    cfg.lr = 1e-3;
    Adam opt(params.all(), cfg.lr);
    Rng rng(4);
    PretrainStepResult r = pretrain_step(toy_corpus(), params, enc, cfg, opt, rng, 0);
    CHECK(r.stepped);
    CHECK(r.loss_forward == 0.0);
    CHECK(r.loss_total == r.loss_reverse);
}

TEST_CASE("total pre-training loss is affine in lambda") {
    EncoderConfig enc = toy_encoder();
    ModelParams params = ModelParams::init(enc, 6, 5);
    PretrainConfig cfg;
    cfg.lambda = 1.0;  // so the batch materializes forward views
    Rng rng(6);
    DirectionalBatch batch = build_directional_batch(toy_corpus(), params, enc, cfg, rng);
    const double l0 = pretrain_loss(batch, params, enc, 0.0).loss_total;
    const double l1 = pretrain_loss(batch, params, enc, 1.0).loss_total;
    const double l2 = pretrain_loss(batch, params, enc, 2.0).loss_total;
    const double forward = pretrain_loss(batch, params, enc, 1.0).loss_forward;
    CHECK(l1 == Catch::Approx(l0 + forward).epsilon(1e-12));
    CHECK(l2 == Catch::Approx(l0 + 2.0 * forward).epsilon(1e-12));
}

TEST_CASE("gradient of a one-position ranking loss passes finite differences") {
    EncoderConfig enc = toy_encoder(2, 4, 1, 1);
    ModelParams params = ModelParams::init(enc, 3, 9);
    // One item, one supervised position.
    SeqView view = make_view({1}, {2}, enc.n);
    view.negatives = {3};
    auto loss = [&](bool with_grad) {
        Graph g;
        std::vector<SeqView> views{view};
        BatchLossParts parts = batch_bce(g, views, params, enc, false, nullptr);
        if (with_grad) g.backward(parts.loss);
        return parts.loss.value().at(0);
    };
    CHECK(grad_check(loss, params.all(), 1e-5) < 1e-4);
}

TEST_CASE("gradient of the combined pre-training loss passes finite differences") {
    EncoderConfig enc = toy_encoder(4, 4, 2, 1);
    ModelParams params = ModelParams::init(enc, 6, 13);
    PretrainConfig cfg;
    cfg.lambda = 0.4;
    Rng rng(8);
    DirectionalBatch batch =
        build_directional_batch({{1, 2, 3}, {4, 5}, {2, 6, 1}}, params, enc, cfg, rng);
    auto loss = [&](bool with_grad) {
        return pretrain_loss(batch, params, enc, cfg.lambda, with_grad).loss_total;
    };
    CHECK(grad_check(loss, params.all(), 1e-5) < 1e-4);
}

TEST_CASE("zero learning rate leaves parameters unchanged with a flat trace") {
    EncoderConfig enc = toy_encoder();
    ModelParams params = ModelParams::init(enc, 6, 21);
    ModelParams before = params;
    PretrainConfig cfg;
    cfg.lambda = 0.4;
    cfg.lr = 0.0;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 77;
    // Probe: the loss of a frozen batch must stay constant when nothing moves.
    Rng probe_rng(123);
    DirectionalBatch probe =
        build_directional_batch(toy_corpus(), params, enc, cfg, probe_rng);
    const double loss_before = pretrain_loss(probe, params, enc, cfg.lambda).loss_total;
    auto trace = run_pretrain(toy_corpus(), params, enc, cfg);
    REQUIRE(trace.size() == 3);
    const double loss_after = pretrain_loss(probe, params, enc, cfg.lambda).loss_total;
    CHECK(loss_before == loss_after);
    auto pb = before.all();
    auto pa = params.all();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t k = 0; k < pa[i]->value.numel(); ++k)
            CHECK(pa[i]->value.at(k) == pb[i]->value.at(k));
}

TEST_CASE("a single sequence is overfit to near-zero loss") {
    EncoderConfig enc = toy_encoder(6, 8, 2, 1);
    ModelParams params = ModelParams::init(enc, 6, 33);
    PretrainConfig cfg;
    cfg.lambda = 0.4;
    cfg.lr = 5e-3;
    cfg.epochs = 300;
    cfg.batch_size = 1;
    cfg.seed = 1;
    auto trace = run_pretrain({{1, 2, 3, 4}}, params, enc, cfg);
    CHECK(trace.back().loss_total < 0.1);
}

TEST_CASE("identical seeds give identical traces") {
    EncoderConfig enc = toy_encoder();
    PretrainConfig cfg;
    cfg.lambda = 0.4;
    cfg.lr = 1e-3;
    cfg.epochs = 4;
    cfg.batch_size = 2;
    cfg.seed = 99;
    ModelParams p1 = ModelParams::init(enc, 6, 3);
    ModelParams p2 = ModelParams::init(enc, 6, 3);
    auto t1 = run_pretrain(toy_corpus(), p1, enc, cfg);
    auto t2 = run_pretrain(toy_corpus(), p2, enc, cfg);
    REQUIRE(t1.size() == t2.size());
    for (std::size_t e = 0; e < t1.size(); ++e) {
        CHECK(t1[e].loss_reverse == t2[e].loss_reverse);
        CHECK(t1[e].loss_forward == t2[e].loss_forward);
        CHECK(t1[e].loss_total == t2[e].loss_total);
    }
}

TEST_CASE("non-finite loss raises a divergence error with the step index") {
    EncoderConfig enc = toy_encoder();
    ModelParams params = ModelParams::init(enc, 6, 3);
    params.item_table.value.at(1, 0) = std::numeric_limits<double>::quiet_NaN();
    PretrainConfig cfg;
    cfg.lambda = 0.0;
    Adam opt(params.all(), cfg.lr);
    Rng rng(2);
    try {
        pretrain_step(toy_corpus(), params, enc, cfg, opt, rng, 41);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step_index == 41);
    }
}

TEST_CASE("padding row stays zero through training") {
    EncoderConfig enc = toy_encoder();
    ModelParams params = ModelParams::init(enc, 6, 55);
    PretrainConfig cfg;
    cfg.lambda = 0.4;
    cfg.lr = 1e-2;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    cfg.seed = 5;
    run_pretrain(toy_corpus(), params, enc, cfg);
    for (std::size_t j = 0; j < enc.d; ++j) CHECK(params.item_table.value.at(0, j) == 0.0);
}
