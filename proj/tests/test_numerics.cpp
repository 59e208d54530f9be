#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "bicat/autograd.hpp"
#include "bicat/optim.hpp"
#include "bicat/rng.hpp"
#include "bicat/tensor.hpp"

using namespace bicat;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t k = 0; k < t.numel(); ++k) t.at(k) = uniform_real(rng, lo, hi);
    return t;
}

// Independent reference: naive triple loop in the plainest possible form.
Tensor matmul_reference(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
            for (std::size_t k = 0; k < a.cols(); ++k)
                c.at(i, j) += a.at(i, k) * b.at(k, j);
    return c;
}

// Independent reference: direct exp/sum row softmax in extended precision.
std::vector<double> softmax_reference(const std::vector<double>& row) {
    long double mx = row[0];
    for (double v : row) mx = std::max<long double>(mx, v);
    long double sum = 0.0L;
    std::vector<long double> e(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(row[i]) - mx);
        sum += e[i];
    }
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / sum);
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.numel() == b.numel());
    double m = 0.0;
    for (std::size_t k = 0; k < a.numel(); ++k) m = std::max(m, std::abs(a.at(k) - b.at(k)));
    return m;
}

}  // namespace

TEST_CASE("matmul identity and orthogonal cases") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {1, 2, 3, 4});
    CHECK(max_abs_diff(matmul(eye, m), m) == 0.0);

    Tensor a({1, 2}, {1, 0});
    Tensor b({2, 1}, {0, 5});
    Tensor c = matmul(a, b);
    CHECK(c.numel() == 1);
    CHECK(c.at(0) == 0.0);
}

TEST_CASE("matmul matches triple-loop reference") {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_reference(a, b)) < 1e-12);

    // Invariant: agreement on shapes up to 16x16.
    for (int trial = 0; trial < 6; ++trial) {
        const std::size_t m = 1 + uniform_below(rng, 16);
        const std::size_t k = 1 + uniform_below(rng, 16);
        const std::size_t p = 1 + uniform_below(rng, 16);
        Tensor x = random_tensor({m, k}, rng);
        Tensor y = random_tensor({k, p}, rng);
        CHECK(max_abs_diff(matmul(x, y), matmul_reference(x, y)) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({2, 3});
    Tensor b({4, 2});
    CHECK_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x3]") &&
                             Catch::Matchers::ContainsSubstring("[4x2]")));
}

TEST_CASE("softmax_rows basics") {
    Tensor x({1, 2}, {0, 0});
    Tensor s = softmax_rows(x);
    CHECK(s.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(s.at(0, 1) == Catch::Approx(0.5).margin(1e-15));

    Tensor big({1, 2}, {1000, 0});
    Tensor sb = softmax_rows(big);
    CHECK(sb.all_finite());
    CHECK(sb.at(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(sb.at(0, 1) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("softmax_rows matches extended-precision reference and normalizes") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + uniform_below(rng, 12);
        Tensor x = random_tensor({1, n}, rng, -30.0, 30.0);
        Tensor s = softmax_rows(x);
        std::vector<double> row(x.data());
        std::vector<double> ref = softmax_reference(row);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            CHECK(std::abs(s.at(0, j) - ref[j]) < 1e-12);
            sum += s.at(0, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("layer_norm basics") {
    Tensor gain({3}, {1, 1, 1});
    Tensor bias({3});
    Tensor constant_row({1, 3}, {5, 5, 5});
    Tensor out = layer_norm(constant_row, gain, bias);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(out.at(0, j)) < 1e-6);

    Tensor g2({2}, {1, 1});
    Tensor b2({2});
    Tensor pm({1, 2}, {1, -1});
    Tensor out2 = layer_norm(pm, g2, b2);
    CHECK(out2.at(0, 0) == Catch::Approx(1.0).margin(1e-6));
    CHECK(out2.at(0, 1) == Catch::Approx(-1.0).margin(1e-6));
}

TEST_CASE("layer_norm matches explicit mean/variance computation") {
    Rng rng(23);
    const std::size_t d = 7;
    Tensor x = random_tensor({4, d}, rng, -2.0, 2.0);
    Tensor gain = random_tensor({d}, rng);
    Tensor bias = random_tensor({d}, rng);
    const double eps = 1e-8;
    Tensor out = layer_norm(x, gain, bias, eps);
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j) / d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            var += (x.at(i, j) - mean) * (x.at(i, j) - mean) / d;
        for (std::size_t j = 0; j < d; ++j) {
            const double expect =
                gain.at(j) * (x.at(i, j) - mean) / std::sqrt(var + eps) + bias.at(j);
            CHECK(std::abs(out.at(i, j) - expect) < 1e-10);
        }
    }
    // Row statistics before gain/bias: mean 0, variance 1 within 1e-6.
    Tensor unit_gain = Tensor::full({d}, 1.0);
    Tensor zero_bias({d});
    Tensor norm = layer_norm(x, unit_gain, zero_bias, eps);
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += norm.at(i, j) / d;
        for (std::size_t j = 0; j < d; ++j)
            var += (norm.at(i, j) - mean) * (norm.at(i, j) - mean) / d;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("grad_check on a simple quadratic") {
    Parameter x("x", Tensor({2}, {1, 2}));
    auto loss = [&](bool with_grad) {
        Graph g;
        Val v = g.leaf(x);
        Val sq = mul(v, v);
        Val total = sum_all(sq);
        if (with_grad) g.backward(total);
        return total.value().at(0);
    };
    const double err = grad_check(loss, {&x}, 1e-5);
    CHECK(err < 1e-6);
    // loss(true) was called first by grad_check; analytic gradient is 2x but
    // grad_check restores and re-runs, so recompute for the direct assertion.
    x.zero_grad();
    loss(true);
    CHECK(x.grad.at(0) == Catch::Approx(2.0).margin(1e-12));
    CHECK(x.grad.at(1) == Catch::Approx(4.0).margin(1e-12));
}

namespace {

// Shared harness: reduce an op's output to a fixed random weighted sum so the
// loss is scalar, then finite-difference every parameter.
double check_op(const std::function<Val(Graph&, std::vector<Parameter*>&)>& build,
                std::vector<Parameter*> params, Rng& rng) {
    std::vector<double> weights;
    auto loss = [&](bool with_grad) {
        Graph g;
        Val out = build(g, params);
        if (weights.empty())
            for (std::size_t k = 0; k < out.value().numel(); ++k)
                weights.push_back(uniform_real(rng, -1.0, 1.0));
        Tensor w(out.value().shape(), weights);
        Val weighted = mul_const(out, w);
        Val total = sum_all(weighted);
        if (with_grad) g.backward(total);
        return total.value().at(0);
    };
    return grad_check(loss, params, 1e-5);
}

}  // namespace

TEST_CASE("every recorded op passes finite-difference checks") {
    Rng rng(99);
    const double tol = 1e-4;

    Parameter a("a", random_tensor({3, 4}, rng));
    Parameter b("b", random_tensor({4, 2}, rng));
    Parameter c("c", random_tensor({3, 4}, rng));
    Parameter d("d", random_tensor({2, 4}, rng));
    Parameter bias("bias", random_tensor({4}, rng));
    Parameter gain("gain", random_tensor({4}, rng, 0.5, 1.5));
    // Keep relu inputs away from the kink.
    Parameter roff("roff", random_tensor({3, 4}, rng, 0.2, 1.0));
    Parameter table("table", random_tensor({5, 4}, rng));

    SECTION("matmul") {
        CHECK(check_op([&](Graph& g, auto&) { return matmul(g.leaf(a), g.leaf(b)); },
                       {&a, &b}, rng) < tol);
    }
    SECTION("matmul_nt") {
        CHECK(check_op([&](Graph& g, auto&) { return matmul_nt(g.leaf(a), g.leaf(d)); },
                       {&a, &d}, rng) < tol);
    }
    SECTION("add sub mul") {
        CHECK(check_op([&](Graph& g, auto&) { return add(g.leaf(a), g.leaf(c)); }, {&a, &c},
                       rng) < tol);
        CHECK(check_op([&](Graph& g, auto&) { return sub(g.leaf(a), g.leaf(c)); }, {&a, &c},
                       rng) < tol);
        CHECK(check_op([&](Graph& g, auto&) { return mul(g.leaf(a), g.leaf(c)); }, {&a, &c},
                       rng) < tol);
    }
    SECTION("scale and add_bias") {
        CHECK(check_op([&](Graph& g, auto&) { return scale(g.leaf(a), -1.7); }, {&a}, rng) <
              tol);
        CHECK(check_op([&](Graph& g, auto&) { return add_bias(g.leaf(a), g.leaf(bias)); },
                       {&a, &bias}, rng) < tol);
    }
    SECTION("relu away from kink") {
        CHECK(check_op(
                  [&](Graph& g, auto&) {
                      return relu(sub(g.leaf(roff), g.constant(Tensor::full({3, 4}, 0.6))));
                  },
                  {&roff}, rng) < tol);
    }
    SECTION("exp and log_sigmoid") {
        CHECK(check_op([&](Graph& g, auto&) { return exp_elem(g.leaf(a)); }, {&a}, rng) < tol);
        CHECK(check_op([&](Graph& g, auto&) { return log_sigmoid(scale(g.leaf(a), 3.0)); },
                       {&a}, rng) < tol);
    }
    SECTION("softmax and log_softmax") {
        CHECK(check_op([&](Graph& g, auto&) { return softmax_rows(g.leaf(a)); }, {&a}, rng) <
              tol);
        CHECK(check_op([&](Graph& g, auto&) { return log_softmax_rows(g.leaf(a)); }, {&a},
                       rng) < tol);
    }
    SECTION("masked softmax with fully masked row") {
        const double inf = std::numeric_limits<double>::infinity();
        Tensor mask({3, 4});
        for (std::size_t j = 0; j < 4; ++j) mask.at(0, j) = -inf;  // row 0 fully masked
        mask.at(1, 3) = -inf;
        CHECK(check_op([&](Graph& g, auto&) { return masked_softmax_rows(g.leaf(a), mask); },
                       {&a}, rng) < tol);
    }
    SECTION("layer_norm") {
        CHECK(check_op(
                  [&](Graph& g, auto&) {
                      return layer_norm(g.leaf(a), g.leaf(gain), g.leaf(bias));
                  },
                  {&a, &gain, &bias}, rng) < tol);
    }
    SECTION("gather concat rowwise_dot mean_masked") {
        CHECK(check_op(
                  [&](Graph& g, auto&) {
                      return gather_rows(g.leaf(table), {0, 2, 2, 4});
                  },
                  {&table}, rng) < tol);
        CHECK(check_op(
                  [&](Graph& g, auto&) {
                      return concat_rows({g.leaf(a), g.leaf(c)});
                  },
                  {&a, &c}, rng) < tol);
        CHECK(check_op(
                  [&](Graph& g, auto&) {
                      return concat_cols({g.leaf(a), g.leaf(c)});
                  },
                  {&a, &c}, rng) < tol);
        CHECK(check_op([&](Graph& g, auto&) { return rowwise_dot(g.leaf(a), g.leaf(c)); },
                       {&a, &c}, rng) < tol);
        Tensor mask({3, 4});
        mask.at(0, 1) = 1.0;
        mask.at(2, 3) = 1.0;
        CHECK(check_op([&](Graph& g, auto&) { return mean_masked(g.leaf(a), mask); }, {&a},
                       rng) < tol);
    }
}

TEST_CASE("log_sigmoid clamps extreme scores") {
    Graph g;
    Val v = g.constant(Tensor({2}, {1e6, -1e6}));
    Val ls = log_sigmoid(v);
    CHECK(ls.value().all_finite());
    CHECK(ls.value().at(0) == Catch::Approx(std::log1p(-1e-12)));
    CHECK(ls.value().at(1) == Catch::Approx(std::log(1e-12)));
}

TEST_CASE("backward accumulates into parameters over repeated leaves") {
    Parameter p("p", Tensor({2}, {3, 4}));
    Graph g;
    Val v1 = g.leaf(p);
    Val v2 = g.leaf(p);
    Val total = sum_all(add(v1, v2));
    g.backward(total);
    CHECK(p.grad.at(0) == Catch::Approx(2.0));
    CHECK(p.grad.at(1) == Catch::Approx(2.0));
}

TEST_CASE("adam takes a finite descent step") {
    Parameter p("p", Tensor({2}, {1.0, -2.0}));
    Adam opt({&p}, 0.1);
    auto loss_value = [&]() {
        Graph g;
        Val v = g.leaf(p);
        Val l = sum_all(mul(v, v));
        return l;
    };
    for (int i = 0; i < 50; ++i) {
        Graph g;
        Val v = g.leaf(p);
        Val l = sum_all(mul(v, v));
        g.backward(l);
        opt.step();
    }
    Graph g;
    CHECK(std::abs(p.value.at(0)) < 1.0);
    CHECK(std::abs(p.value.at(1)) < 2.0);
    (void)loss_value;
}
