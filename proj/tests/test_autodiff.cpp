#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mendkit/autodiff.hpp"
#include "mendkit/grad_check.hpp"
#include "mendkit/rng.hpp"

using namespace mendkit;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, CounterRng& rng, double lo = -1.0,
                             double hi = 1.0) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.data)
        v = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("linear: identity and hand-expanded cases") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({1, 2}, {1, 2}));
    auto w = tape.constant(Tensor<double>::from({2, 2}, {1, 0, 0, 1}));
    auto b = tape.constant(Tensor<double>::from({2}, {0, 0}));
    auto y = tape.linear(x, w, b);
    CHECK(tape.value(y).data == std::vector<double>{1, 2});

    auto x2 = tape.constant(Tensor<double>::from({1, 2}, {1, 1}));
    auto w2 = tape.constant(Tensor<double>::from({2, 2}, {2, 0, 0, 3}));
    auto b2 = tape.constant(Tensor<double>::from({2}, {1, 1}));
    auto y2 = tape.linear(x2, w2, b2);
    CHECK(tape.value(y2).data == std::vector<double>{3, 4});
}

TEST_CASE("linear: shape mismatch raises DimensionError") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::zeros({2, 3}));
    auto w = tape.constant(Tensor<double>::zeros({4, 2}));
    auto b = tape.constant(Tensor<double>::zeros({2}));
    CHECK_THROWS_AS(tape.linear(x, w, b), DimensionError);
    auto w_ok = tape.constant(Tensor<double>::zeros({3, 2}));
    auto b_bad = tape.constant(Tensor<double>::zeros({5}));
    CHECK_THROWS_AS(tape.linear(x, w_ok, b_bad), DimensionError);
}

TEST_CASE("linear: gradient of sum(output) wrt weight matches finite differences") {
    CounterRng rng(7);
    Tensor<double> x = random_tensor({3, 3}, rng);
    Tensor<double> w = random_tensor({3, 2}, rng);
    Tensor<double> b = random_tensor({2}, rng);

    auto build = [&](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        auto xid = t.constant(x);
        return t.sum(t.linear(xid, ids[0], ids[1]));
    };
    auto report = grad_check(build, {{"w", &w}, {"b", &b}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("relu: forward values and dead-input gradient") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({3}, {-1, 0, 2}));
    auto y = tape.relu(x);
    CHECK(tape.value(y).data == std::vector<double>{0, 0, 2});

    Tensor<double> neg = Tensor<double>::from({4}, {-3, -2, -1, -0.5});
    neg.requires_grad = true;
    Tape<double> t2;
    auto xn = t2.leaf(neg);
    auto loss = t2.sum(t2.relu(xn));
    CHECK(t2.value(loss).data[0] == 0.0);
    t2.backward(loss);
    for (double g : t2.grad(xn).data)
        CHECK(g == 0.0);
}

TEST_CASE("relu: gradcheck away from the kink") {
    CounterRng rng(11);
    Tensor<double> x = Tensor<double>::zeros({2, 5});
    for (auto& v : x.data) {
        double u = rng.uniform(1e-2, 1.0);
        v = (rng.uniform() < 0.5) ? -u : u; // bounded away from 0
    }
    auto build = [](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        return t.mean(t.relu(ids[0]));
    };
    auto report = grad_check(build, {{"x", &x}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("sigmoid: midpoint, saturation, gradcheck") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::from({3}, {0.0, -1000.0, 500.0}));
    auto y = tape.sigmoid(x);
    CHECK(tape.value(y).data[0] == doctest::Approx(0.5));
    CHECK(tape.value(y).data[1] == 0.0);
    CHECK(std::isfinite(tape.value(y).data[2]));
    CHECK(tape.value(y).all_finite());

    CounterRng rng(3);
    Tensor<double> xs = random_tensor({2, 4}, rng, -3.0, 3.0);
    auto build = [](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        return t.mean(t.sigmoid(ids[0]));
    };
    auto report = grad_check(build, {{"x", &xs}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("concat: widths add up (512 + 203 = 715) and empty operand is identity") {
    Tape<double> tape;
    CounterRng rng(5);
    auto a = tape.constant(Tensor<double>::zeros({2, 512}));
    auto b = tape.constant(Tensor<double>::zeros({2, 203}));
    auto y = tape.concat(a, b);
    CHECK(tape.value(y).cols() == 715);

    Tensor<double> av = random_tensor({3, 4}, rng);
    auto aid = tape.constant(av);
    auto empty = tape.constant(Tensor<double>::zeros({3, 0}));
    auto y2 = tape.concat(aid, empty);
    CHECK(tape.value(y2).data == av.data);

    auto bad = tape.constant(Tensor<double>::zeros({4, 2}));
    CHECK_THROWS_AS(tape.concat(aid, bad), DimensionError);
}

TEST_CASE("concat: gradcheck on both operands") {
    CounterRng rng(13);
    Tensor<double> a = random_tensor({2, 3}, rng);
    Tensor<double> b = random_tensor({2, 4}, rng);
    auto build = [](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        auto c = t.concat(ids[0], ids[1]);
        return t.mean(t.mul(c, c)); // quadratic so grads are nontrivial
    };
    auto report = grad_check(build, {{"a", &a}, {"b", &b}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("dropout: identity modes and parameter validation") {
    Tape<double> tape;
    CounterRng rng(1);
    auto x = tape.constant(Tensor<double>::from({4}, {1, 2, 3, 4}));
    CHECK(tape.dropout(x, 0.0, true, rng) == x);
    CHECK(tape.dropout(x, 0.7, false, rng) == x);
    CHECK_THROWS_AS(tape.dropout(x, 1.0, true, rng), ParameterError);
    CHECK_THROWS_AS(tape.dropout(x, -0.1, true, rng), ParameterError);
}

TEST_CASE("dropout: inverted scaling preserves expectation within 1%") {
    const double rate = 0.3;
    const int draws = 100000;
    CounterRng rng(99);
    Tensor<double> x = Tensor<double>::from({2}, {2.0, -1.5});
    std::vector<double> acc(2, 0.0);
    for (int i = 0; i < draws; ++i) {
        Tape<double> tape;
        auto id = tape.dropout(tape.constant(x), rate, true, rng);
        acc[0] += tape.value(id).data[0];
        acc[1] += tape.value(id).data[1];
    }
    CHECK(std::abs(acc[0] / draws - 2.0) / 2.0 < 0.01);
    CHECK(std::abs(acc[1] / draws + 1.5) / 1.5 < 0.01);
}

TEST_CASE("bce: analytic values and clamp floor") {
    Tape<double> tape;
    auto p = tape.constant(Tensor<double>::from({1}, {0.5}));
    auto l = tape.bce(p, Tensor<double>::from({1}, {1.0}));
    CHECK(tape.value(l).data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // perfect binary predictions only pay the clamp floor
    auto perfect = tape.constant(Tensor<double>::from({2}, {0.0, 1.0}));
    auto lf = tape.bce(perfect, Tensor<double>::from({2}, {0.0, 1.0}));
    CHECK(tape.value(lf).data[0] <= 1.19e-7);
    CHECK(tape.value(lf).data[0] > 0.0);

    CHECK_THROWS_AS(tape.bce(p, Tensor<double>::from({1}, {1.5})), ParameterError);
    CHECK_THROWS_AS(tape.bce(p, Tensor<double>::from({2}, {1.0, 0.0})), DimensionError);
}

TEST_CASE("bce: gradcheck through sigmoid") {
    CounterRng rng(21);
    Tensor<double> logits = random_tensor({3, 2}, rng, -2.0, 2.0);
    Tensor<double> target = Tensor<double>::from({3, 2}, {1, 0, 1, 1, 0, 0});
    auto build = [&](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        return t.bce(t.sigmoid(ids[0]), target);
    };
    auto report = grad_check(build, {{"logits", &logits}});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor<float> p = Tensor<float>::from({3}, {1.0f, -2.0f, 0.5f});
    Tensor<float> g = Tensor<float>::zeros({3});
    AdamState<float> st;
    st.step(p, g, {0.001f}, "p");
    CHECK(p.data == std::vector<float>{1.0f, -2.0f, 0.5f});
}

TEST_CASE("adam: first bias-corrected step moves by about -lr") {
    Tensor<double> p = Tensor<double>::from({1}, {0.0});
    Tensor<double> g = Tensor<double>::from({1}, {1.0});
    AdamState<double> st;
    st.step(p, g, {1e-3}, "w");
    CHECK(p.data[0] == doctest::Approx(-1e-3).epsilon(1e-6));
}

TEST_CASE("adam: non-finite gradient raises NumericError naming the parameter") {
    Tensor<double> p = Tensor<double>::from({1}, {0.0});
    Tensor<double> g = Tensor<double>::from({1}, {std::numeric_limits<double>::quiet_NaN()});
    AdamState<double> st;
    CHECK_THROWS_WITH_AS(st.step(p, g, {1e-3}, "theta1.layer3.weight"),
                         doctest::Contains("theta1.layer3.weight"), NumericError);
}

TEST_CASE("adam: 100 steps on w^2 decrease |w| monotonically after warmup") {
    Tensor<double> w = Tensor<double>::from({1}, {1.0});
    AdamState<double> st;
    std::vector<double> trace;
    for (int i = 0; i < 100; ++i) {
        Tensor<double> g = Tensor<double>::from({1}, {2.0 * w.data[0]});
        st.step(w, g, {0.008}, "w");
        trace.push_back(std::abs(w.data[0]));
    }
    for (std::size_t i = 10; i + 1 < trace.size(); ++i)
        CHECK(trace[i + 1] <= trace[i] + 1e-12);
    CHECK(trace.back() < 0.5);
}

namespace {

// Two-layer sigmoid decoder used by several gradcheck cases.
struct TinyDecoder {
    Tensor<double> w1, b1, w2, b2, x, target;

    explicit TinyDecoder(std::uint64_t seed, std::size_t batch = 4, std::size_t in = 3,
                         std::size_t hidden = 6) {
        CounterRng rng(seed);
        w1 = random_tensor({in, hidden}, rng, -0.7, 0.7);
        b1 = random_tensor({hidden}, rng, -0.1, 0.1);
        w2 = random_tensor({hidden, 1}, rng, -0.7, 0.7);
        b2 = random_tensor({1}, rng, -0.1, 0.1);
        x = random_tensor({batch, in}, rng);
        target = Tensor<double>::zeros({batch, 1});
        for (auto& v : target.data)
            v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    }

    std::vector<NamedParam<double>> params() {
        return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
    }

    GradCheckLossBuilder builder() {
        return [this](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
            auto xid = t.constant(x);
            auto h = t.relu(t.linear(xid, ids[0], ids[1]));
            auto out = t.sigmoid(t.linear(h, ids[2], ids[3]));
            return t.bce(out, target);
        };
    }
};

} // namespace

TEST_CASE("grad_check: two-layer decoder passes at 1e-4") {
    TinyDecoder d(42);
    auto report = grad_check(d.builder(), d.params());
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.per_param.size() == 4);
}

TEST_CASE("grad_check: constant loss has near-zero gradients") {
    Tensor<double> p = Tensor<double>::from({3}, {0.3, -0.4, 0.9});
    auto build = [](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        // multiply by zero: loss independent of the parameter
        auto z = t.mul_const(ids[0], Tensor<double>::zeros({3}));
        return t.sum(z);
    };
    auto report = grad_check(build, {{"p", &p}});
    CHECK(report.max_abs_err < 1e-10);
}

TEST_CASE("grad_check: corrupted backward rule is detected") {
    Tensor<double> p = Tensor<double>::from({2}, {0.5, -0.25});
    auto build = [](Tape<double>& t, const std::vector<Tape<double>::NodeId>& ids) {
        // forward: y = 3*x, but the registered rule claims dy/dx = 1.5
        auto id = ids[0];
        Tensor<double> out = t.value(id);
        for (auto& v : out.data)
            v *= 3.0;
        auto y = t.leaf(out);
        t.push_op("bad_scale", {id}, y, [id, y](Tape<double>& tt) {
            const auto& g = tt.grad(y);
            auto& dx = tt.grad_buf(id);
            for (std::size_t i = 0; i < g.size(); ++i)
                dx.data[i] += 1.5 * g.data[i];
        });
        return t.sum(y);
    };
    auto report = grad_check(build, {{"p", &p}});
    CHECK(report.max_rel_err > 1e-4);
}

TEST_CASE("property: tape gradients match finite differences over 20 seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        TinyDecoder d(seed, 3 + seed % 3, 2 + seed % 3, 4 + seed % 5);
        auto report = grad_check(d.builder(), d.params());
        worst = std::max(worst, report.max_rel_err);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("property: forward pass is deterministic given seed") {
    auto run = [] {
        CounterRng rng(123);
        CounterRng drop = rng.substream("dropout");
        Tape<float> tape;
        auto x = tape.constant(Tensor<float>::from({2, 2}, {0.3f, -0.8f, 1.2f, 0.05f}));
        auto w = tape.constant(Tensor<float>::from({2, 2}, {0.5f, -0.5f, 0.25f, 1.0f}));
        auto b = tape.constant(Tensor<float>::from({2}, {0.1f, -0.1f}));
        auto h = tape.dropout(tape.relu(tape.linear(x, w, b)), 0.5f, true, drop);
        auto y = tape.sigmoid(h);
        return tape.value(y).data;
    };
    CHECK(run() == run());
}

TEST_CASE("property: no NaN/Inf for inputs up to |v| = 1e3") {
    CounterRng rng(77);
    Tape<double> tape;
    Tensor<double> big = random_tensor({4, 4}, rng, -1e3, 1e3);
    auto x = tape.constant(big);
    CHECK(tape.value(tape.relu(x)).all_finite());
    CHECK(tape.value(tape.sigmoid(x)).all_finite());
    auto w = tape.constant(random_tensor({4, 2}, rng, -1e3, 1e3));
    auto b = tape.constant(random_tensor({2}, rng, -1e3, 1e3));
    CHECK(tape.value(tape.linear(x, w, b)).all_finite());
    auto probs = tape.sigmoid(x);
    CHECK(tape.value(tape.bce(probs, Tensor<double>::full({4, 4}, 1.0))).all_finite());
}
