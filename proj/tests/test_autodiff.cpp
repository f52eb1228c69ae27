#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "mixlab/autodiff.hpp"
#include "mixlab/matrix.hpp"
#include "mixlab/rng.hpp"

using namespace mixlab;
using ad::Parameter;
using ad::Tape;

namespace {

// Convenience: checks the tape gradient of `build` (a scalar graph over the
// given parameters) against central finite differences.
double check_graph(const std::function<ad::Value(Tape&)>& build,
                   std::vector<Parameter*> params) {
    auto loss = [&]() {
        Tape t;
        return t.val(build(t))(0, 0);
    };
    auto backward = [&]() {
        for (auto* p : params) p->zero_grad();
        Tape t;
        t.backward(build(t));
    };
    return ad::grad_check(loss, backward, params).max_rel_err;
}

}  // namespace

TEST_CASE("finite differences of a quadratic recover 2x") {
    Parameter p("x", Matrix::from_rows({{1.5, -2.0, 0.25}}));
    auto f = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < p.value.size(); ++i)
            s += p.value.data()[i] * p.value.data()[i];
        return s;
    };
    const Matrix g = ad::finite_diff_grad(f, p);
    for (std::size_t i = 0; i < p.value.size(); ++i)
        CHECK(g.data()[i] == doctest::Approx(2.0 * p.value.data()[i]).epsilon(1e-8));
}

TEST_CASE("every primitive matches finite differences") {
    RandomStream rs(41);
    Parameter a("a", random_normal(4, 5, rs));
    Parameter b("b", random_normal(5, 3, rs));
    Parameter c("c", random_normal(4, 3, rs));

    SUBCASE("matmul") {
        CHECK(check_graph([&](Tape& t) {
            return t.sum_all(t.matmul(t.param(a), t.param(b)));
        }, {&a, &b}) < 1e-7);
    }
    SUBCASE("add and mul, full shape") {
        CHECK(check_graph([&](Tape& t) {
            auto m = t.matmul(t.param(a), t.param(b));
            return t.sum_all(t.mul(t.add(m, t.param(c)), t.param(c)));
        }, {&a, &b, &c}) < 1e-7);
    }
    SUBCASE("scale and transpose") {
        CHECK(check_graph([&](Tape& t) {
            return t.sum_all(t.matmul(t.transpose(t.param(a)), t.scale(t.param(c), -1.7)));
        }, {&a, &c}) < 1e-7);
    }
    SUBCASE("exp") {
        CHECK(check_graph([&](Tape& t) {
            return t.sum_all(t.exp(t.scale(t.param(a), 0.3)));
        }, {&a}) < 1e-7);
    }
    SUBCASE("log of a positive composition") {
        CHECK(check_graph([&](Tape& t) {
            auto pos = t.add_scalar(t.exp(t.param(a)), 1.0);
            return t.sum_all(t.log(pos));
        }, {&a}) < 1e-7);
    }
    SUBCASE("phi1 across small and moderate arguments") {
        Parameter w("w", Matrix::from_rows({{-3.0, -0.5, -1e-3, 1e-6, 0.7, 2.5}}));
        CHECK(check_graph([&](Tape& t) {
            return t.sum_all(t.phi1(t.param(w)));
        }, {&w}) < 1e-7);
    }
    SUBCASE("relu away from kinks") {
        Parameter w("w", Matrix::from_rows({{-1.0, -0.3, 0.4, 2.0}}));
        CHECK(check_graph([&](Tape& t) {
            return t.sum_all(t.relu(t.mul(t.param(w), t.param(w))));
        }, {&w}) < 1e-7);
    }
    SUBCASE("softmax_rows") {
        CHECK(check_graph([&](Tape& t) {
            auto sm = t.softmax_rows(t.param(a));
            return t.sum_all(t.mul(sm, t.constant(Matrix::from_rows(
                {{1, -2, 3, 0, 1}, {0, 1, 0, 2, -1}, {2, 2, -3, 1, 0}, {1, 0, 1, 0, 1}}))));
        }, {&a}) < 1e-7);
    }
    SUBCASE("norm_rows") {
        CHECK(check_graph([&](Tape& t) {
            auto y = t.norm_rows(t.param(a));
            return t.sum_all(t.mul(y, t.constant(Matrix::from_rows(
                {{1, 0, -1, 2, 1}, {3, 1, 0, 0, -2}, {0, 1, 1, -1, 2}, {2, -1, 0, 1, 0}}))));
        }, {&a}) < 1e-7);
    }
}

TEST_CASE("broadcast add/mul match finite differences and reduce correctly") {
    RandomStream rs(42);
    Parameter a("a", random_normal(4, 5, rs));
    Parameter row("row", random_normal(1, 5, rs));
    Parameter col("col", random_normal(4, 1, rs));
    Parameter sc("sc", random_normal(1, 1, rs));

    CHECK(check_graph([&](Tape& t) {
        auto x = t.add(t.param(a), t.param(row));
        x = t.mul(x, t.param(col));
        x = t.add(x, t.param(sc));
        x = t.mul(x, t.param(sc));
        return t.sum_all(x);
    }, {&a, &row, &col, &sc}) < 1e-7);

    Tape t;
    CHECK_THROWS_AS(t.add(t.constant(Matrix(2, 3)), t.constant(Matrix(3, 2))),
                    std::invalid_argument);
    CHECK_THROWS_AS(t.mul(t.constant(Matrix(2, 3)), t.constant(Matrix(2, 2))),
                    std::invalid_argument);
}

TEST_CASE("softmax cross-entropy gradient equals softmax minus one-hot") {
    RandomStream rs(43);
    Parameter logits("logits", random_normal(1, 6, rs));
    Matrix onehot(1, 6);
    onehot(0, 2) = 1.0;

    logits.zero_grad();
    Tape t;
    auto z = t.param(logits);
    auto ce = t.scale(t.sum_all(t.mul(t.log(t.softmax_rows(z)), t.constant(onehot))), -1.0);
    t.backward(ce);

    const Matrix p = softmax_rows(logits.value);
    for (std::size_t j = 0; j < 6; ++j) {
        const double expected = p(0, j) - onehot(0, j);
        CHECK(logits.grad(0, j) == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("gradient of a sum equals the sum of gradients") {
    RandomStream rs(44);
    Parameter a("a", random_normal(3, 3, rs));
    const Matrix c1 = random_normal(3, 3, rs), c2 = random_normal(3, 3, rs);

    auto loss1 = [&](Tape& t) { return t.sum_all(t.mul(t.param(a), t.constant(c1))); };
    auto loss2 = [&](Tape& t) { return t.sum_all(t.exp(t.mul(t.param(a), t.constant(c2)))); };

    a.zero_grad();
    {
        Tape t;
        t.backward(t.add(loss1(t), loss2(t)));
    }
    const Matrix combined = a.grad;

    a.zero_grad();
    {
        Tape t;
        t.backward(loss1(t));
    }
    const Matrix g1 = a.grad;
    a.zero_grad();
    {
        Tape t;
        t.backward(loss2(t));
    }
    const Matrix g2 = a.grad;

    CHECK(max_abs(sub(combined, add(g1, g2))) < 1e-12);
}

TEST_CASE("zero upstream gradient yields exactly zero parameter gradients") {
    RandomStream rs(45);
    Parameter a("a", random_normal(3, 4, rs));
    a.zero_grad();
    Tape t;
    auto y = t.mul(t.param(a), t.constant(Matrix(3, 4)));  // multiply by zeros
    t.backward(t.sum_all(y));
    CHECK(max_abs(a.grad) == 0.0);
}

TEST_CASE("detached parameters are reported by name") {
    RandomStream rs(46);
    Parameter used("used", random_normal(2, 2, rs));
    Parameter unused("unused", random_normal(2, 2, rs));
    Tape t;
    t.param(unused);  // bound to the tape but never reaches the loss
    auto stats = t.backward(t.sum_all(t.param(used)));
    REQUIRE(stats.detached_params.size() == 1);
    CHECK(stats.detached_params[0] == "unused");
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape t;
    auto v = t.constant(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(t.backward(v), std::invalid_argument);
}

TEST_CASE("binding the same parameter twice accumulates both paths") {
    Parameter a("a", Matrix::from_rows({{2.0}}));
    a.zero_grad();
    Tape t;
    auto y = t.mul(t.param(a), t.param(a));  // x^2 via two bindings
    t.backward(t.sum_all(y));
    CHECK(a.grad(0, 0) == doctest::Approx(4.0).epsilon(1e-12));  // d(x^2)/dx = 2x = 4
}

TEST_CASE("forward replay is bit-identical") {
    RandomStream rs(47);
    const Matrix x = random_normal(5, 5, rs);
    Parameter a("a", random_normal(5, 5, rs));
    auto run = [&](std::vector<Matrix>& vals) {
        Tape t;
        auto v = t.matmul(t.param(a), t.constant(x));
        v = t.softmax_rows(v);
        v = t.norm_rows(t.exp(t.scale(v, 0.5)));
        auto loss = t.sum_all(v);
        for (std::size_t i = 0; i < t.size(); ++i) vals.push_back(t.val(ad::Value{(int)i}));
        return t.val(loss)(0, 0);
    };
    std::vector<Matrix> v1, v2;
    const double l1 = run(v1);
    const double l2 = run(v2);
    CHECK(l1 == l2);
    REQUIRE(v1.size() == v2.size());
    for (std::size_t i = 0; i < v1.size(); ++i)
        for (std::size_t j = 0; j < v1[i].size(); ++j)
            CHECK(v1[i].data()[j] == v2[i].data()[j]);
}

TEST_CASE("log rejects non-positive inputs") {
    Tape t;
    CHECK_THROWS_AS(t.log(t.constant(Matrix(1, 1, 0.0))), std::domain_error);
    CHECK_THROWS_AS(t.log(t.constant(Matrix(1, 1, -2.0))), std::domain_error);
}
