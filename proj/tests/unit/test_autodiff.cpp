#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/primitive_cases.hpp"
#include "saeforge/autodiff.hpp"
#include "saeforge/gradcheck.hpp"

using namespace saeforge;
using saeforge::testing::random_tensor;

TEST_CASE("relu clamps negatives") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>({3}, {-1.0, 0.0, 2.0}));
    auto y = ops::relu(x);
    CHECK(y.value() == Tensor<double>({3}, {0.0, 0.0, 2.0}));
}

TEST_CASE("softmax of a constant row is uniform") {
    Tape<double> tape;
    for (double c : {-50.0, 0.0, 3.25, 700.0}) {
        auto y = ops::softmax(tape.constant(Tensor<double>::full({3}, c)));
        for (auto v : y.value().data()) {
            CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        }
    }
}

TEST_CASE("matmul matches a triple-loop oracle") {
    std::mt19937_64 rng(7);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    Tape<double> tape;
    auto c = ops::matmul(tape.constant(a), tape.constant(b));
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                acc += a.at({i, k}) * b.at({k, j});
            }
            CHECK(std::abs(c.value().at({i, j}) - acc) <= 1e-6 * std::abs(acc) + 1e-15);
        }
    }
}

TEST_CASE("matmul float path matches the double oracle") {
    std::mt19937_64 rng(8);
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 4, 5}, rng);
    Tape<float> tape;
    auto c = ops::matmul(tape.constant(a.cast<float>()), tape.constant(b.cast<float>()));
    for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 4; ++k) {
                    acc += a.at({n, i, k}) * b.at({n, k, j});
                }
                CHECK(c.value().at({n, i, j}) == doctest::Approx(acc).epsilon(1e-5));
            }
        }
    }
}

TEST_CASE("backward of sum is all ones") {
    Tape<double> tape;
    auto x = tape.parameter(Tensor<double>({5}, {1, -2, 3, 0.5, 9}));
    auto grads = tape.backward(ops::sum(x));
    CHECK(grad_of(grads, x) == Tensor<double>::full({5}, 1.0));
}

TEST_CASE("backward of mse(x, x) is zero") {
    Tape<double> tape;
    auto x = tape.parameter(Tensor<double>({4}, {1, -2, 3, 0.5}));
    auto grads = tape.backward(ops::mse(x, x));
    CHECK(grad_of(grads, x) == Tensor<double>({4}));
}

TEST_CASE("composite relu-matmul-softmax-KL matches finite differences") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = saeforge::testing::kink_free_tensor({6}, rng);
        auto w = random_tensor({6, 6}, rng);
        auto ref = random_tensor({1, 6}, rng);
        const ScalarFn fn = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
            auto h = ops::relu(ops::reshape(v[0], Shape{1, 6}));
            auto logits = ops::matmul(h, v[1]);
            auto log_q = ops::log_softmax(logits);
            auto log_p = ops::log_softmax(t.constant(ref));
            auto p = ops::exp(log_p);
            return ops::sum(ops::mul(p, ops::sub(log_p, log_q)));
        };
        auto r = finite_difference_check(fn, {x, w}, 1e-4);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("finite_difference_check reference cases") {
    const auto sum_sq = [](Tape<double>&, const Var<double>& x) { return ops::squared_l2(x); };
    CHECK(finite_difference_check(sum_sq, Tensor<double>({4}), 1e-4) <= 1e-12);

    const auto l1 = [](Tape<double>&, const Var<double>& x) { return ops::l1_norm(x); };
    CHECK(finite_difference_check(l1, Tensor<double>({4}, {0.5, 1.0, 2.0, 0.01}), 1e-4) <= 1e-6);

    CHECK_THROWS_AS(finite_difference_check(l1, Tensor<double>({1}, {1.0}), 0.0), std::invalid_argument);
    const auto bad = [](Tape<double>&, const Var<double>& x) { return ops::sum(ops::log_softmax(ops::scale(x, 1e308))); };
    CHECK_THROWS_AS(finite_difference_check(bad, Tensor<double>({2}, {1.0, -1.0}), 1e-4), std::domain_error);
}

TEST_CASE("every primitive matches finite differences") {
    const auto cases = saeforge::testing::primitive_cases();
    std::size_t seed = 1000;
    for (const auto& c : cases) {
        CAPTURE(c.label);
        CHECK(saeforge::testing::primitive_case_error(c, 20, seed++) <= 1e-4);
    }
}

TEST_CASE("softmax rows sum to one and are non-negative") {
    std::mt19937_64 rng(3);
    Tape<double> tape;
    auto y = ops::softmax(tape.constant(random_tensor({10, 7}, rng, -30.0, 30.0)));
    for (std::size_t r = 0; r < 10; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(y.value().at({r, j}) >= 0.0);
            s += y.value().at({r, j});
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer norm rows are standardized before gain and bias") {
    // The epsilon shifts the variance by eps/var, so it is kept negligible here.
    std::mt19937_64 rng(4);
    Tape<double> tape;
    auto y = ops::layer_norm(tape.constant(random_tensor({8, 16}, rng)), 1e-12);
    for (std::size_t r = 0; r < 8; ++r) {
        double mu = 0.0;
        double var = 0.0;
        for (std::size_t j = 0; j < 16; ++j) {
            mu += y.value().at({r, j});
        }
        mu /= 16.0;
        for (std::size_t j = 0; j < 16; ++j) {
            var += std::pow(y.value().at({r, j}) - mu, 2);
        }
        var /= 16.0;
        CHECK(std::abs(mu) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-5);
    }
}

TEST_CASE("backward twice gives identical gradients") {
    std::mt19937_64 rng(5);
    Tape<double> tape;
    auto w = tape.parameter(random_tensor({4, 3}, rng));
    auto x = tape.constant(random_tensor({2, 4}, rng));
    auto loss = ops::squared_l2(ops::matmul(x, w));
    auto g1 = tape.backward(loss);
    auto g2 = tape.backward(loss);
    CHECK(grad_of(g1, w) == grad_of(g2, w));
}

TEST_CASE("constants receive no gradient entry") {
    Tape<double> tape;
    auto frozen = tape.constant(Tensor<double>({2}, {1.0, 2.0}));
    auto p = tape.parameter(Tensor<double>({2}, {3.0, 4.0}));
    auto grads = tape.backward(ops::sum(ops::mul(frozen, p)));
    CHECK(grads.count(frozen.id()) == 0);
    CHECK(grads.size() == 1);
    CHECK(grad_of(grads, p) == Tensor<double>({2}, {1.0, 2.0}));
    CHECK_THROWS_AS(grad_of(grads, frozen), std::invalid_argument);
}

TEST_CASE("unused parameters still get a zero gradient buffer") {
    Tape<double> tape;
    auto used = tape.parameter(Tensor<double>({2}, {1.0, 2.0}));
    auto unused = tape.parameter(Tensor<double>({3, 2}));
    auto grads = tape.backward(ops::sum(used));
    CHECK(grad_of(grads, unused).shape() == Shape{3, 2});
}

TEST_CASE("shape errors name the primitive") {
    Tape<double> tape;
    auto a = tape.constant(Tensor<double>({2, 3}));
    auto b = tape.constant(Tensor<double>({4, 2}));
    try {
        ops::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("(2, 3)") != std::string::npos);
        CHECK(msg.find("(4, 2)") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::add(a, tape.constant(Tensor<double>({2}))), ShapeError);
    CHECK_THROWS_AS(ops::embedding(b, {9}, Shape{1}), ShapeError);
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
    Tape<double> tape;
    Tape<double> other;
    auto x = tape.parameter(Tensor<double>({3}));
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    auto y = ops::sum(other.parameter(Tensor<double>({3})));
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("permute and its inverse round-trip") {
    std::mt19937_64 rng(6);
    auto t = random_tensor({2, 3, 4}, rng);
    Tape<double> tape;
    auto p = ops::permute(ops::permute(tape.constant(t), {2, 0, 1}), {1, 2, 0});
    CHECK(p.value() == t);
    auto tt = ops::transpose(ops::transpose(tape.constant(t)));
    CHECK(tt.value() == t);
}
