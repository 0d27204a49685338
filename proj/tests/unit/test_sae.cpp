#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/primitive_cases.hpp"
#include "saeforge/sae.hpp"

using namespace saeforge;
using saeforge::testing::random_tensor;

namespace {

SparseAutoencoder<double> random_sae(std::size_t d, std::size_t n, std::uint64_t seed) {
    auto sae = init_sae(d, n, seed).cast<double>();
    std::mt19937_64 rng(seed + 100);
    sae.encoder_bias = random_tensor({n}, rng, -0.5, 0.5);
    sae.decoder_bias = random_tensor({d}, rng, -0.5, 0.5);
    return sae;
}

}  // namespace

TEST_CASE("encode at the origin is ReLU(b_e)") {
    auto sae = random_sae(6, 12, 1);
    const auto codes = encode(sae, Tensor<double>({1, 6}));
    for (std::size_t j = 0; j < 12; ++j) {
        CHECK(codes[j] == std::max(0.0, sae.encoder_bias[j]));
    }
}

TEST_CASE("encode is positively homogeneous when b_e = 0 and pre-activations are positive") {
    auto sae = random_sae(4, 8, 2);
    sae.encoder_bias = Tensor<double>({8});
    // W_e = |W_e| and a > 0 makes every pre-activation positive
    for (auto& v : sae.encoder_weight.data()) {
        v = std::abs(v);
    }
    Tensor<double> a({1, 4}, {0.3, 1.2, 0.7, 2.0});
    Tensor<double> a2({1, 4}, {0.6, 2.4, 1.4, 4.0});
    const auto c1 = encode(sae, a);
    const auto c2 = encode(sae, a2);
    for (std::size_t j = 0; j < 8; ++j) {
        REQUIRE(c1[j] > 0.0);
        CHECK(c2[j] == 2.0 * c1[j]);
    }
}

TEST_CASE("encode and decode match loop oracles") {
    const std::size_t d = 8, n = 24;
    auto sae = random_sae(d, n, 3);
    std::mt19937_64 rng(9);
    const auto a = random_tensor({2, 3, d}, rng);
    const auto codes = encode(sae, a);
    const auto out = decode(sae, codes);
    CHECK(codes.shape() == Shape{2, 3, n});
    CHECK(out.shape() == Shape{2, 3, d});
    double worst = 0.0;
    for (std::size_t r = 0; r < 6; ++r) {
        std::vector<double> c(n);
        for (std::size_t j = 0; j < n; ++j) {
            double s = sae.encoder_bias[j];
            for (std::size_t k = 0; k < d; ++k) {
                s += sae.encoder_weight[j * d + k] * a[r * d + k];
            }
            c[j] = s > 0.0 ? s : 0.0;
            worst = std::max(worst, std::abs(c[j] - codes[r * n + j]));
            CHECK(codes[r * n + j] >= 0.0);
        }
        for (std::size_t k = 0; k < d; ++k) {
            double s = sae.decoder_bias[k];
            for (std::size_t j = 0; j < n; ++j) {
                s += sae.dictionary[j * d + k] * c[j];
            }
            worst = std::max(worst, std::abs(s - out[r * d + k]));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("decode of zero and one-hot codes") {
    const std::size_t d = 5, n = 10;
    auto sae = random_sae(d, n, 4);
    const auto z = decode(sae, Tensor<double>({n}));
    CHECK(z == sae.decoder_bias);
    Tensor<double> e({n});
    e[7] = 1.0;
    const auto y = decode(sae, e);
    for (std::size_t k = 0; k < d; ++k) {
        CHECK(y[k] == doctest::Approx(sae.dictionary[7 * d + k] + sae.decoder_bias[k]).epsilon(1e-15));
    }
}

TEST_CASE("decode is affine") {
    const std::size_t d = 6, n = 18;
    auto sae = random_sae(d, n, 5);
    std::mt19937_64 rng(1);
    const auto c1 = random_tensor({3, n}, rng, 0.0, 2.0);
    const auto c2 = random_tensor({3, n}, rng, 0.0, 2.0);
    Tensor<double> sum({3, n});
    for (std::size_t i = 0; i < sum.numel(); ++i) {
        sum[i] = c1[i] + c2[i];
    }
    const auto y1 = decode(sae, c1), y2 = decode(sae, c2), y12 = decode(sae, sum);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t k = 0; k < d; ++k) {
            const double b = sae.decoder_bias[k];
            CHECK(std::abs((y12[r * d + k] - b) - (y1[r * d + k] - b) - (y2[r * d + k] - b)) <= 1e-5);
        }
    }
}

TEST_CASE("identity construction reconstructs exactly") {
    const auto sae = identity_sae<double>(16, 2);
    CHECK(sae.n_dict() == 32);
    CHECK(sae.placement_layer == 2);
    CHECK(max_row_norm_error(sae) == 0.0);
    std::mt19937_64 rng(7);
    const auto a = random_tensor({4, 5, 16}, rng, -10.0, 10.0);
    const auto r = reconstruct(sae, a);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(r[i] - a[i]));
    }
    CHECK(worst <= 1e-12);
    const auto rf = reconstruct(identity_sae<float>(16), a.cast<float>());
    CHECK(rf == a.cast<float>());
}

TEST_CASE("shape mismatches are rejected") {
    auto sae = random_sae(4, 8, 6);
    CHECK_THROWS_AS(encode(sae, Tensor<double>({2, 5})), ShapeError);
    CHECK_THROWS_AS(decode(sae, Tensor<double>({2, 4})), ShapeError);
    sae.decoder_bias = Tensor<double>({3});
    CHECK_THROWS_AS(encode(sae, Tensor<double>({2, 4})), std::invalid_argument);
}

TEST_CASE("renormalize_dictionary") {
    SparseAutoencoder<double> sae = identity_sae<double>(3);
    sae.dictionary = Tensor<double>({6, 3}, {3, 4, 0, 0, 0, 2, 1, 1, 1, -1, 0, 0, 0, -5, 0, 0, 0, -1});
    renormalize_dictionary(sae);
    CHECK(sae.dictionary[0] == doctest::Approx(0.6));
    CHECK(sae.dictionary[1] == doctest::Approx(0.8));
    CHECK(sae.dictionary[2] == 0.0);
    CHECK(max_row_norm_error(sae) <= 1e-15);
    const auto before = sae.dictionary;
    renormalize_dictionary(sae);
    for (std::size_t i = 0; i < before.numel(); ++i) {
        CHECK(std::abs(sae.dictionary[i] - before[i]) <= 1e-7);
    }

    auto rnd = init_sae(32, 200, 3);
    std::mt19937_64 rng(5);
    rnd.dictionary = random_tensor({200, 32}, rng).cast<float>();
    renormalize_dictionary(rnd);
    CHECK(max_row_norm_error(rnd) <= 1e-6);

    sae.dictionary[3 * 3 + 0] = 0.0;
    sae.dictionary[3 * 3 + 1] = 0.0;
    sae.dictionary[3 * 3 + 2] = 0.0;
    try {
        renormalize_dictionary(sae);
        FAIL("expected a throw");
    } catch (const std::domain_error& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
}

TEST_CASE("init_sae conventions") {
    const auto a = init_sae(64, 3840, 11, 1);
    const auto b = init_sae(64, 3840, 11, 1);
    CHECK(a.encoder_weight == b.encoder_weight);
    CHECK(a.dictionary == b.dictionary);
    CHECK_FALSE(init_sae(64, 3840, 12).encoder_weight == a.encoder_weight);
    for (auto v : a.encoder_bias.data()) CHECK(v == 0.0f);
    for (auto v : a.decoder_bias.data()) CHECK(v == 0.0f);
    CHECK(max_row_norm_error(a) <= 1e-6);
    double s = 0.0, sq = 0.0;
    for (auto v : a.encoder_weight.data()) {
        s += v;
        sq += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(a.encoder_weight.numel());
    const double var = sq / n - (s / n) * (s / n);
    CHECK(std::abs(var - 2.0 / 64.0) <= 0.2 * (2.0 / 64.0));
    CHECK_THROWS_AS(init_sae(0, 4, 1), std::invalid_argument);
}

TEST_CASE("taped encode/decode match value-level and have correct gradients") {
    const std::size_t d = 4, n = 8;
    auto sae = random_sae(d, n, 8);
    // draw inputs whose pre-activations stay clear of the ReLU kink
    auto closest_preactivation = [&](const Tensor<double>& a) {
        double closest = 1e9;
        for (std::size_t r = 0; r < a.numel() / d; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                double z = sae.encoder_bias[j];
                for (std::size_t k = 0; k < d; ++k) z += sae.encoder_weight[j * d + k] * a[r * d + k];
                closest = std::min(closest, std::abs(z));
            }
        }
        return closest;
    };
    std::mt19937_64 rng(3);
    Tensor<double> a;
    do {
        a = saeforge::testing::kink_free_tensor({2, 3, d}, rng);
    } while (closest_preactivation(a) < 1e-2);

    Tape<double> tape;
    auto bound = bind_sae(tape, sae, true);
    auto y = decode(bound, encode(bound, tape.constant(a)));
    const auto ref = reconstruct(sae, a);
    for (std::size_t i = 0; i < ref.numel(); ++i) {
        CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }

    ScalarFn fn = [&](Tape<double>& t, const std::vector<Var<double>>& in) {
        BoundSae<double> b{in[0], in[1], in[2], in[3], 0};
        return saeforge::testing::weighted_sum(t, decode(b, encode(b, in[4])), 4);
    };
    const auto r = finite_difference_check(
        fn, {sae.encoder_weight, sae.encoder_bias, sae.dictionary, sae.decoder_bias, a}, 1e-4);
    CHECK(r.max_rel_error <= 1e-4);
}
