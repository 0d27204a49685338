#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "../support/primitive_cases.hpp"
#include "saeforge/metrics.hpp"

using namespace saeforge;
using saeforge::testing::random_tensor;

namespace {

TransformerConfig toy_config() {
    TransformerConfig c;
    c.n_layers = 3;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.context_len = 8;
    return c;
}

TransformerParams<double> toy_model(std::uint64_t seed) {
    auto p = init_transformer(toy_config(), seed).cast<double>();
    for (auto& [name, t] : p.named()) {
        if (name.find("gain") == std::string::npos) {
            for (auto& v : t->data()) v *= 20.0;
        }
    }
    return p;
}

SparseAutoencoder<double> random_sae(std::size_t layer, std::uint64_t seed, std::size_t n = 24) {
    auto sae = init_sae(8, n, seed, layer).cast<double>();
    std::mt19937_64 rng(seed);
    sae.encoder_bias = random_tensor({n}, rng, -0.5, 0.2);
    return sae;
}

Tensor<double> gaussian(const Shape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor<double> t(s);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

}  // namespace

TEST_CASE("identity SAE gives a null report") {
    const auto model = toy_model(1);
    const auto data = uniform_dataset(16, 5, 8, 3);
    for (std::size_t l = 0; l < 3; ++l) {
        const auto rep = evaluate_sae(model, identity_sae<double>(8, l), data);
        CHECK(std::abs(rep.ce_increase) <= 1e-6);
        CHECK(rep.ce_increase == rep.ce_sae - rep.ce_orig);
        CHECK(rep.kl_eval <= 1e-8);
        CHECK(rep.downstream_mse.size() == 3 - l);
        for (const auto& [k, v] : rep.downstream_mse) CHECK(v <= 1e-8);
        for (const auto& [k, ev] : rep.explained_variance) {
            CHECK(ev.raw == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(ev.normalized == doctest::Approx(1.0).epsilon(1e-12));
        }
        CHECK(std::abs(rep.l2_ratio.position0 - 1.0) <= 1e-6);
        CHECK(std::abs(rep.l2_ratio.later - 1.0) <= 1e-6);
        CHECK(rep.recon_cosine.mean == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(rep.eval_tokens == 40);
    }
}

TEST_CASE("ce increase of an all-zero SAE matches a manual forward") {
    const auto model = toy_model(2);
    const auto data = uniform_dataset(16, 4, 8, 5);
    auto sae = random_sae(1, 3);
    sae.encoder_bias = Tensor<double>::full({24}, -1e6);  // codes always zero
    std::mt19937_64 rng(1);
    sae.decoder_bias = random_tensor({8}, rng);
    const auto ce = ce_loss_increase(model, sae, data);

    // stream replaced by b_d at every position
    Tensor<double> stream({4, 8, 8});
    for (std::size_t i = 0; i < stream.numel(); ++i) stream[i] = sae.decoder_bias[i % 8];
    const auto manual = forward_from_layer(model, stream, 1);
    const double ce_sae = next_token_cross_entropy(manual.logits, data);
    const double ce_orig = evaluate_cross_entropy(model, data);
    CHECK(ce.ce_orig == doctest::Approx(ce_orig).epsilon(1e-12));
    CHECK(ce.increase == doctest::Approx(ce_sae - ce_orig).epsilon(1e-10));
}

TEST_CASE("l0 counts") {
    CHECK(l0_mean(Tensor<double>({3, 5})) == 0.0);
    const auto sae = identity_sae<double>(8);
    // each coordinate of a Gaussian vector is nonzero, so exactly one of the pair fires
    const auto codes = encode(sae, gaussian({100, 8}, 2));
    CHECK(l0_mean(codes) == 8.0);
    std::mt19937_64 rng(3);
    const auto c = random_tensor({7, 11}, rng, -1.0, 1.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < c.numel(); ++i) count += c[i] > 0.0;
    CHECK(l0_mean(c) == static_cast<double>(count) / 7.0);
}

TEST_CASE("downstream MSE matches a two-forward-pass oracle") {
    const auto model = toy_model(4);
    const auto data = uniform_dataset(16, 6, 8, 1);
    const auto sae = random_sae(0, 5);
    EvalOptions opt;
    opt.batch_size = 4;  // uneven batches exercise the streaming path
    const auto rep = evaluate_sae(model, sae, data, opt);
    const auto orig = forward_with_cache(model, data);
    const auto spliced = forward_from_layer(model, reconstruct(sae, orig.residual(0)), 0);
    for (std::size_t k = 0; k < 3; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < orig.residual(k).numel(); ++i) {
            const double e = orig.residual(k)[i] - spliced.residual(k)[i];
            s += e * e;
        }
        CHECK(std::abs(rep.downstream_mse.at(k) - s / 48.0) <= 1e-6 * std::max(1.0, s / 48.0));
    }
    for (const auto& [k, v] : rep.downstream_mse) CHECK(v >= 0.0);
}

TEST_CASE("explained variance conventions") {
    const auto a = gaussian({50, 6}, 7);
    CHECK(explained_variance(a, a, false) == doctest::Approx(1.0));
    Tensor<double> mean_only(a.shape());
    for (std::size_t k = 0; k < 6; ++k) {
        double m = 0.0;
        for (std::size_t r = 0; r < 50; ++r) m += a[r * 6 + k];
        for (std::size_t r = 0; r < 50; ++r) mean_only[r * 6 + k] = m / 50.0;
    }
    CHECK(std::abs(explained_variance(a, mean_only, false)) <= 1e-12);
    Tensor<double> twice(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) twice[i] = 2.0 * a[i];
    CHECK(explained_variance(a, twice, true) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(explained_variance(a, twice, false) == doctest::Approx(0.0).epsilon(1e-12));

    // oracle: 1 - sum_d Var(r_d) / sum_d Var(a_d)
    const auto noisy = gaussian({50, 6}, 8);
    Tensor<double> ahat(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) ahat[i] = a[i] + 0.3 * noisy[i];
    auto var = [](const std::vector<double>& x) {
        double m = 0.0, s = 0.0;
        for (double v : x) m += v;
        m /= static_cast<double>(x.size());
        for (double v : x) s += (v - m) * (v - m);
        return s / static_cast<double>(x.size());
    };
    double vr = 0.0, va = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
        std::vector<double> ra, aa;
        for (std::size_t r = 0; r < 50; ++r) {
            aa.push_back(a[r * 6 + k]);
            ra.push_back(a[r * 6 + k] - ahat[r * 6 + k]);
        }
        vr += var(ra);
        va += var(aa);
    }
    CHECK(explained_variance(a, ahat, false) == doctest::Approx(1.0 - vr / va).epsilon(1e-10));
    CHECK_THROWS_AS(explained_variance(Tensor<double>({4, 3}), Tensor<double>({4, 3}), false), std::domain_error);
}

TEST_CASE("l2 ratio and cosine summaries") {
    const auto a = gaussian({3, 4, 5}, 1);
    auto r = l2_ratio(a, a);
    CHECK(r.position0 == 1.0);
    CHECK(r.later == 1.0);

    Tensor<double> neg(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) neg[i] = -a[i];
    const auto cs = cosine_summary(a, neg);
    CHECK(cs.mean == doctest::Approx(-1.0));
    for (double q : cs.deciles) CHECK(q == doctest::Approx(-1.0));

    const auto b = gaussian({3, 4, 5}, 2);
    r = l2_ratio(a, b);
    double s0 = 0.0, s1 = 0.0;
    std::vector<double> cos;
    for (std::size_t row = 0; row < 12; ++row) {
        double na = 0.0, nb = 0.0, dot = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            na += a[row * 5 + k] * a[row * 5 + k];
            nb += b[row * 5 + k] * b[row * 5 + k];
            dot += a[row * 5 + k] * b[row * 5 + k];
        }
        (row % 4 == 0 ? s0 : s1) += std::sqrt(nb) / std::sqrt(na);
        cos.push_back(dot / std::sqrt(na * nb));
    }
    CHECK(std::abs(r.position0 - s0 / 3.0) <= 1e-6);
    CHECK(std::abs(r.later - s1 / 9.0) <= 1e-6);
    const auto c = cosine_summary(a, b);
    double m = 0.0;
    for (double v : cos) m += v;
    CHECK(std::abs(c.mean - m / 12.0) <= 1e-6);
    std::sort(cos.begin(), cos.end());
    // 50th percentile of 12 values interpolates ranks 5 and 6
    CHECK(c.deciles[4] == doctest::Approx(0.5 * (cos[5] + cos[6])));

    auto zeroed = a;
    for (std::size_t k = 0; k < 5; ++k) zeroed[5 + k] = 0.0;
    CHECK(l2_ratio(zeroed, b).excluded == 1);
    CHECK(cosine_summary(zeroed, b).excluded == 1);
    CHECK(cosine_summary(zeroed, b).count == 11);
}

TEST_CASE("top-k activations match a full-sort oracle") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::size_t S = 5, P = 7, N = 9, K = 4;
    Tensor<double> codes({S, P, N});
    for (auto& v : codes.data()) {
        const double x = u(rng);
        v = x > 0.2 ? std::round(x * 4.0) / 4.0 : 0.0;  // coarse values force ties
    }
    for (std::size_t i = 0; i < S * P; ++i) codes[i * N + 8] = 0.0;  // feature 8 never fires
    codes[(2 * P + 3) * N + 8] = 0.5;                             // ... except once
    for (std::size_t i = 0; i < S * P; ++i) codes[i * N + 7] = 0.0;
    const auto tokens = uniform_dataset(10, S, P, 1);
    const auto top = top_k_activations(codes, tokens, K, 2);
    REQUIRE(top.size() == N);
    CHECK(top[7].empty());
    REQUIRE(top[8].size() == 1);
    CHECK(top[8][0].sequence == 2);
    CHECK(top[8][0].position == 3);
    CHECK(top[8][0].context_start == 1);
    CHECK(top[8][0].context.size() == 5);
    for (std::size_t j = 0; j < 7; ++j) {
        std::vector<std::tuple<double, std::size_t, std::size_t>> all;
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t p = 0; p < P; ++p)
                if (codes[(s * P + p) * N + j] > 0.0) all.emplace_back(-codes[(s * P + p) * N + j], s, p);
        std::sort(all.begin(), all.end());
        all.resize(std::min(all.size(), K));
        REQUIRE(top[j].size() == all.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
            CHECK(top[j][i].activation == -std::get<0>(all[i]));
            CHECK(top[j][i].sequence == std::get<1>(all[i]));
            CHECK(top[j][i].position == std::get<2>(all[i]));
        }
    }
    CHECK_THROWS_AS(top_k_activations(codes, tokens, 0, 2), std::invalid_argument);
}

TEST_CASE("evaluation is read-only and reproducible") {
    const auto model = toy_model(9);
    const auto sae = random_sae(1, 9);
    const auto model_copy = model;
    const auto sae_copy = sae;
    const auto data = uniform_dataset(16, 4, 8, 2);
    const auto a = evaluate_sae(model, sae, data);
    const auto b = evaluate_sae(model, sae, data);
    CHECK(a.ce_sae == b.ce_sae);
    CHECK(a.kl_eval == b.kl_eval);
    CHECK(a.l0_mean == b.l0_mean);
    CHECK(model.unembed == model_copy.unembed);
    CHECK(sae.dictionary == sae_copy.dictionary);
    CHECK(a.kl_eval >= 0.0);
    CHECK(a.l0_mean <= 24.0);

    const auto alive = alive_features(model, sae, data);
    const auto examples = max_activating_examples(model, sae, data, 3, 1);
    std::size_t n_alive = 0;
    for (std::size_t j = 0; j < alive.size(); ++j) {
        n_alive += alive[j];
        CHECK(alive[j] == !examples[j].empty());
    }
    CHECK(n_alive == a.alive_count);
    CHECK_THROWS_AS(evaluate_sae(model, random_sae(3, 1), data), std::invalid_argument);
    CHECK_THROWS_AS(evaluate_sae(model, sae, TokenDataset{}), std::invalid_argument);
}
