#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/primitive_cases.hpp"
#include "saeforge/losses.hpp"

using namespace saeforge;
using saeforge::testing::random_tensor;

namespace {

TransformerConfig toy_config(std::size_t layers) {
    TransformerConfig c;
    c.n_layers = layers;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 12;
    c.context_len = 8;
    return c;
}

TransformerParams<double> toy_model(std::size_t layers, std::uint64_t seed) {
    auto p = init_transformer(toy_config(layers), seed).cast<double>();
    for (auto& [name, t] : p.named()) {
        if (name.find("gain") == std::string::npos) {
            for (auto& v : t->data()) v *= 20.0;
        }
    }
    return p;
}

SparseAutoencoder<double> random_sae(std::size_t d, std::size_t n, std::size_t layer, std::uint64_t seed) {
    auto sae = init_sae(d, n, seed, layer).cast<double>();
    std::mt19937_64 rng(seed + 1);
    sae.encoder_bias = random_tensor({n}, rng, -0.3, 0.3);
    sae.decoder_bias = random_tensor({d}, rng, -0.3, 0.3);
    return sae;
}

std::vector<double> softmax_row(const double* z, std::size_t v) {
    double mx = z[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    std::vector<double> p(v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (p[j] = std::exp(z[j] - mx));
    for (auto& x : p) x /= s;
    return p;
}

// Mean over rows of sum_j p log(p / q), from full probability vectors.
double kl_oracle(const Tensor<double>& logits_p, const Tensor<double>& logits_q) {
    const std::size_t v = logits_p.shape().back();
    const std::size_t rows = logits_p.numel() / v;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto p = softmax_row(logits_p.data().data() + r * v, v);
        const auto q = softmax_row(logits_q.data().data() + r * v, v);
        for (std::size_t j = 0; j < v; ++j) total += p[j] * (std::log(p[j]) - std::log(q[j]));
    }
    return total / static_cast<double>(rows);
}

double sq_dist_per_row(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.numel() / a.shape().back());
}

}  // namespace

TEST_CASE("sparsity_phi") {
    CHECK(sparsity_phi(4.0, 768) == 4.0 / 768.0);
    CHECK(sparsity_phi(0.0, 768) == 0.0);
    CHECK(sparsity_phi(50.0, 768) == 50.0 / 768.0);
    CHECK_THROWS_AS(sparsity_phi(1.0, 0), std::invalid_argument);
}

TEST_CASE("loss config defaults and validation") {
    LossConfig c;
    c.kind = LossKind::e2e;
    CHECK(c.effective_kl_coeff() == 1.0);
    c.kind = LossKind::e2e_downstream;
    CHECK(c.effective_kl_coeff() == 0.5);
    c.kl_coeff = 2.0;
    CHECK(c.effective_kl_coeff() == 2.0);
    c.kl_coeff = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = LossConfig{};
    c.lambda = -1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(parse_loss_kind("e2e_ds") == LossKind::e2e_downstream);
    CHECK(parse_loss_kind(loss_kind_name(LossKind::local)) == LossKind::local);
    CHECK_THROWS_AS(parse_loss_kind("mse"), std::invalid_argument);
    CHECK(parse_kl_direction(kl_direction_name(KlDirection::sae_to_original)) == KlDirection::sae_to_original);
}

TEST_CASE("local loss: identity, constant offset and scalar oracle") {
    LossConfig cfg;
    cfg.lambda = 0.0;
    std::mt19937_64 rng(1);
    const auto a = random_tensor({3, 4, 8}, rng);
    CHECK(local_loss(identity_sae<double>(8), a, cfg).total == 0.0);

    auto shifted = identity_sae<double>(8);
    const auto v = random_tensor({8}, rng);
    shifted.decoder_bias = v;
    double vv = 0.0;
    for (auto x : v.data()) vv += x * x;
    CHECK(local_loss(shifted, a, cfg).reconstruction == doctest::Approx(vv).epsilon(1e-12));

    cfg.lambda = 3.0;
    const auto sae = random_sae(8, 32, 0, 2);
    const auto br = local_loss(sae, a, cfg);
    const auto codes = encode(sae, a);
    const auto out = decode(sae, codes);
    double l1 = 0.0;
    for (auto c : codes.data()) l1 += std::abs(c);
    const double rows = 12.0;
    const double expect_recon = sq_dist_per_row(a, out);
    const double expect_sparse = 3.0 / 8.0 * l1 / rows;
    CHECK(std::abs(br.reconstruction - expect_recon) <= 1e-6 * std::max(1.0, expect_recon));
    CHECK(std::abs(br.sparsity - expect_sparse) <= 1e-6 * std::max(1.0, expect_sparse));
    CHECK(std::abs(br.total - (br.reconstruction + br.sparsity)) <= 1e-6 * br.total);
    CHECK(br.kl == 0.0);
    CHECK(br.downstream == 0.0);

    cfg.kind = LossKind::e2e;
    CHECK_THROWS_AS(local_loss(sae, a, cfg), std::invalid_argument);
    CHECK_THROWS_AS(local_loss(sae, Tensor<double>({3, 4, 7}), LossConfig{}), ShapeError);
}

TEST_CASE("doubling lambda doubles the sparsity term exactly") {
    std::mt19937_64 rng(4);
    const auto a = random_tensor({2, 5, 8}, rng);
    const auto sae = random_sae(8, 24, 0, 3);
    for (double lam : {0.1, 0.7, 3.0, 12.5}) {
        LossConfig c1, c2;
        c1.lambda = lam;
        c2.lambda = 2.0 * lam;
        CHECK(local_loss(sae, a, c2).sparsity == 2.0 * local_loss(sae, a, c1).sparsity);
    }
}

TEST_CASE("e2e loss: identity, non-negativity and KL oracle") {
    const auto model = toy_model(2, 5);
    const auto data = uniform_dataset(12, 3, 6, 2);
    const auto cache = forward_with_cache(model, data);

    LossConfig cfg;
    cfg.kind = LossKind::e2e;
    cfg.lambda = 1.0;
    for (std::size_t l = 0; l < 2; ++l) {
        CHECK(std::abs(e2e_loss(identity_sae<double>(8, l), model, cache, cfg).kl) <= 1e-8);
    }

    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto sae = random_sae(8, 32, seed % 2, seed + 10);
        const auto br = e2e_loss(sae, model, cache, cfg);
        CHECK(br.kl >= 0.0);
        const auto a_hat = reconstruct(sae, cache.residual(sae.placement_layer));
        const auto spliced = forward_from_layer(model, a_hat, sae.placement_layer);
        const double oracle = kl_oracle(cache.logits, spliced.logits);
        CHECK(std::abs(br.kl - oracle) <= 1e-6 * std::max(1.0, oracle));
        CHECK(br.total == doctest::Approx(br.kl + br.sparsity).epsilon(1e-12));

        auto reverse = cfg;
        reverse.kl_direction = KlDirection::sae_to_original;
        const double rev_oracle = kl_oracle(spliced.logits, cache.logits);
        CHECK(std::abs(e2e_loss(sae, model, cache, reverse).kl - rev_oracle) <= 1e-6 * std::max(1.0, rev_oracle));

        // same reduction convention for the shared sparsity term
        LossConfig local = cfg;
        local.kind = LossKind::local;
        CHECK(local_loss(sae, cache.residual(sae.placement_layer), local).sparsity ==
              doctest::Approx(br.sparsity).epsilon(1e-14));
    }
}

TEST_CASE("e2e downstream loss: identity, term count and weighting") {
    const auto model = toy_model(4, 6);
    const auto data = uniform_dataset(12, 2, 5, 3);
    const auto cache = forward_with_cache(model, data);
    LossConfig cfg;
    cfg.kind = LossKind::e2e_downstream;
    cfg.lambda = 2.0;
    cfg.beta = 2.5;

    const auto id = e2e_downstream_loss(identity_sae<double>(8, 1), model, cache, cfg);
    CHECK(std::abs(id.kl) <= 1e-8);
    CHECK(std::abs(id.downstream) <= 1e-8);
    CHECK(id.downstream_per_layer.size() == 2);

    const auto sae = random_sae(8, 32, 2, 7);
    const auto br = e2e_downstream_loss(sae, model, cache, cfg);
    REQUIRE(br.downstream_per_layer.size() == 1);
    const auto spliced = forward_from_layer(model, reconstruct(sae, cache.residual(2)), 2);
    const double mse3 = sq_dist_per_row(spliced.residual(3), cache.residual(3));
    CHECK(br.downstream_per_layer[0] == doctest::Approx(mse3).epsilon(1e-9));
    CHECK(br.downstream == doctest::Approx(2.5 / 2.0 * mse3).epsilon(1e-9));
    CHECK(br.total == doctest::Approx(0.5 * br.kl + br.sparsity + br.downstream).epsilon(1e-12));

    // placement at layer 0 averages three terms over a divisor of four
    const auto sae0 = random_sae(8, 32, 0, 8);
    const auto b0 = e2e_downstream_loss(sae0, model, cache, cfg);
    REQUIRE(b0.downstream_per_layer.size() == 3);
    const double s = b0.downstream_per_layer[0] + b0.downstream_per_layer[1] + b0.downstream_per_layer[2];
    CHECK(b0.downstream == doctest::Approx(2.5 / 4.0 * s).epsilon(1e-12));

    CHECK_THROWS_AS(e2e_downstream_loss(random_sae(8, 32, 3, 9), model, cache, cfg), std::invalid_argument);
    CHECK_THROWS_AS(e2e_loss(sae, model, cache, cfg), std::invalid_argument);
}

TEST_CASE("full loss gradients with respect to SAE parameters match finite differences") {
    const auto model = toy_model(3, 8);
    const auto data = uniform_dataset(12, 2, 4, 5);
    const auto cache = forward_with_cache(model, data);
    const auto sae = random_sae(8, 16, 1, 4);
    for (auto kind : {LossKind::local, LossKind::e2e, LossKind::e2e_downstream}) {
        LossConfig cfg;
        cfg.kind = kind;
        cfg.lambda = 0.8;
        ScalarFn fn = [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
            BoundSae<double> b{in[0], in[1], in[2], in[3], 1};
            auto m = bind_transformer(tape, model, false);
            return taped_loss(tape, b, &m, cache, cfg).total;
        };
        const auto r = finite_difference_check(
            fn, {sae.encoder_weight, sae.encoder_bias, sae.dictionary, sae.decoder_bias}, 1e-5);
        INFO(loss_kind_name(kind), " worst ", r.worst_input, "/", r.worst_index, " ", r.worst_analytic, " vs ",
             r.worst_numeric);
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("non-finite activations abort the loss") {
    std::mt19937_64 rng(2);
    auto a = random_tensor({1, 2, 8}, rng);
    a[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(local_loss(random_sae(8, 16, 0, 1), a, LossConfig{}), std::domain_error);
}
