#include <doctest.h>
#include <fstream>

#include <cmath>
#include <filesystem>
#include <random>

#include "../support/primitive_cases.hpp"
#include "saeforge/geometry.hpp"

using namespace saeforge;
using saeforge::testing::random_tensor;

namespace {

Tensor<double> gaussian(const Shape& s, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    Tensor<double> t(s);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

double cosine(const Tensor<double>& m, std::size_t i, const Tensor<double>& o, std::size_t j) {
    const std::size_t d = m.dim(1);
    double dot = 0.0, a = 0.0, b = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        dot += m[i * d + k] * o[j * d + k];
        a += m[i * d + k] * m[i * d + k];
        b += o[j * d + k] * o[j * d + k];
    }
    return dot / std::sqrt(a * b);
}

TransformerParams<double> toy_model(std::uint64_t seed) {
    TransformerConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.context_len = 8;
    auto p = init_transformer(c, seed).cast<double>();
    for (auto& [name, t] : p.named()) {
        if (name.find("gain") == std::string::npos) {
            for (auto& v : t->data()) v *= 20.0;
        }
    }
    return p;
}

}  // namespace

TEST_CASE("bootstrap CI basics") {
    const std::vector<double> constant(40, 0.3);
    const auto ci = bootstrap_mean_ci(constant);
    CHECK(ci.lo == 0.3);
    CHECK(ci.hi == 0.3);
    CHECK(ci.resamples == 5000);

    const auto g = gaussian({200}, 1);
    std::vector<double> v(g.data().begin(), g.data().end());
    BootstrapOptions o;
    o.seed = 4;
    const auto a = bootstrap_mean_ci(v, o);
    const auto b = bootstrap_mean_ci(v, o);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);
    double m = 0.0;
    for (double x : v) m += x;
    m /= 200.0;
    CHECK(a.lo <= m);
    CHECK(m <= a.hi);
    CHECK_THROWS_AS(bootstrap_mean_ci(std::vector<double>{}), std::invalid_argument);
    o.confidence = 1.0;
    CHECK_THROWS_AS(bootstrap_mean_ci(v, o), std::invalid_argument);
}

TEST_CASE("bootstrap CI width shrinks like 1/sqrt(n)") {
    BootstrapOptions o;
    o.resamples = 2000;
    auto width = [&](std::size_t n) {
        const auto g = gaussian({n}, n);
        std::vector<double> v(g.data().begin(), g.data().end());
        const auto ci = bootstrap_mean_ci(v, o);
        return ci.hi - ci.lo;
    };
    const double ratio = width(100) / width(1600);
    CHECK(ratio > 3.0);
    CHECK(ratio < 5.3);
}

TEST_CASE("within-SAE similarity") {
    Tensor<double> eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    const auto p = within_sae_similarity(eye);
    for (double v : p.values) CHECK(v == 0.0);
    CHECK(p.ci.lo == 0.0);

    auto dup = eye;
    for (std::size_t k = 0; k < 4; ++k) dup[3 * 4 + k] = 2.0 * dup[1 * 4 + k];
    const auto q = within_sae_similarity(dup);
    CHECK(q.values[1] == doctest::Approx(1.0));
    CHECK(q.values[3] == doctest::Approx(1.0));

    const auto dict = gaussian({50, 6}, 3);
    std::vector<bool> alive(50, true);
    alive[7] = alive[20] = false;
    const auto r = within_sae_similarity(dict, alive);
    REQUIRE(r.values.size() == 48);
    double worst = 0.0;
    for (std::size_t a = 0; a < r.rows.size(); ++a) {
        double best = -2.0;
        for (std::size_t j = 0; j < 50; ++j) {
            if (j != r.rows[a] && alive[j]) best = std::max(best, cosine(dict, r.rows[a], dict, j));
        }
        worst = std::max(worst, std::abs(best - r.values[a]));
        CHECK(r.values[a] >= -1.0);
        CHECK(r.values[a] <= 1.0);
    }
    CHECK(worst <= 1e-6);
    CHECK(r.ci.lo <= r.mean);
    CHECK(r.mean <= r.ci.hi);

    std::vector<bool> one(50, false);
    one[0] = true;
    CHECK_THROWS_AS(within_sae_similarity(dict, one), std::invalid_argument);
}

TEST_CASE("cross-SAE similarity") {
    const auto a = gaussian({30, 5}, 1);
    const auto self = cross_sae_similarity(a, {}, a, {});
    for (double v : self.values) CHECK(v == doctest::Approx(1.0));

    Tensor<double> left({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    Tensor<double> right({2, 4}, {0, 0, 1, 0, 0, 0, 0, 3});
    for (double v : cross_sae_similarity(left, {}, right, {}).values) CHECK(v == 0.0);

    const auto b = gaussian({40, 5}, 2);
    std::vector<bool> alive_b(40, true);
    alive_b[3] = false;
    const auto p = cross_sae_similarity(a, {}, b, alive_b, ComparisonKind::cross_type);
    CHECK(p.kind == ComparisonKind::cross_type);
    double worst = 0.0;
    for (std::size_t i = 0; i < 30; ++i) {
        double best = -2.0;
        for (std::size_t j = 0; j < 40; ++j) {
            if (alive_b[j]) best = std::max(best, cosine(a, i, b, j));
        }
        worst = std::max(worst, std::abs(best - p.values[i]));
    }
    CHECK(worst <= 1e-6);
    CHECK_THROWS_AS(cross_sae_similarity(a, {}, gaussian({3, 4}, 1), {}), std::invalid_argument);
}

TEST_CASE("PCA basis") {
    // a line through the origin and its negation
    Tensor<double> line({20, 3});
    for (std::size_t i = 0; i < 10; ++i) {
        const double t = 0.1 * static_cast<double>(i + 1);
        for (std::size_t k = 0; k < 3; ++k) {
            const double dir[3] = {1.0 / std::sqrt(3.0), -1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)};
            line[i * 3 + k] = t * dir[k];
            line[(10 + i) * 3 + k] = -t * dir[k];
        }
    }
    const auto pl = pca_basis(line);
    CHECK(pl.variance_share[0] == doctest::Approx(1.0));
    CHECK(std::abs(pl.directions[0] * std::sqrt(3.0)) == doctest::Approx(1.0));
    CHECK(pl.zero_eigenvalue[1]);
    CHECK(pl.zero_eigenvalue[2]);
    CHECK_FALSE(pl.zero_eigenvalue[0]);

    const std::size_t d = 6, n = 4000;
    const auto iso = gaussian({n, d}, 5);
    const auto pi = pca_basis(iso);
    for (double s : pi.variance_share) CHECK(std::abs(s - 1.0 / 6.0) < 0.03);

    // anisotropic data: orthonormality, ordering, eigen-residual, covariance reconstruction
    auto aniso = gaussian({500, d}, 6);
    for (std::size_t r = 0; r < 500; ++r) {
        for (std::size_t k = 0; k < d; ++k) aniso[r * d + k] *= 1.0 + static_cast<double>(k);
        aniso[r * d + 1] += 0.5 * aniso[r * d + 4] + 3.0;
    }
    const auto b = pca_basis(aniso);
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < 500; ++r)
        for (std::size_t k = 0; k < d; ++k) mean[k] += aniso[r * d + k] / 500.0;
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t r = 0; r < 500; ++r)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                cov[i * d + j] += (aniso[r * d + i] - mean[i]) * (aniso[r * d + j] - mean[j]) / 499.0;
    std::vector<double> rebuilt(d * d, 0.0);
    double frob = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        CHECK(b.mean[i] == doctest::Approx(mean[i]));
        if (i > 0) CHECK(b.eigenvalues[i] <= b.eigenvalues[i - 1]);
        for (std::size_t j = 0; j < d; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += b.directions[i * d + k] * b.directions[j * d + k];
            CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-6);
        }
        for (std::size_t r = 0; r < d; ++r) {
            double cv = 0.0;
            for (std::size_t k = 0; k < d; ++k) cv += cov[r * d + k] * b.directions[i * d + k];
            CHECK(std::abs(cv - b.eigenvalues[i] * b.directions[i * d + r]) <= 1e-5);
        }
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c)
                rebuilt[r * d + c] += b.eigenvalues[i] * b.directions[i * d + r] * b.directions[i * d + c];
    }
    for (std::size_t i = 0; i < d * d; ++i) {
        frob += cov[i] * cov[i];
        diff += (cov[i] - rebuilt[i]) * (cov[i] - rebuilt[i]);
    }
    CHECK(std::sqrt(diff / frob) <= 1e-4);
    CHECK_THROWS_AS(pca_basis(gaussian({6, 6}, 1)), std::invalid_argument);
}

TEST_CASE("direction correlation") {
    const auto a = gaussian({6, 5, 4}, 1);
    const std::vector<double> v{0.5, 0.5, 0.5, 0.5};
    const auto same = direction_correlation(a, a, v);
    REQUIRE(same.position0.has_value());
    CHECK(*same.position0 == doctest::Approx(1.0));
    CHECK(*same.later == doctest::Approx(1.0));

    // remove the v component entirely: output component is constant
    auto removed = a;
    for (std::size_t r = 0; r < 30; ++r) {
        double p = 0.0;
        for (std::size_t k = 0; k < 4; ++k) p += a[r * 4 + k] * v[k];
        for (std::size_t k = 0; k < 4; ++k) removed[r * 4 + k] -= p * v[k];
    }
    const auto gone = direction_correlation(a, removed, v);
    CHECK_FALSE(gone.position0.has_value());
    CHECK_FALSE(gone.later.has_value());

    const auto noise = gaussian({6, 5, 4}, 2);
    auto mixed = a;
    for (std::size_t i = 0; i < a.numel(); ++i) mixed[i] += noise[i];
    const auto c = direction_correlation(a, mixed, v);
    std::vector<double> x, y;
    for (std::size_t r = 0; r < 30; ++r) {
        if (r % 5 == 0) continue;
        double px = 0.0, py = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            px += a[r * 4 + k] * v[k];
            py += mixed[r * 4 + k] * v[k];
        }
        x.push_back(px);
        y.push_back(py);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i] / static_cast<double>(x.size());
        my += y[i] / static_cast<double>(y.size());
    }
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    CHECK(std::abs(*c.later - sxy / std::sqrt(sxx * syy)) <= 1e-6);
}

TEST_CASE("direction preservation through an identity SAE") {
    const auto model = toy_model(2);
    const auto data = uniform_dataset(16, 6, 8, 1);
    const auto basis = pca_basis(residual_at(model, data, 1));
    const auto r = direction_preservation(model, identity_sae<double>(8, 1), basis, 0, data);
    CHECK(*r.position0 == doctest::Approx(1.0));
    CHECK(*r.later == doctest::Approx(1.0));
}

TEST_CASE("resample ablation") {
    const auto model = toy_model(3);
    const auto data = uniform_dataset(16, 6, 8, 4);
    const std::vector<double> v{0.1, -0.2, 0.3, 0.4, 0.0, 0.5, -0.6, 0.25};
    const double id = resample_ablation_kl(model, 1, std::span<const double>(v), data, identity_resample_map(6, 8));
    CHECK(id <= 1e-8);
    const std::vector<double> zero(8, 0.0);
    CHECK(resample_ablation_kl(model, 1, std::span<const double>(zero), data, random_resample_map(6, 8, 1)) == 0.0);
    const double kl = resample_ablation_kl(model, 1, std::span<const double>(v), data, random_resample_map(6, 8, 1));
    CHECK(kl > 0.0);
    const auto basis = pca_basis(residual_at(model, data, 1));
    CHECK(resample_ablation_kl(model, 1, basis, 0, data, 7) == resample_ablation_kl(model, 1, basis, 0, data, 7));

    const auto map = random_resample_map(5, 4, 3);
    for (std::size_t s = 0; s < 5; ++s) {
        for (std::size_t i = 1; i < 4; ++i) {
            CHECK(map[s * 4 + i].sequence != s);
            CHECK(map[s * 4 + i].position > 0);
        }
    }
    CHECK_THROWS_AS(random_resample_map(1, 4, 0), std::invalid_argument);
}

TEST_CASE("feature matrix export round-trips") {
    const auto dir = std::filesystem::temp_directory_path() / "saeforge_geometry_test";
    std::filesystem::create_directories(dir);
    const auto a = gaussian({10, 4}, 1);
    const auto b = gaussian({12, 4}, 2);
    std::vector<bool> alive_b(12, true);
    alive_b[0] = alive_b[5] = false;
    export_feature_matrix({{"local_s0", a, {}}, {"e2e_s0", b, alive_b}}, dir / "f.csv");
    const auto rows = read_feature_matrix(dir / "f.csv");
    REQUIRE(rows.size() == 20);
    CHECK(rows[0].label == "local_s0");
    CHECK(rows[10].label == "e2e_s0");
    CHECK(rows[10].index == 1);
    double worst = 0.0;
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t k = 0; k < 4; ++k) worst = std::max(worst, std::abs(rows[i].values[k] - a[i * 4 + k]));
    CHECK(worst <= 1e-7);

    std::ifstream f(dir / "f.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "sae_label,feature_index,d0,d1,d2,d3");

    export_feature_matrix({{"dead", a, std::vector<bool>(10, false)}}, dir / "empty.csv");
    CHECK(read_feature_matrix(dir / "empty.csv").empty());
    CHECK_THROWS_AS(export_feature_matrix({{"bad,label", a, {}}}, dir / "x.csv"), std::invalid_argument);
    std::filesystem::remove_all(dir);
}
