#include "saeforge/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace saeforge {

namespace {

double quantile_sorted(const std::vector<double>& s, double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

// Unit-normalized alive rows, with their original indices.
std::pair<Eigen::MatrixXd, std::vector<std::size_t>> alive_unit_rows(const Tensor<double>& dict,
                                                                     const std::vector<bool>& alive) {
    if (dict.rank() != 2) {
        throw std::invalid_argument("similarity: dictionary must be (n_dict, d_model), got " +
                                    shape_str(dict.shape()));
    }
    const std::size_t n = dict.dim(0), d = dict.dim(1);
    if (!alive.empty() && alive.size() != n) {
        throw std::invalid_argument("similarity: alive mask has " + std::to_string(alive.size()) + " entries for " +
                                    std::to_string(n) + " rows");
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
        if (alive.empty() || alive[i]) idx.push_back(i);
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < idx.size(); ++r) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += dict[idx[r] * d + k] * dict[idx[r] * d + k];
        const double norm = std::sqrt(sq);
        if (!(norm > 0.0)) {
            throw std::invalid_argument("similarity: row " + std::to_string(idx[r]) + " is zero");
        }
        for (std::size_t k = 0; k < d; ++k) {
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = dict[idx[r] * d + k] / norm;
        }
    }
    return {m, idx};
}

void finish_profile(SimilarityProfile& p, const BootstrapOptions& options) {
    double s = 0.0;
    for (double v : p.values) s += v;
    p.mean = s / static_cast<double>(p.values.size());
    p.ci = bootstrap_mean_ci(p.values, options);
}

std::string format_g9(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
    return std::string(buf, r.ptr);
}

template <typename T>
Tensor<double> residual_double(const TransformerParams<T>& model, const TokenDataset& data, std::size_t layer) {
    return residual_at(model.template cast<double>(), data, layer);
}

double kl_rows(const Tensor<double>& logits_p, const Tensor<double>& logits_q) {
    const std::size_t v = logits_p.shape().back();
    double total = 0.0;
    std::vector<double> lp(v), lq(v);
    auto ls = [v](const double* z, std::vector<double>& out) {
        double mx = z[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
        const double lz = mx + std::log(s);
        for (std::size_t j = 0; j < v; ++j) out[j] = z[j] - lz;
    };
    for (std::size_t r = 0; r < logits_p.numel() / v; ++r) {
        ls(logits_p.data().data() + r * v, lp);
        ls(logits_q.data().data() + r * v, lq);
        double kl = 0.0;
        for (std::size_t j = 0; j < v; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
        total += std::max(0.0, kl);
    }
    return total;
}

}  // namespace

ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, const BootstrapOptions& options) {
    if (values.empty()) {
        throw std::invalid_argument("bootstrap_mean_ci: no values");
    }
    if (options.resamples == 0) {
        throw std::invalid_argument("bootstrap_mean_ci: resamples must be >= 1");
    }
    if (!(options.confidence > 0.0 && options.confidence < 1.0)) {
        throw std::invalid_argument("bootstrap_mean_ci: confidence must be in (0, 1)");
    }
    // Means of deviations from values[0]; constant data then gives exactly values[0].
    const double shift = values[0];
    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> means(options.resamples);
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)] - shift;
        m = shift + s / static_cast<double>(values.size());
    }
    std::sort(means.begin(), means.end());
    const double tail = 0.5 * (1.0 - options.confidence);
    return {quantile_sorted(means, tail), quantile_sorted(means, 1.0 - tail), options.confidence, options.resamples};
}

std::string comparison_kind_name(ComparisonKind kind) {
    switch (kind) {
        case ComparisonKind::within: return "within";
        case ComparisonKind::cross_seed: return "cross_seed";
        case ComparisonKind::cross_type: return "cross_type";
    }
    return "unknown";
}

SimilarityProfile within_sae_similarity(const Tensor<double>& dictionary, const std::vector<bool>& alive,
                                        const BootstrapOptions& options) {
    const auto [m, idx] = alive_unit_rows(dictionary, alive);
    if (idx.size() < 2) {
        throw std::invalid_argument("within_sae_similarity: needs at least 2 alive rows, got " +
                                    std::to_string(idx.size()));
    }
    const Eigen::MatrixXd g = m * m.transpose();
    SimilarityProfile p;
    p.kind = ComparisonKind::within;
    p.rows = idx;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        double best = -1.0;
        for (Eigen::Index j = 0; j < g.cols(); ++j) {
            if (j != i) best = std::max(best, g(i, j));
        }
        p.values.push_back(std::clamp(best, -1.0, 1.0));
    }
    finish_profile(p, options);
    return p;
}

SimilarityProfile cross_sae_similarity(const Tensor<double>& dict_a, const std::vector<bool>& alive_a,
                                       const Tensor<double>& dict_b, const std::vector<bool>& alive_b,
                                       ComparisonKind kind, const BootstrapOptions& options) {
    if (dict_a.rank() != 2 || dict_b.rank() != 2 || dict_a.dim(1) != dict_b.dim(1)) {
        throw std::invalid_argument("cross_sae_similarity: dictionaries " + shape_str(dict_a.shape()) + " and " +
                                    shape_str(dict_b.shape()) + " do not share d_model");
    }
    const auto [ma, ia] = alive_unit_rows(dict_a, alive_a);
    const auto [mb, ib] = alive_unit_rows(dict_b, alive_b);
    if (ia.empty() || ib.empty()) {
        throw std::invalid_argument("cross_sae_similarity: both dictionaries need an alive row");
    }
    const Eigen::MatrixXd g = ma * mb.transpose();
    SimilarityProfile p;
    p.kind = kind;
    p.rows = ia;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
        p.values.push_back(std::clamp(g.row(i).maxCoeff(), -1.0, 1.0));
    }
    finish_profile(p, options);
    return p;
}

std::vector<double> PcaBasis::direction(std::size_t i) const {
    const std::size_t d = dim();
    if (i >= d) {
        throw std::out_of_range("PcaBasis: direction " + std::to_string(i) + " out of range");
    }
    return {directions.data().begin() + static_cast<std::ptrdiff_t>(i * d),
            directions.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

PcaBasis pca_basis(const Tensor<double>& activations) {
    if (activations.rank() == 0 || activations.shape().back() == 0) {
        throw std::invalid_argument("pca_basis: activations need a feature dimension");
    }
    const std::size_t d = activations.shape().back();
    const std::size_t n = activations.numel() / d;
    if (n < d + 1) {
        throw std::invalid_argument("pca_basis: need at least " + std::to_string(d + 1) + " samples, got " +
                                    std::to_string(n));
    }
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> x(activations.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const RowMat centred = x.rowwise() - mu;
    const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("pca_basis: eigendecomposition failed");
    }

    PcaBasis b;
    b.n_samples = n;
    b.mean.assign(mu.data(), mu.data() + d);
    b.directions = Tensor<double>({d, d});
    const auto& vals = solver.eigenvalues();  // ascending
    const auto& vecs = solver.eigenvectors();
    double total = 0.0;
    for (Eigen::Index i = 0; i < vals.size(); ++i) total += std::max(0.0, vals(i));
    const double tol = 1e-12 * std::max(1.0, std::abs(vals(vals.size() - 1)));
    for (std::size_t r = 0; r < d; ++r) {
        const auto src = static_cast<Eigen::Index>(d - 1 - r);
        const double lambda = std::max(0.0, vals(src));
        b.eigenvalues.push_back(lambda);
        b.variance_share.push_back(total > 0.0 ? lambda / total : 0.0);
        b.zero_eigenvalue.push_back(lambda <= tol);
        for (std::size_t k = 0; k < d; ++k) {
            b.directions[r * d + k] = vecs(static_cast<Eigen::Index>(k), src);
        }
    }
    return b;
}

DirectionCorrelation direction_correlation(const Tensor<double>& a, const Tensor<double>& a_hat,
                                           std::span<const double> v) {
    if (a.shape() != a_hat.shape() || a.rank() != 3 || a.dim(2) != v.size()) {
        throw ShapeError("direction_correlation: need matching (batch, positions, d) inputs and a d-vector");
    }
    const std::size_t p = a.dim(1), d = a.dim(2);
    std::vector<double> x0, y0, x1, y1;
    for (std::size_t row = 0; row < a.numel() / d; ++row) {
        double x = 0.0, y = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            x += a[row * d + k] * v[k];
            y += a_hat[row * d + k] * v[k];
        }
        (row % p == 0 ? x0 : x1).push_back(x);
        (row % p == 0 ? y0 : y1).push_back(y);
    }
    auto pearson = [](const std::vector<double>& x, const std::vector<double>& y) -> std::optional<double> {
        if (x.size() < 2) return std::nullopt;
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= static_cast<double>(x.size());
        my /= static_cast<double>(y.size());
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            sxy += (x[i] - mx) * (y[i] - my);
            sxx += (x[i] - mx) * (x[i] - mx);
            syy += (y[i] - my) * (y[i] - my);
        }
        // relative threshold: a component that is constant up to rounding has no defined correlation
        const double scale_x = 1e-24 * std::max(1.0, mx * mx) * static_cast<double>(x.size());
        const double scale_y = 1e-24 * std::max(1.0, my * my) * static_cast<double>(y.size());
        if (sxx <= scale_x || syy <= scale_y) return std::nullopt;
        return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    };
    return {pearson(x0, y0), pearson(x1, y1)};
}

template <typename T>
DirectionCorrelation direction_preservation(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                                            const PcaBasis& basis, std::size_t direction_index,
                                            const TokenDataset& eval_data) {
    const auto v = basis.direction(direction_index);
    const auto a = residual_double(model, eval_data, sae.placement_layer);
    if (a.dim(2) != basis.dim()) {
        throw std::invalid_argument("direction_preservation: basis width does not match the model");
    }
    const auto a_hat = reconstruct(sae.template cast<double>(), a);
    return direction_correlation(a, a_hat, v);
}

ResampleMap random_resample_map(std::size_t n_sequences, std::size_t seq_len, std::uint64_t seed) {
    if (n_sequences < 2 || seq_len < 2) {
        throw std::invalid_argument("random_resample_map: need >= 2 sequences of >= 2 tokens");
    }
    ResampleMap map(n_sequences * seq_len);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> other(0, n_sequences - 2);
    std::uniform_int_distribution<std::size_t> pos(1, seq_len - 1);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        map[s * seq_len] = {s, 0};
        for (std::size_t i = 1; i < seq_len; ++i) {
            std::size_t src = other(rng);
            if (src >= s) ++src;  // skip the sequence itself
            map[s * seq_len + i] = {src, pos(rng)};
        }
    }
    return map;
}

ResampleMap identity_resample_map(std::size_t n_sequences, std::size_t seq_len) {
    ResampleMap map(n_sequences * seq_len);
    for (std::size_t s = 0; s < n_sequences; ++s) {
        for (std::size_t i = 0; i < seq_len; ++i) map[s * seq_len + i] = {s, i};
    }
    return map;
}

template <typename T>
double resample_ablation_kl(const TransformerParams<T>& model_in, std::size_t layer, std::span<const double> v,
                            const TokenDataset& eval_data, const ResampleMap& map) {
    const auto model = model_in.template cast<double>();
    const std::size_t d = model.config.d_model;
    if (v.size() != d) {
        throw std::invalid_argument("resample_ablation_kl: direction has " + std::to_string(v.size()) +
                                    " entries, d_model is " + std::to_string(d));
    }
    if (map.size() != eval_data.n_tokens()) {
        throw std::invalid_argument("resample_ablation_kl: resample map does not cover the eval set");
    }
    const std::size_t p = eval_data.seq_len;
    const auto full = forward_with_cache(model, eval_data);
    const Tensor<double>& a = full.residual(layer);
    Tensor<double> ablated = a;
    for (std::size_t s = 0; s < eval_data.n_sequences; ++s) {
        for (std::size_t i = 1; i < p; ++i) {
            const auto src = map[s * p + i];
            if (src.sequence >= eval_data.n_sequences || src.position >= p) {
                throw std::out_of_range("resample_ablation_kl: resample source out of range");
            }
            const double* x = a.data().data() + (s * p + i) * d;
            const double* y = a.data().data() + (src.sequence * p + src.position) * d;
            double px = 0.0, py = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                px += v[k] * x[k];
                py += v[k] * y[k];
            }
            double* out = ablated.data().data() + (s * p + i) * d;
            for (std::size_t k = 0; k < d; ++k) out[k] = x[k] + (py - px) * v[k];
        }
    }
    const auto patched = forward_from_layer(model, ablated, layer);
    return kl_rows(full.logits, patched.logits) / static_cast<double>(eval_data.n_tokens());
}

template <typename T>
double resample_ablation_kl(const TransformerParams<T>& model, std::size_t layer, const PcaBasis& basis,
                            std::size_t direction_index, const TokenDataset& eval_data, std::uint64_t seed) {
    const auto v = basis.direction(direction_index);
    const auto map = random_resample_map(eval_data.n_sequences, eval_data.seq_len, seed);
    return resample_ablation_kl(model, layer, std::span<const double>(v), eval_data, map);
}

void export_feature_matrix(const std::vector<LabeledDictionary>& saes, const std::filesystem::path& path) {
    std::size_t d = 0;
    for (const auto& s : saes) {
        if (s.dictionary.rank() != 2) {
            throw std::invalid_argument("export_feature_matrix: '" + s.label + "' is not a matrix");
        }
        if (d != 0 && s.dictionary.dim(1) != d) {
            throw std::invalid_argument("export_feature_matrix: dictionaries do not share d_model");
        }
        d = s.dictionary.dim(1);
        if (s.label.find_first_of(",\"\n\r") != std::string::npos) {
            throw std::invalid_argument("export_feature_matrix: label '" + s.label + "' contains CSV metacharacters");
        }
    }
    std::ostringstream out;
    out << "sae_label,feature_index";
    for (std::size_t k = 0; k < d; ++k) out << ",d" << k;
    out << '\n';
    for (const auto& s : saes) {
        const std::size_t n = s.dictionary.dim(0);
        for (std::size_t i = 0; i < n; ++i) {
            if (!s.alive.empty() && !s.alive.at(i)) continue;
            out << s.label << ',' << i;
            for (std::size_t k = 0; k < d; ++k) out << ',' << format_g9(s.dictionary[i * d + k]);
            out << '\n';
        }
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw std::runtime_error("export_feature_matrix: cannot open " + tmp.string() + " for writing");
        }
        f << out.str();
        if (!f.flush()) {
            throw std::runtime_error("export_feature_matrix: write to " + tmp.string() + " failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

std::vector<FeatureRow> read_feature_matrix(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("read_feature_matrix: cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(f, line) || line.rfind("sae_label,feature_index", 0) != 0) {
        throw std::runtime_error("read_feature_matrix: missing header in " + path.string());
    }
    std::vector<FeatureRow> rows;
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        FeatureRow row;
        std::size_t start = 0;
        std::size_t field = 0;
        while (start <= line.size()) {
            const std::size_t end = std::min(line.find(',', start), line.size());
            const std::string_view cell(line.data() + start, end - start);
            if (field == 0) {
                row.label = std::string(cell);
            } else {
                double v = 0.0;
                const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
                if (r.ec != std::errc{} || r.ptr != cell.data() + cell.size()) {
                    throw std::runtime_error("read_feature_matrix: bad number on line " + std::to_string(line_no));
                }
                if (field == 1) {
                    row.index = static_cast<std::size_t>(v);
                } else {
                    row.values.push_back(v);
                }
            }
            ++field;
            start = end + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

#define SAEFORGE_INSTANTIATE(T)                                                                                    \
    template DirectionCorrelation direction_preservation(const TransformerParams<T>&, const SparseAutoencoder<T>&, \
                                                         const PcaBasis&, std::size_t, const TokenDataset&);       \
    template double resample_ablation_kl(const TransformerParams<T>&, std::size_t, std::span<const double>,        \
                                         const TokenDataset&, const ResampleMap&);                                 \
    template double resample_ablation_kl(const TransformerParams<T>&, std::size_t, const PcaBasis&, std::size_t,   \
                                         const TokenDataset&, std::uint64_t);

SAEFORGE_INSTANTIATE(float)
SAEFORGE_INSTANTIATE(double)
#undef SAEFORGE_INSTANTIATE

}  // namespace saeforge
