#include "saeforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "saeforge/trainer.hpp"

namespace saeforge {

namespace {

// Per-dimension variance over rows, shifted by the first row seen.
class DimVariance {
public:
    explicit DimVariance(std::size_t d) : shift_(d), sum_(d), sumsq_(d) {}

    void add(const double* row) {
        if (n_ == 0) {
            std::copy(row, row + shift_.size(), shift_.begin());
        }
        for (std::size_t k = 0; k < shift_.size(); ++k) {
            const double x = row[k] - shift_[k];
            sum_[k] += x;
            sumsq_[k] += x * x;
        }
        ++n_;
    }

    // Sum over dims of the population variance.
    double total() const {
        double v = 0.0;
        const double n = static_cast<double>(n_);
        for (std::size_t k = 0; k < shift_.size(); ++k) {
            v += std::max(0.0, sumsq_[k] / n - (sum_[k] / n) * (sum_[k] / n));
        }
        return v;
    }

private:
    std::vector<double> shift_, sum_, sumsq_;
    std::size_t n_ = 0;
};

struct EvAccumulator {
    DimVariance input, residual, input_norm, residual_norm;
    explicit EvAccumulator(std::size_t d) : input(d), residual(d), input_norm(d), residual_norm(d) {}
};

// Centre along the embedding dim and scale to unit norm; zero rows stay zero.
void unit_centered(const double* x, std::size_t d, double* out) {
    double mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) mean += x[k];
    mean /= static_cast<double>(d);
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        out[k] = x[k] - mean;
        sq += out[k] * out[k];
    }
    const double norm = std::sqrt(sq);
    if (norm > 0.0) {
        for (std::size_t k = 0; k < d; ++k) out[k] /= norm;
    }
}

void accumulate_ev(EvAccumulator& acc, const Tensor<double>& a, const Tensor<double>& a_hat) {
    const std::size_t d = a.shape().back();
    std::vector<double> r(d), na(d), nh(d);
    for (std::size_t row = 0; row < a.numel() / d; ++row) {
        const double* x = a.data().data() + row * d;
        const double* y = a_hat.data().data() + row * d;
        for (std::size_t k = 0; k < d; ++k) r[k] = x[k] - y[k];
        acc.input.add(x);
        acc.residual.add(r.data());
        unit_centered(x, d, na.data());
        unit_centered(y, d, nh.data());
        for (std::size_t k = 0; k < d; ++k) r[k] = na[k] - nh[k];
        acc.input_norm.add(na.data());
        acc.residual_norm.add(r.data());
    }
}

ExplainedVariance finish_ev(const EvAccumulator& acc) {
    const double vin = acc.input.total();
    const double vin_norm = acc.input_norm.total();
    if (!(vin > 0.0) || !(vin_norm > 0.0)) {
        throw std::domain_error("explained_variance: input activations have zero variance");
    }
    return {1.0 - acc.residual.total() / vin, 1.0 - acc.residual_norm.total() / vin_norm};
}

void check_same(const Tensor<double>& a, const Tensor<double>& b, const char* what) {
    if (a.shape() != b.shape() || a.rank() == 0) {
        throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
    }
}

double row_norm(const double* x, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += x[k] * x[k];
    return std::sqrt(s);
}

struct L2Accumulator {
    double sum0 = 0.0, sum_rest = 0.0;
    std::size_t n0 = 0, n_rest = 0, excluded = 0;

    void add(const Tensor<double>& a, const Tensor<double>& a_hat) {
        const std::size_t p = a.dim(1), d = a.dim(2);
        for (std::size_t row = 0; row < a.numel() / d; ++row) {
            const double na = row_norm(a.data().data() + row * d, d);
            if (na == 0.0) {
                ++excluded;
                continue;
            }
            const double ratio = row_norm(a_hat.data().data() + row * d, d) / na;
            if (row % p == 0) {
                sum0 += ratio;
                ++n0;
            } else {
                sum_rest += ratio;
                ++n_rest;
            }
        }
    }

    L2Ratio finish() const {
        L2Ratio r;
        r.position0 = n0 ? sum0 / static_cast<double>(n0) : std::nan("");
        r.later = n_rest ? sum_rest / static_cast<double>(n_rest) : std::nan("");
        r.excluded = excluded;
        return r;
    }
};

struct CosineAccumulator {
    std::vector<double> values;
    std::size_t excluded = 0;

    void add(const Tensor<double>& a, const Tensor<double>& a_hat) {
        const std::size_t d = a.shape().back();
        for (std::size_t row = 0; row < a.numel() / d; ++row) {
            const double* x = a.data().data() + row * d;
            const double* y = a_hat.data().data() + row * d;
            const double nx = row_norm(x, d), ny = row_norm(y, d);
            if (nx == 0.0 || ny == 0.0) {
                ++excluded;
                continue;
            }
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += x[k] * y[k];
            values.push_back(std::clamp(dot / (nx * ny), -1.0, 1.0));
        }
    }

    CosineSummary finish() const {
        CosineSummary s;
        s.count = values.size();
        s.excluded = excluded;
        if (values.empty()) {
            s.mean = std::nan("");
            s.deciles.fill(std::nan(""));
            return s;
        }
        double total = 0.0;
        for (double v : values) total += v;
        s.mean = total / static_cast<double>(values.size());
        auto sorted = values;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t q = 1; q <= 9; ++q) {
            // linear interpolation between closest ranks
            const double pos = 0.1 * static_cast<double>(q) * static_cast<double>(sorted.size() - 1);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
            s.deciles[q - 1] = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
        }
        return s;
    }
};

// Sum over rows of KL(P || Q) from two logit tensors.
double kl_sum(const Tensor<double>& logits_p, const Tensor<double>& logits_q) {
    const std::size_t v = logits_p.shape().back();
    double total = 0.0;
    std::vector<double> lp(v), lq(v);
    auto log_softmax = [v](const double* z, std::vector<double>& out) {
        double mx = z[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(z[j] - mx);
        const double lz = mx + std::log(s);
        for (std::size_t j = 0; j < v; ++j) out[j] = z[j] - lz;
    };
    for (std::size_t row = 0; row < logits_p.numel() / v; ++row) {
        log_softmax(logits_p.data().data() + row * v, lp);
        log_softmax(logits_q.data().data() + row * v, lq);
        double kl = 0.0;
        for (std::size_t j = 0; j < v; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
        total += std::max(0.0, kl);
    }
    return total;
}

void check_pairing(const TransformerConfig& c, std::size_t d_model, std::size_t layer) {
    if (d_model != c.d_model) {
        throw std::invalid_argument("metrics: SAE width " + std::to_string(d_model) + " does not match d_model " +
                                    std::to_string(c.d_model));
    }
    if (layer >= c.n_layers) {
        throw std::invalid_argument("metrics: placement layer " + std::to_string(layer) + " out of range");
    }
}

}  // namespace

double explained_variance(const Tensor<double>& a, const Tensor<double>& a_hat, bool normalized) {
    check_same(a, a_hat, "explained_variance");
    EvAccumulator acc(a.shape().back());
    accumulate_ev(acc, a, a_hat);
    const auto ev = finish_ev(acc);
    return normalized ? ev.normalized : ev.raw;
}

L2Ratio l2_ratio(const Tensor<double>& a, const Tensor<double>& a_hat) {
    check_same(a, a_hat, "l2_ratio");
    if (a.rank() != 3) {
        throw ShapeError("l2_ratio: expected (batch, positions, d_model), got " + shape_str(a.shape()));
    }
    L2Accumulator acc;
    acc.add(a, a_hat);
    return acc.finish();
}

CosineSummary cosine_summary(const Tensor<double>& a, const Tensor<double>& a_hat) {
    check_same(a, a_hat, "cosine_summary");
    CosineAccumulator acc;
    acc.add(a, a_hat);
    return acc.finish();
}

double mean_squared_distance(const Tensor<double>& a, const Tensor<double>& b) {
    check_same(a, b, "mean_squared_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double e = a[i] - b[i];
        s += e * e;
    }
    return s / static_cast<double>(a.numel() / a.shape().back());
}

template <typename T>
double l0_mean(const Tensor<T>& codes) {
    if (codes.rank() == 0 || codes.numel() == 0) {
        throw std::invalid_argument("l0_mean: empty codes");
    }
    std::size_t active = 0;
    for (auto v : codes.data()) {
        active += v > T{0} ? 1 : 0;
    }
    return static_cast<double>(active) / static_cast<double>(codes.numel() / codes.shape().back());
}

template <typename T>
MetricsReport evaluate_sae(const TransformerParams<T>& model_in, const SparseAutoencoder<T>& sae_in,
                           const TokenDataset& eval_data, const EvalOptions& options) {
    if (eval_data.n_sequences == 0 || eval_data.seq_len < 2) {
        throw std::invalid_argument("evaluate_sae: eval set must hold sequences of at least 2 tokens");
    }
    if (options.batch_size == 0) {
        throw std::invalid_argument("evaluate_sae: batch_size must be > 0");
    }
    const auto model = model_in.template cast<double>();
    const auto sae = sae_in.template cast<double>();
    sae.validate();
    const std::size_t l = sae.placement_layer;
    const std::size_t n_layers = model.config.n_layers;
    const std::size_t d = model.config.d_model;
    check_pairing(model.config, sae.d_model(), l);

    MetricsReport rep;
    rep.placement_layer = l;
    rep.n_dict = sae.n_dict();
    std::vector<EvAccumulator> ev(n_layers - l, EvAccumulator(d));
    std::vector<double> mse(n_layers - l, 0.0);
    L2Accumulator l2;
    CosineAccumulator cosine;
    AliveTracker alive(sae.n_dict(), options.alive_window_tokens);
    double ce_orig = 0.0, ce_sae = 0.0, kl = 0.0, active = 0.0;

    for (std::size_t b = 0; b < eval_data.n_sequences; b += options.batch_size) {
        const std::size_t n = std::min(options.batch_size, eval_data.n_sequences - b);
        const auto batch = eval_data.rows(b, n);
        const auto orig = forward_with_cache(model, batch);
        const auto& a = orig.residual(l);
        const auto codes = encode(sae, a);
        const auto a_hat = decode(sae, codes);
        const auto spliced = forward_from_layer(model, a_hat, l);

        const double w = static_cast<double>(n);
        ce_orig += w * next_token_cross_entropy(orig.logits, batch);
        ce_sae += w * next_token_cross_entropy(spliced.logits, batch);
        kl += kl_sum(orig.logits, spliced.logits);
        for (auto v : codes.data()) active += v > 0.0 ? 1.0 : 0.0;
        alive.observe(codes);
        for (std::size_t k = l; k < n_layers; ++k) {
            const auto& ak = orig.residual(k);
            const auto& hk = spliced.residual(k);
            mse[k - l] += mean_squared_distance(ak, hk) * static_cast<double>(ak.numel() / d);
            accumulate_ev(ev[k - l], ak, hk);
        }
        l2.add(a, a_hat);
        cosine.add(a, a_hat);
        rep.eval_tokens += batch.n_tokens();
    }

    const double tokens = static_cast<double>(rep.eval_tokens);
    rep.ce_orig = ce_orig / static_cast<double>(eval_data.n_sequences);
    rep.ce_sae = ce_sae / static_cast<double>(eval_data.n_sequences);
    rep.ce_increase = rep.ce_sae - rep.ce_orig;
    rep.kl_eval = kl / tokens;
    rep.l0_mean = active / tokens;
    rep.alive_count = alive.alive_count();
    for (std::size_t k = l; k < n_layers; ++k) {
        rep.downstream_mse[k] = mse[k - l] / tokens;
        rep.explained_variance[k] = finish_ev(ev[k - l]);
    }
    rep.l2_ratio = l2.finish();
    rep.recon_cosine = cosine.finish();
    return rep;
}

template <typename T>
CeIncrease ce_loss_increase(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                            const TokenDataset& eval_data) {
    const auto rep = evaluate_sae(model, sae, eval_data);
    return {rep.ce_orig, rep.ce_sae, rep.ce_increase};
}

template <typename T>
std::vector<std::vector<ActivationExample>> top_k_activations(const Tensor<T>& codes, const TokenDataset& tokens,
                                                              std::size_t k, std::size_t window) {
    if (k == 0) {
        throw std::invalid_argument("top_k_activations: k must be >= 1");
    }
    if (codes.rank() != 3 || codes.dim(0) != tokens.n_sequences || codes.dim(1) != tokens.seq_len) {
        throw ShapeError("top_k_activations: codes " + shape_str(codes.shape()) + " do not match tokens");
    }
    const std::size_t n = codes.dim(2);
    const std::size_t p = tokens.seq_len;
    // strict weak order: better examples first
    auto better = [](const ActivationExample& x, const ActivationExample& y) {
        if (x.activation != y.activation) return x.activation > y.activation;
        if (x.sequence != y.sequence) return x.sequence < y.sequence;
        return x.position < y.position;
    };
    std::vector<std::vector<ActivationExample>> top(n);
    auto c = codes.data();
    for (std::size_t s = 0; s < tokens.n_sequences; ++s) {
        for (std::size_t pos = 0; pos < p; ++pos) {
            const T* row = c.data() + (s * p + pos) * n;
            for (std::size_t j = 0; j < n; ++j) {
                if (!(row[j] > T{0})) continue;
                ActivationExample ex{s, pos, static_cast<double>(row[j]), 0, {}};
                auto& list = top[j];
                if (list.size() == k && !better(ex, list.back())) continue;
                list.insert(std::upper_bound(list.begin(), list.end(), ex, better), ex);
                if (list.size() > k) list.pop_back();
            }
        }
    }
    for (auto& list : top) {
        for (auto& ex : list) {
            ex.context_start = ex.position > window ? ex.position - window : 0;
            const std::size_t end = std::min(p, ex.position + window + 1);
            const auto r = tokens.row(ex.sequence);
            ex.context.assign(r.begin() + static_cast<std::ptrdiff_t>(ex.context_start),
                              r.begin() + static_cast<std::ptrdiff_t>(end));
        }
    }
    return top;
}

namespace {

template <typename T>
Tensor<double> all_codes(const TransformerParams<T>& model_in, const SparseAutoencoder<T>& sae_in,
                         const TokenDataset& data, std::size_t batch_size) {
    if (data.n_sequences == 0 || batch_size == 0) {
        throw std::invalid_argument("metrics: empty eval set or zero batch size");
    }
    const auto model = model_in.template cast<double>();
    const auto sae = sae_in.template cast<double>();
    check_pairing(model.config, sae.d_model(), sae.placement_layer);
    const std::size_t n = sae.n_dict();
    Tensor<double> codes({data.n_sequences, data.seq_len, n});
    for (std::size_t b = 0; b < data.n_sequences; b += batch_size) {
        const std::size_t m = std::min(batch_size, data.n_sequences - b);
        const auto c = encode(sae, residual_at(model, data.rows(b, m), sae.placement_layer));
        std::copy(c.data().begin(), c.data().end(), codes.data().begin() + static_cast<std::ptrdiff_t>(b * data.seq_len * n));
    }
    return codes;
}

}  // namespace

template <typename T>
std::vector<std::vector<ActivationExample>> max_activating_examples(const TransformerParams<T>& model,
                                                                    const SparseAutoencoder<T>& sae,
                                                                    const TokenDataset& eval_data, std::size_t k,
                                                                    std::size_t window, std::size_t batch_size) {
    return top_k_activations(all_codes(model, sae, eval_data, batch_size), eval_data, k, window);
}

template <typename T>
std::vector<bool> alive_features(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                                 const TokenDataset& eval_data, std::size_t batch_size) {
    const auto codes = all_codes(model, sae, eval_data, batch_size);
    AliveTracker tracker(sae.n_dict(), std::max<std::size_t>(1, eval_data.n_tokens()));
    tracker.observe(codes);
    return tracker.alive_mask();
}

#define SAEFORGE_INSTANTIATE(T)                                                                                    \
    template MetricsReport evaluate_sae(const TransformerParams<T>&, const SparseAutoencoder<T>&,                 \
                                        const TokenDataset&, const EvalOptions&);                                 \
    template CeIncrease ce_loss_increase(const TransformerParams<T>&, const SparseAutoencoder<T>&,                \
                                         const TokenDataset&);                                                     \
    template double l0_mean(const Tensor<T>&);                                                                     \
    template std::vector<std::vector<ActivationExample>> top_k_activations(const Tensor<T>&, const TokenDataset&, \
                                                                           std::size_t, std::size_t);             \
    template std::vector<std::vector<ActivationExample>> max_activating_examples(                                 \
        const TransformerParams<T>&, const SparseAutoencoder<T>&, const TokenDataset&, std::size_t, std::size_t,   \
        std::size_t);                                                                                              \
    template std::vector<bool> alive_features(const TransformerParams<T>&, const SparseAutoencoder<T>&,           \
                                              const TokenDataset&, std::size_t);

SAEFORGE_INSTANTIATE(float)
SAEFORGE_INSTANTIATE(double)
#undef SAEFORGE_INSTANTIATE

}  // namespace saeforge
