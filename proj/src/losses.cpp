#include "saeforge/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace saeforge {

std::string loss_kind_name(LossKind kind) {
    switch (kind) {
        case LossKind::local: return "local";
        case LossKind::e2e: return "e2e";
        case LossKind::e2e_downstream: return "e2e_ds";
    }
    return "unknown";
}

LossKind parse_loss_kind(const std::string& s) {
    if (s == "local") return LossKind::local;
    if (s == "e2e") return LossKind::e2e;
    if (s == "e2e_ds" || s == "e2e_downstream") return LossKind::e2e_downstream;
    throw std::invalid_argument("unknown loss kind '" + s + "' (expected local, e2e or e2e_ds)");
}

std::string kl_direction_name(KlDirection dir) {
    return dir == KlDirection::original_to_sae ? "original_to_sae" : "sae_to_original";
}

KlDirection parse_kl_direction(const std::string& s) {
    if (s == "original_to_sae") return KlDirection::original_to_sae;
    if (s == "sae_to_original") return KlDirection::sae_to_original;
    throw std::invalid_argument("unknown kl direction '" + s + "'");
}

double LossConfig::effective_kl_coeff() const {
    if (kl_coeff) {
        return *kl_coeff;
    }
    return kind == LossKind::e2e_downstream ? 0.5 : 1.0;
}

void LossConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw std::invalid_argument("LossConfig: lambda must be finite and >= 0");
    }
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw std::invalid_argument("LossConfig: beta must be finite and >= 0");
    }
    if (kind != LossKind::local && !(effective_kl_coeff() > 0.0)) {
        throw std::invalid_argument("LossConfig: kl_coeff must be > 0 for e2e kinds");
    }
}

double sparsity_phi(double lambda, std::size_t d_model) {
    if (d_model == 0) {
        throw std::invalid_argument("sparsity_phi: d_model must be > 0");
    }
    return lambda / static_cast<double>(d_model);
}

namespace {

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) {
        throw std::domain_error(std::string("loss: non-finite ") + what + " term");
    }
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& logits) {
    const std::size_t v = logits.shape().back();
    Tensor<T> out(logits.shape());
    for (std::size_t r = 0; r < logits.numel() / v; ++r) {
        const T* in = logits.data().data() + r * v;
        T* o = out.data().data() + r * v;
        double mx = in[0];
        for (std::size_t j = 1; j < v; ++j) {
            mx = std::max<double>(mx, in[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            z += std::exp(static_cast<double>(in[j]) - mx);
        }
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < v; ++j) {
            o[j] = static_cast<T>(static_cast<double>(in[j]) - lz);
        }
    }
    return out;
}

}  // namespace

template <typename T>
TapedLoss<T> taped_loss(Tape<T>& tape, const BoundSae<T>& sae, const BoundTransformer<T>* model,
                        const ResidualCache<T>& cache, const LossConfig& config) {
    config.validate();
    const std::size_t l = sae.placement_layer;
    const Tensor<T>& a = cache.residual(l);
    if (a.rank() != 3) {
        throw ShapeError("loss: residual must be (batch, positions, d_model), got " + shape_str(a.shape()));
    }
    const std::size_t d = a.dim(2);
    const double rows = static_cast<double>(a.dim(0) * a.dim(1));
    const double phi = sparsity_phi(config.lambda, d);

    TapedLoss<T> out;
    auto a_var = tape.constant(a);
    out.codes = encode(sae, a_var);
    out.reconstruction = decode(sae, out.codes);
    // phi / rows folded into one factor so doubling lambda doubles this term exactly
    auto sparsity = ops::scale(ops::l1_norm(out.codes), phi / rows);
    out.breakdown.sparsity = static_cast<double>(sparsity.value().item());
    require_finite(out.breakdown.sparsity, "sparsity");

    if (config.kind == LossKind::local) {
        auto recon = ops::scale(ops::squared_l2(ops::sub(a_var, out.reconstruction)), 1.0 / rows);
        out.breakdown.reconstruction = static_cast<double>(recon.value().item());
        require_finite(out.breakdown.reconstruction, "reconstruction");
        out.total = ops::add(recon, sparsity);
        out.breakdown.total = static_cast<double>(out.total.value().item());
        return out;
    }

    if (model == nullptr) {
        throw std::invalid_argument("loss: e2e kinds need the transformer");
    }
    const std::size_t n_layers = model->config.n_layers;
    if (l >= n_layers) {
        throw std::invalid_argument("loss: placement layer " + std::to_string(l) + " out of range");
    }
    if (config.kind == LossKind::e2e_downstream && l + 1 >= n_layers) {
        throw std::invalid_argument("loss: e2e_ds needs a downstream layer; placement layer " + std::to_string(l) +
                                    " is the last (use e2e)");
    }
    if (cache.logits.shape() != Shape{a.dim(0), a.dim(1), model->config.vocab_size}) {
        throw ShapeError("loss: cached logits " + shape_str(cache.logits.shape()) + " do not match the residual");
    }

    auto run = taped_forward_from_layer(tape, *model, out.reconstruction, l);
    auto log_q = ops::log_softmax(run.logits);
    auto log_p = tape.constant(log_softmax_rows(cache.logits));
    Var<T> kl;
    if (config.kl_direction == KlDirection::original_to_sae) {
        Tensor<T> p = log_p.value();
        for (auto& v : p.data()) {
            v = std::exp(v);
        }
        kl = ops::sum(ops::mul(tape.constant(std::move(p)), ops::sub(log_p, log_q)));
    } else {
        kl = ops::sum(ops::mul(ops::exp(log_q), ops::sub(log_q, log_p)));
    }
    kl = ops::scale(kl, 1.0 / rows);
    out.breakdown.kl = static_cast<double>(kl.value().item());
    require_finite(out.breakdown.kl, "KL");
    out.total = ops::add(ops::scale(kl, config.effective_kl_coeff()), sparsity);

    if (config.kind == LossKind::e2e_downstream) {
        // Literal weighting: divisor L - l over L - 1 - l terms.
        const double weight = config.beta / static_cast<double>(n_layers - l);
        Var<T> acc;
        for (std::size_t k = l + 1; k < n_layers; ++k) {
            auto diff = ops::sub(run.residuals[k - l], tape.constant(cache.residual(k)));
            auto mse_k = ops::scale(ops::squared_l2(diff), 1.0 / rows);
            out.breakdown.downstream_per_layer.push_back(static_cast<double>(mse_k.value().item()));
            acc = acc.valid() ? ops::add(acc, mse_k) : mse_k;
        }
        auto downstream = ops::scale(acc, weight);
        out.breakdown.downstream = static_cast<double>(downstream.value().item());
        require_finite(out.breakdown.downstream, "downstream");
        out.total = ops::add(out.total, downstream);
    }
    out.breakdown.total = static_cast<double>(out.total.value().item());
    return out;
}

template <typename T>
LossBreakdown local_loss(const SparseAutoencoder<T>& sae, const Tensor<T>& a, const LossConfig& config) {
    if (config.kind != LossKind::local) {
        throw std::invalid_argument("local_loss: config.kind must be local");
    }
    ResidualCache<T> cache;
    cache.start_layer = sae.placement_layer;
    cache.residuals.push_back(a);
    Tape<T> tape;
    auto bound = bind_sae(tape, sae, false);
    return taped_loss<T>(tape, bound, nullptr, cache, config).breakdown;
}

template <typename T>
LossBreakdown compute_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                           const ResidualCache<T>& cache, const LossConfig& config) {
    Tape<T> tape;
    auto bound = bind_sae(tape, sae, false);
    if (config.kind == LossKind::local) {
        return taped_loss<T>(tape, bound, nullptr, cache, config).breakdown;
    }
    auto m = bind_transformer(tape, model, false);
    return taped_loss<T>(tape, bound, &m, cache, config).breakdown;
}

template <typename T>
LossBreakdown e2e_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                       const ResidualCache<T>& cache, const LossConfig& config) {
    if (config.kind != LossKind::e2e) {
        throw std::invalid_argument("e2e_loss: config.kind must be e2e");
    }
    return compute_loss(sae, model, cache, config);
}

template <typename T>
LossBreakdown e2e_downstream_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                                  const ResidualCache<T>& cache, const LossConfig& config) {
    if (config.kind != LossKind::e2e_downstream) {
        throw std::invalid_argument("e2e_downstream_loss: config.kind must be e2e_ds");
    }
    return compute_loss(sae, model, cache, config);
}

#define SAEFORGE_INSTANTIATE(T)                                                                               \
    template TapedLoss<T> taped_loss(Tape<T>&, const BoundSae<T>&, const BoundTransformer<T>*,               \
                                     const ResidualCache<T>&, const LossConfig&);                             \
    template LossBreakdown local_loss(const SparseAutoencoder<T>&, const Tensor<T>&, const LossConfig&);      \
    template LossBreakdown e2e_loss(const SparseAutoencoder<T>&, const TransformerParams<T>&,                 \
                                    const ResidualCache<T>&, const LossConfig&);                              \
    template LossBreakdown e2e_downstream_loss(const SparseAutoencoder<T>&, const TransformerParams<T>&,      \
                                               const ResidualCache<T>&, const LossConfig&);                   \
    template LossBreakdown compute_loss(const SparseAutoencoder<T>&, const TransformerParams<T>&,             \
                                        const ResidualCache<T>&, const LossConfig&);

SAEFORGE_INSTANTIATE(float)
SAEFORGE_INSTANTIATE(double)
#undef SAEFORGE_INSTANTIATE

}  // namespace saeforge
