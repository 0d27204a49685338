#pragma once

// Training objectives for an SAE spliced into a frozen transformer.
//
// Reduction: squared-L2 and L1 terms are summed over feature dims and
// averaged over every (sequence, position) row, position 0 included.
//   local          ||a - SAE(a)||^2 + phi ||codes||_1
//   e2e            kl_coeff KL + phi ||codes||_1
//   e2e_downstream e2e + beta / (L - l) * sum_{k=l+1}^{L-1} ||a_hat(k) - a(k)||^2
// with phi = lambda / d_model.

#include <optional>
#include <string>
#include <vector>

#include "saeforge/autodiff.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

enum class LossKind { local, e2e, e2e_downstream };

// original_to_sae computes KL(P_orig || P_sae).
enum class KlDirection { original_to_sae, sae_to_original };

std::string loss_kind_name(LossKind kind);        // "local", "e2e", "e2e_ds"
LossKind parse_loss_kind(const std::string& s);   // also accepts "e2e_downstream"
std::string kl_direction_name(KlDirection dir);
KlDirection parse_kl_direction(const std::string& s);

struct LossConfig {
    LossKind kind = LossKind::local;
    double lambda = 1.0;
    double beta = 2.5;
    std::optional<double> kl_coeff;  // unset: 1.0 for e2e, 0.5 for e2e_downstream
    KlDirection kl_direction = KlDirection::original_to_sae;

    double effective_kl_coeff() const;
    // Throws std::invalid_argument on negative lambda/beta or kl_coeff <= 0.
    void validate() const;
};

struct LossBreakdown {
    double total = 0.0;
    double reconstruction = 0.0;  // local only
    double sparsity = 0.0;        // phi * mean L1
    double kl = 0.0;              // unweighted KL
    double downstream = 0.0;      // weighted downstream sum
    std::vector<double> downstream_per_layer;  // unweighted MSE for k = l+1 .. L-1
};

double sparsity_phi(double lambda, std::size_t d_model);

template <typename T>
struct TapedLoss {
    Var<T> total;
    Var<T> codes;
    Var<T> reconstruction;  // SAE output at the placement layer
    LossBreakdown breakdown;
};

// `cache` must hold the original residuals from the placement layer onward
// and, for e2e kinds, the original logits. `model` may be null for the local
// kind; pass it bound as constants so gradients reach only the SAE.
// Throws std::domain_error on a non-finite loss component.
template <typename T>
TapedLoss<T> taped_loss(Tape<T>& tape, const BoundSae<T>& sae, const BoundTransformer<T>* model,
                        const ResidualCache<T>& cache, const LossConfig& config);

// Value-level wrappers evaluated on a throwaway tape.
template <typename T>
LossBreakdown local_loss(const SparseAutoencoder<T>& sae, const Tensor<T>& a, const LossConfig& config);

template <typename T>
LossBreakdown e2e_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                       const ResidualCache<T>& cache, const LossConfig& config);

template <typename T>
LossBreakdown e2e_downstream_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                                  const ResidualCache<T>& cache, const LossConfig& config);

// Dispatches on config.kind.
template <typename T>
LossBreakdown compute_loss(const SparseAutoencoder<T>& sae, const TransformerParams<T>& model,
                           const ResidualCache<T>& cache, const LossConfig& config);

}  // namespace saeforge
