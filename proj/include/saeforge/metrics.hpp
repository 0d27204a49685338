#pragma once

// Evaluation of an SAE spliced into a frozen transformer. Everything here
// runs in double precision regardless of the stored parameter type.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "saeforge/corpus.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

struct CosineSummary {
    double mean = 0.0;
    std::array<double, 9> deciles{};  // 10th .. 90th percentile
    std::size_t count = 0;
    std::size_t excluded = 0;  // tokens where either vector is zero
};

struct L2Ratio {
    double position0 = 0.0;
    double later = 0.0;  // positions > 0
    std::size_t excluded = 0;  // tokens with a zero-norm input
};

struct ExplainedVariance {
    double raw = 0.0;
    double normalized = 0.0;
};

struct MetricsReport {
    std::size_t placement_layer = 0;
    std::size_t n_dict = 0;
    std::size_t eval_tokens = 0;
    double ce_orig = 0.0;
    double ce_sae = 0.0;
    double ce_increase = 0.0;  // ce_sae - ce_orig
    double kl_eval = 0.0;      // mean KL(P_orig || P_sae) over all positions
    double l0_mean = 0.0;
    std::size_t alive_count = 0;
    std::map<std::size_t, double> downstream_mse;              // k = l .. L-1
    std::map<std::size_t, ExplainedVariance> explained_variance;  // k = l .. L-1
    L2Ratio l2_ratio;
    CosineSummary recon_cosine;
};

struct EvalOptions {
    std::size_t batch_size = 16;
    std::size_t alive_window_tokens = 100000;
};

// Throws std::invalid_argument for an empty eval set or a placement/width
// mismatch, std::domain_error when a layer's activations have zero variance.
template <typename T>
MetricsReport evaluate_sae(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                           const TokenDataset& eval_data, const EvalOptions& options = {});

struct CeIncrease {
    double ce_orig = 0.0;
    double ce_sae = 0.0;
    double increase = 0.0;
};

template <typename T>
CeIncrease ce_loss_increase(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                            const TokenDataset& eval_data);

// Mean count of strictly positive entries per row of a (..., n_dict) tensor.
template <typename T>
double l0_mean(const Tensor<T>& codes);

// Stream-level primitives over matching (..., d_model) tensors.
// 1 - sum_d Var(a_d - a_hat_d) / sum_d Var(a_d), variances taken over rows.
// normalized first centres each row along d and scales it to unit norm.
double explained_variance(const Tensor<double>& a, const Tensor<double>& a_hat, bool normalized);

// (batch, positions, d) inputs; mean ||a_hat|| / ||a|| split by position.
L2Ratio l2_ratio(const Tensor<double>& a, const Tensor<double>& a_hat);

CosineSummary cosine_summary(const Tensor<double>& a, const Tensor<double>& a_hat);

// Sum over rows of ||a - b||^2 divided by the row count.
double mean_squared_distance(const Tensor<double>& a, const Tensor<double>& b);

struct ActivationExample {
    std::size_t sequence = 0;
    std::size_t position = 0;
    double activation = 0.0;
    std::size_t context_start = 0;  // position of context.front()
    std::vector<std::int32_t> context;
};

// Per feature (index = feature id), the top-k strictly positive activations
// ordered by activation descending, ties by (sequence, position) ascending.
// codes: (n_sequences, seq_len, n_dict) aligned with tokens.
template <typename T>
std::vector<std::vector<ActivationExample>> top_k_activations(const Tensor<T>& codes, const TokenDataset& tokens,
                                                              std::size_t k, std::size_t window);

template <typename T>
std::vector<std::vector<ActivationExample>> max_activating_examples(const TransformerParams<T>& model,
                                                                    const SparseAutoencoder<T>& sae,
                                                                    const TokenDataset& eval_data, std::size_t k,
                                                                    std::size_t window, std::size_t batch_size = 16);

// Alive mask over the eval stream (fires anywhere in it).
template <typename T>
std::vector<bool> alive_features(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                                 const TokenDataset& eval_data, std::size_t batch_size = 16);

}  // namespace saeforge
