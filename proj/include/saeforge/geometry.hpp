#pragma once

// Dictionary geometry: nearest-neighbour cosine profiles with bootstrap
// intervals, PCA of activations, direction preservation through an SAE and
// resample ablation of a single direction.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saeforge/corpus.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

struct ConfidenceInterval {
    double lo = 0.0;
    double hi = 0.0;
    double level = 0.95;
    std::size_t resamples = 0;
};

struct BootstrapOptions {
    std::size_t resamples = 5000;
    double confidence = 0.95;
    std::uint64_t seed = 0;
};

// Percentile bootstrap of the mean. Throws std::invalid_argument on empty
// input, zero resamples or a confidence outside (0, 1).
ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, const BootstrapOptions& options = {});

enum class ComparisonKind { within, cross_seed, cross_type };
std::string comparison_kind_name(ComparisonKind kind);

struct SimilarityProfile {
    ComparisonKind kind = ComparisonKind::within;
    std::vector<std::size_t> rows;  // alive row indices of the profiled dictionary
    std::vector<double> values;     // max cosine per row, aligned with rows
    double mean = 0.0;
    ConfidenceInterval ci;
};

// Rows of `dictionary` (n, d); an empty mask means every row is alive.
// Throws std::invalid_argument with fewer than 2 alive rows.
SimilarityProfile within_sae_similarity(const Tensor<double>& dictionary, const std::vector<bool>& alive = {},
                                        const BootstrapOptions& options = {});

// For each alive row of a, the max cosine over alive rows of b.
// Throws std::invalid_argument on a width mismatch or an empty alive set.
SimilarityProfile cross_sae_similarity(const Tensor<double>& dict_a, const std::vector<bool>& alive_a,
                                       const Tensor<double>& dict_b, const std::vector<bool>& alive_b,
                                       ComparisonKind kind = ComparisonKind::cross_seed,
                                       const BootstrapOptions& options = {});

struct PcaBasis {
    Tensor<double> directions;          // (d, d); row i is the i-th principal direction
    std::vector<double> eigenvalues;    // descending
    std::vector<double> variance_share;
    std::vector<double> mean;
    std::vector<bool> zero_eigenvalue;  // flags the degenerate subspace
    std::size_t n_samples = 0;

    std::size_t dim() const { return mean.size(); }
    std::vector<double> direction(std::size_t i) const;
};

// activations: (..., d) with at least d + 1 rows. Covariance uses 1/(n-1).
PcaBasis pca_basis(const Tensor<double>& activations);

struct DirectionCorrelation {
    std::optional<double> position0;  // empty when either component has zero variance
    std::optional<double> later;
};

// Pearson correlation of <a, v> with <a_hat, v>, split by position;
// a and a_hat are (batch, positions, d).
DirectionCorrelation direction_correlation(const Tensor<double>& a, const Tensor<double>& a_hat,
                                           std::span<const double> v);

template <typename T>
DirectionCorrelation direction_preservation(const TransformerParams<T>& model, const SparseAutoencoder<T>& sae,
                                            const PcaBasis& basis, std::size_t direction_index,
                                            const TokenDataset& eval_data);

// Source of the replacement component for (sequence s, position i > 0).
struct ResampleSource {
    std::size_t sequence = 0;
    std::size_t position = 0;
};

// source[s * seq_len + i] for i > 0; position-0 entries are ignored.
using ResampleMap = std::vector<ResampleSource>;

// Random map with sequence' != sequence and position' > 0, seeded.
// Throws std::invalid_argument with fewer than 2 sequences or seq_len < 2.
ResampleMap random_resample_map(std::size_t n_sequences, std::size_t seq_len, std::uint64_t seed);
ResampleMap identity_resample_map(std::size_t n_sequences, std::size_t seq_len);

// Mean over every (sequence, position) of KL(P_orig || P_ablated) after
// a_i <- a_i - P a_i + P a(source) at the given layer, with P = v v^T
// (v need not be unit; a zero v is a no-op).
template <typename T>
double resample_ablation_kl(const TransformerParams<T>& model, std::size_t layer, std::span<const double> v,
                            const TokenDataset& eval_data, const ResampleMap& map);

template <typename T>
double resample_ablation_kl(const TransformerParams<T>& model, std::size_t layer, const PcaBasis& basis,
                            std::size_t direction_index, const TokenDataset& eval_data, std::uint64_t seed);

struct LabeledDictionary {
    std::string label;
    Tensor<double> dictionary;  // (n, d)
    std::vector<bool> alive;    // empty: all alive
};

// CSV with header sae_label,feature_index,d0..d{d-1}; values with 9
// significant digits. Written to a temp file and renamed into place.
void export_feature_matrix(const std::vector<LabeledDictionary>& saes, const std::filesystem::path& path);

struct FeatureRow {
    std::string label;
    std::size_t index = 0;
    std::vector<double> values;
};

std::vector<FeatureRow> read_feature_matrix(const std::filesystem::path& path);

}  // namespace saeforge
