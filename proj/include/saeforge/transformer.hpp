#pragma once

// GPT-style decoder-only transformer with a pre-layer-norm residual stream.
//
// Hook points: residual(l) is the stream *before* block l, for l = 0..L-1.
// residual(0) is token embedding plus learned position embedding. Block l
// maps residual(l) to residual(l + 1); the final layer norm and unembedding
// follow block L-1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "saeforge/autodiff.hpp"
#include "saeforge/corpus.hpp"
#include "saeforge/tensor.hpp"

namespace saeforge {

struct TransformerConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_mlp = 256;
    std::size_t vocab_size = 256;
    std::size_t context_len = 64;
    double ln_epsilon = 1e-5;

    // Throws std::invalid_argument on a zero count or d_model % n_heads != 0.
    void validate() const;
    std::size_t d_head() const { return d_model / n_heads; }
    bool operator==(const TransformerConfig&) const = default;
};

template <typename T>
struct BlockParams {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;  // weights are (in, out)
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w_in, b_in, w_out, b_out;
};

template <typename T>
struct TransformerParams {
    TransformerConfig config;
    Tensor<T> token_embed;  // (vocab, d_model)
    Tensor<T> pos_embed;    // (context, d_model)
    std::vector<BlockParams<T>> blocks;
    Tensor<T> final_ln_gain, final_ln_bias;
    Tensor<T> unembed;  // (d_model, vocab)

    // Stable (name, tensor) listing used for checkpoints and optimizers.
    std::vector<std::pair<std::string, Tensor<T>*>> named();
    std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

    template <typename U>
    TransformerParams<U> cast() const;
};

// Builds params from a named listing; throws on missing names or bad shapes.
template <typename T>
TransformerParams<T> transformer_from_named(const TransformerConfig& config,
                                            const std::vector<std::pair<std::string, Tensor<T>>>& tensors);

TransformerParams<float> init_transformer(const TransformerConfig& config, std::uint64_t seed);

template <typename T>
struct ResidualCache {
    std::size_t start_layer = 0;
    std::vector<Tensor<T>> residuals;  // residuals[i] is the stream before block start_layer + i
    Tensor<T> logits;                  // (batch, positions, vocab)

    const Tensor<T>& residual(std::size_t layer) const { return residuals.at(layer - start_layer); }
};

template <typename T>
struct BoundBlock {
    Var<T> ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Var<T> ln2_gain, ln2_bias, w_in, b_in, w_out, b_out;
};

// Transformer parameters recorded on a tape, as constants (frozen) or as
// trainable parameters.
template <typename T>
struct BoundTransformer {
    TransformerConfig config;
    Var<T> token_embed, pos_embed;
    std::vector<BoundBlock<T>> blocks;
    Var<T> final_ln_gain, final_ln_bias, unembed;

    // Trainable handles in TransformerParams::named() order.
    std::vector<Var<T>> handles() const;
};

template <typename T>
BoundTransformer<T> bind_transformer(Tape<T>& tape, const TransformerParams<T>& params, bool trainable);

template <typename T>
struct TapedResiduals {
    std::size_t start_layer = 0;
    std::vector<Var<T>> residuals;
    Var<T> logits;
};

// Throws std::out_of_range for a token id >= vocab_size and
// std::invalid_argument for sequences longer than context_len.
template <typename T>
TapedResiduals<T> taped_forward(Tape<T>& tape, const BoundTransformer<T>& model, const TokenDataset& tokens);

// Runs blocks start_layer..L-1 and the unembedding on a replacement stream.
template <typename T>
TapedResiduals<T> taped_forward_from_layer(Tape<T>& tape, const BoundTransformer<T>& model, const Var<T>& stream,
                                           std::size_t start_layer);

template <typename T>
ResidualCache<T> forward_with_cache(const TransformerParams<T>& params, const TokenDataset& tokens);

template <typename T>
ResidualCache<T> forward_from_layer(const TransformerParams<T>& params, const Tensor<T>& stream,
                                    std::size_t start_layer);

// The stream before block `layer` only; skips the remaining blocks.
template <typename T>
Tensor<T> residual_at(const TransformerParams<T>& params, const TokenDataset& tokens, std::size_t layer);

// Mean next-token cross-entropy (nats) over positions 0..P-2 of every row.
template <typename T>
double next_token_cross_entropy(const Tensor<T>& logits, const TokenDataset& tokens);

template <typename T>
double evaluate_cross_entropy(const TransformerParams<T>& params, const TokenDataset& data, std::size_t batch_size = 16);

struct BaseTrainOptions {
    std::size_t steps = 1500;
    double lr = 2e-3;
    std::size_t batch_size = 16;
    std::size_t warmup_steps = 100;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    std::size_t log_every = 0;  // 0 disables progress callbacks
};

struct BaseTrainResult {
    TransformerParams<float> params;
    std::vector<double> loss_history;  // one entry per step
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Trains from init_transformer(config, options.seed) on batches sampled
// (seeded) from the rows of `corpus`. Throws TrainingDiverged on a NaN loss.
BaseTrainResult train_base_model(const TransformerConfig& config, const TokenDataset& corpus,
                                 const BaseTrainOptions& options,
                                 const std::function<void(std::size_t step, double loss)>& progress = {});

}  // namespace saeforge
