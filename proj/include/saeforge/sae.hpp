#pragma once

// Sparse autoencoder over residual-stream activations:
//   codes  = ReLU(a W_e^T + b_e)
//   output = codes D + b_d
// W_e and D are both (n_dict, d_model); rows of D are the dictionary
// features and are kept at unit norm.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "saeforge/autodiff.hpp"
#include "saeforge/tensor.hpp"

namespace saeforge {

template <typename T>
struct SparseAutoencoder {
    Tensor<T> encoder_weight;  // (n_dict, d_model)
    Tensor<T> encoder_bias;    // (n_dict)
    Tensor<T> dictionary;      // (n_dict, d_model)
    Tensor<T> decoder_bias;    // (d_model)
    std::size_t placement_layer = 0;

    std::size_t d_model() const { return dictionary.dim(1); }
    std::size_t n_dict() const { return dictionary.dim(0); }

    // Fixed order: encoder_weight, encoder_bias, dictionary, decoder_bias.
    std::vector<std::pair<std::string, Tensor<T>*>> named();
    std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

    // Throws std::invalid_argument if the four tensors disagree on shape.
    void validate() const;

    template <typename U>
    SparseAutoencoder<U> cast() const;
};

// Kaiming-normal W_e and D (variance 2 / fan_in), zero biases, then D
// renormalized. Throws std::invalid_argument for zero sizes.
SparseAutoencoder<float> init_sae(std::size_t d_model, std::size_t n_dict, std::uint64_t seed,
                                  std::size_t placement_layer = 0);

// n_dict = 2 d_model with W_e = D = [I; -I] and zero biases, so
// decode(encode(a)) = ReLU(a) - ReLU(-a) = a exactly.
template <typename T>
SparseAutoencoder<T> identity_sae(std::size_t d_model, std::size_t placement_layer = 0);

// Value-level encode/decode over any (..., d_model) / (..., n_dict) tensor.
template <typename T>
Tensor<T> encode(const SparseAutoencoder<T>& sae, const Tensor<T>& a);

template <typename T>
Tensor<T> decode(const SparseAutoencoder<T>& sae, const Tensor<T>& codes);

template <typename T>
Tensor<T> reconstruct(const SparseAutoencoder<T>& sae, const Tensor<T>& a) {
    return decode(sae, encode(sae, a));
}

// Scales every dictionary row to unit L2 norm. Throws std::domain_error
// naming the row when a row is exactly zero or non-finite.
template <typename T>
void renormalize_dictionary(SparseAutoencoder<T>& sae);

template <typename T>
double max_row_norm_error(const SparseAutoencoder<T>& sae);

template <typename T>
struct BoundSae {
    Var<T> encoder_weight, encoder_bias, dictionary, decoder_bias;
    std::size_t placement_layer = 0;

    std::vector<Var<T>> handles() const { return {encoder_weight, encoder_bias, dictionary, decoder_bias}; }
};

template <typename T>
BoundSae<T> bind_sae(Tape<T>& tape, const SparseAutoencoder<T>& sae, bool trainable);

template <typename T>
Var<T> encode(const BoundSae<T>& sae, const Var<T>& a);

template <typename T>
Var<T> decode(const BoundSae<T>& sae, const Var<T>& codes);

}  // namespace saeforge
