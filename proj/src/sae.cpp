#include "saeforge/sae.hpp"

#include <Eigen/Core>
#include <cmath>
#include <random>
#include <stdexcept>

#include "saeforge/corpus.hpp"

namespace saeforge {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

std::size_t leading_rows(const Shape& s, std::size_t last, const char* what) {
    if (s.empty() || s.back() != last) {
        throw ShapeError(std::string(what) + ": input shape " + shape_str(s) + " needs last dim " +
                         std::to_string(last));
    }
    return shape_numel(s) / last;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> SparseAutoencoder<T>::named() {
    return {{"encoder_weight", &encoder_weight},
            {"encoder_bias", &encoder_bias},
            {"dictionary", &dictionary},
            {"decoder_bias", &decoder_bias}};
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> SparseAutoencoder<T>::named() const {
    return {{"encoder_weight", &encoder_weight},
            {"encoder_bias", &encoder_bias},
            {"dictionary", &dictionary},
            {"decoder_bias", &decoder_bias}};
}

template <typename T>
void SparseAutoencoder<T>::validate() const {
    if (dictionary.rank() != 2 || dictionary.numel() == 0) {
        throw std::invalid_argument("SparseAutoencoder: dictionary must be a non-empty matrix");
    }
    const std::size_t n = n_dict();
    const std::size_t d = d_model();
    if (encoder_weight.shape() != Shape{n, d} || encoder_bias.shape() != Shape{n} ||
        decoder_bias.shape() != Shape{d}) {
        throw std::invalid_argument("SparseAutoencoder: inconsistent shapes W_e " + shape_str(encoder_weight.shape()) +
                                    ", b_e " + shape_str(encoder_bias.shape()) + ", D " +
                                    shape_str(dictionary.shape()) + ", b_d " + shape_str(decoder_bias.shape()));
    }
}

template <typename T>
template <typename U>
SparseAutoencoder<U> SparseAutoencoder<T>::cast() const {
    SparseAutoencoder<U> out;
    out.encoder_weight = encoder_weight.template cast<U>();
    out.encoder_bias = encoder_bias.template cast<U>();
    out.dictionary = dictionary.template cast<U>();
    out.decoder_bias = decoder_bias.template cast<U>();
    out.placement_layer = placement_layer;
    return out;
}

SparseAutoencoder<float> init_sae(std::size_t d_model, std::size_t n_dict, std::uint64_t seed,
                                  std::size_t placement_layer) {
    if (d_model == 0 || n_dict == 0) {
        throw std::invalid_argument("init_sae: d_model and n_dict must be >= 1");
    }
    SparseAutoencoder<float> sae;
    sae.placement_layer = placement_layer;
    sae.encoder_weight = Tensor<float>({n_dict, d_model});
    sae.encoder_bias = Tensor<float>({n_dict});
    sae.dictionary = Tensor<float>({n_dict, d_model});
    sae.decoder_bias = Tensor<float>({d_model});

    std::mt19937_64 rng(mix_seed(seed, 0x5ae));
    // fan_in is d_model for the encoder and n_dict for the decoder map
    std::normal_distribution<double> enc(0.0, std::sqrt(2.0 / static_cast<double>(d_model)));
    std::normal_distribution<double> dec(0.0, std::sqrt(2.0 / static_cast<double>(n_dict)));
    for (auto& v : sae.encoder_weight.data()) {
        v = static_cast<float>(enc(rng));
    }
    for (auto& v : sae.dictionary.data()) {
        v = static_cast<float>(dec(rng));
    }
    renormalize_dictionary(sae);
    return sae;
}

template <typename T>
SparseAutoencoder<T> identity_sae(std::size_t d_model, std::size_t placement_layer) {
    if (d_model == 0) {
        throw std::invalid_argument("identity_sae: d_model must be >= 1");
    }
    SparseAutoencoder<T> sae;
    sae.placement_layer = placement_layer;
    Tensor<T> w({2 * d_model, d_model});
    for (std::size_t i = 0; i < d_model; ++i) {
        w[i * d_model + i] = T{1};
        w[(d_model + i) * d_model + i] = T{-1};
    }
    sae.encoder_weight = w;
    sae.dictionary = std::move(w);
    sae.encoder_bias = Tensor<T>({2 * d_model});
    sae.decoder_bias = Tensor<T>({d_model});
    return sae;
}

template <typename T>
Tensor<T> encode(const SparseAutoencoder<T>& sae, const Tensor<T>& a) {
    sae.validate();
    const std::size_t d = sae.d_model();
    const std::size_t n = sae.n_dict();
    const std::size_t rows = leading_rows(a.shape(), d, "encode");
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    ConstMap<T> x(a.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
    ConstMap<T> w(sae.encoder_weight.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    MutMap<T> c(out.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    c.noalias() = x * w.transpose();
    auto b = sae.encoder_bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data().data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::max(T{0}, row[j] + b[j]);
        }
    }
    return out;
}

template <typename T>
Tensor<T> decode(const SparseAutoencoder<T>& sae, const Tensor<T>& codes) {
    sae.validate();
    const std::size_t d = sae.d_model();
    const std::size_t n = sae.n_dict();
    const std::size_t rows = leading_rows(codes.shape(), n, "decode");
    Shape out_shape = codes.shape();
    out_shape.back() = d;
    Tensor<T> out(out_shape);
    ConstMap<T> c(codes.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    ConstMap<T> dict(sae.dictionary.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    MutMap<T> y(out.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d));
    y.noalias() = c * dict;
    auto b = sae.decoder_bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < d; ++k) {
            out[r * d + k] += b[k];
        }
    }
    return out;
}

template <typename T>
void renormalize_dictionary(SparseAutoencoder<T>& sae) {
    const std::size_t d = sae.d_model();
    auto data = sae.dictionary.data();
    for (std::size_t i = 0; i < sae.n_dict(); ++i) {
        T* row = data.data() + i * d;
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            sq += static_cast<double>(row[k]) * row[k];
        }
        const double norm = std::sqrt(sq);
        if (!(norm > 0.0) || !std::isfinite(norm)) {
            throw std::domain_error("renormalize_dictionary: dictionary row " + std::to_string(i) +
                                    " has norm " + std::to_string(norm));
        }
        for (std::size_t k = 0; k < d; ++k) {
            row[k] = static_cast<T>(row[k] / norm);
        }
    }
}

template <typename T>
double max_row_norm_error(const SparseAutoencoder<T>& sae) {
    const std::size_t d = sae.d_model();
    auto data = sae.dictionary.data();
    double worst = 0.0;
    for (std::size_t i = 0; i < sae.n_dict(); ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            sq += static_cast<double>(data[i * d + k]) * data[i * d + k];
        }
        worst = std::max(worst, std::abs(std::sqrt(sq) - 1.0));
    }
    return worst;
}

template <typename T>
BoundSae<T> bind_sae(Tape<T>& tape, const SparseAutoencoder<T>& sae, bool trainable) {
    sae.validate();
    auto bind = [&](const Tensor<T>& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    BoundSae<T> out;
    out.encoder_weight = bind(sae.encoder_weight);
    out.encoder_bias = bind(sae.encoder_bias);
    out.dictionary = bind(sae.dictionary);
    out.decoder_bias = bind(sae.decoder_bias);
    out.placement_layer = sae.placement_layer;
    return out;
}

template <typename T>
Var<T> encode(const BoundSae<T>& sae, const Var<T>& a) {
    return ops::relu(ops::add(ops::matmul(a, ops::transpose(sae.encoder_weight)), sae.encoder_bias));
}

template <typename T>
Var<T> decode(const BoundSae<T>& sae, const Var<T>& codes) {
    return ops::add(ops::matmul(codes, sae.dictionary), sae.decoder_bias);
}

#define SAEFORGE_INSTANTIATE(T)                                                          \
    template struct SparseAutoencoder<T>;                                                \
    template SparseAutoencoder<T> identity_sae<T>(std::size_t, std::size_t);             \
    template Tensor<T> encode(const SparseAutoencoder<T>&, const Tensor<T>&);            \
    template Tensor<T> decode(const SparseAutoencoder<T>&, const Tensor<T>&);            \
    template void renormalize_dictionary(SparseAutoencoder<T>&);                         \
    template double max_row_norm_error(const SparseAutoencoder<T>&);                     \
    template BoundSae<T> bind_sae(Tape<T>&, const SparseAutoencoder<T>&, bool);          \
    template Var<T> encode(const BoundSae<T>&, const Var<T>&);                           \
    template Var<T> decode(const BoundSae<T>&, const Var<T>&);

SAEFORGE_INSTANTIATE(float)
SAEFORGE_INSTANTIATE(double)
#undef SAEFORGE_INSTANTIATE

template SparseAutoencoder<double> SparseAutoencoder<float>::cast<double>() const;
template SparseAutoencoder<float> SparseAutoencoder<double>::cast<float>() const;
template SparseAutoencoder<float> SparseAutoencoder<float>::cast<float>() const;
template SparseAutoencoder<double> SparseAutoencoder<double>::cast<double>() const;

}  // namespace saeforge
