#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "saeforge/checkpoint.hpp"
#include "saeforge/cli.hpp"
#include "saeforge/geometry.hpp"
#include "saeforge/losses.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/trainer.hpp"

namespace py = pybind11;
using namespace saeforge;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<double> to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    Tensor<double> t(shape);
    const T* src = a.data();
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = static_cast<double>(src[i]);
    }
    return t;
}

template <typename T>
Array to_array(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    auto* dst = out.mutable_data();
    auto src = t.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = static_cast<double>(src[i]);
    }
    return out;
}

SparseAutoencoder<double> sae_from_arrays(const Array& we, const Array& be, const Array& d, const Array& bd,
                                          std::size_t layer) {
    SparseAutoencoder<double> sae;
    sae.encoder_weight = to_tensor(we);
    sae.encoder_bias = to_tensor(be);
    sae.dictionary = to_tensor(d);
    sae.decoder_bias = to_tensor(bd);
    sae.placement_layer = layer;
    sae.validate();
    return sae;
}

py::dict sae_to_dict(const SparseAutoencoder<float>& sae) {
    py::dict out;
    out["encoder_weight"] = to_array(sae.encoder_weight);
    out["encoder_bias"] = to_array(sae.encoder_bias);
    out["dictionary"] = to_array(sae.dictionary);
    out["decoder_bias"] = to_array(sae.decoder_bias);
    out["placement_layer"] = sae.placement_layer;
    return out;
}

SparseAutoencoder<double> sae_from_dict(const py::dict& d) {
    return sae_from_arrays(d["encoder_weight"].cast<Array>(), d["encoder_bias"].cast<Array>(),
                           d["dictionary"].cast<Array>(), d["decoder_bias"].cast<Array>(),
                           d.contains("placement_layer") ? d["placement_layer"].cast<std::size_t>() : 0);
}

}  // namespace

PYBIND11_MODULE(_saeforge, m) {
    m.doc() = "Sparse autoencoder training and analysis on a small transformer";

    m.def(
        "identity_sae",
        [](std::size_t d_model, std::size_t layer) { return sae_to_dict(identity_sae<float>(d_model, layer)); },
        py::arg("d_model"), py::arg("placement_layer") = 0);
    m.def(
        "init_sae",
        [](std::size_t d_model, std::size_t n_dict, std::uint64_t seed, std::size_t layer) {
            return sae_to_dict(init_sae(d_model, n_dict, seed, layer));
        },
        py::arg("d_model"), py::arg("n_dict"), py::arg("seed"), py::arg("placement_layer") = 0);
    m.def(
        "encode", [](const py::dict& sae, const Array& a) { return to_array(encode(sae_from_dict(sae), to_tensor(a))); },
        py::arg("sae"), py::arg("activations"));
    m.def(
        "decode", [](const py::dict& sae, const Array& c) { return to_array(decode(sae_from_dict(sae), to_tensor(c))); },
        py::arg("sae"), py::arg("codes"));
    m.def("sparsity_phi", &sparsity_phi, py::arg("lam"), py::arg("d_model"));
    m.def(
        "lr_schedule",
        [](std::size_t step_samples, double lr_max, std::size_t total_samples, std::optional<std::size_t> warmup,
           double floor) {
            TrainConfig c;
            c.lr_max = lr_max;
            c.total_samples = total_samples;
            c.warmup_samples = warmup;
            c.decay_floor_fraction = floor;
            return lr_schedule(step_samples, c);
        },
        py::arg("step_samples"), py::arg("lr_max") = 5e-4, py::arg("total_samples") = 16000,
        py::arg("warmup_samples") = py::none(), py::arg("decay_floor_fraction") = 0.1);
    m.def(
        "bootstrap_mean_ci",
        [](const std::vector<double>& values, std::size_t resamples, double confidence, std::uint64_t seed) {
            const auto ci = bootstrap_mean_ci(values, {resamples, confidence, seed});
            return py::make_tuple(ci.lo, ci.hi);
        },
        py::arg("values"), py::arg("resamples") = 5000, py::arg("confidence") = 0.95, py::arg("seed") = 0);
    m.def(
        "pca",
        [](const Array& a) {
            const auto basis = pca_basis(to_tensor(a));
            Tensor<double> ev({basis.eigenvalues.size()}, basis.eigenvalues);
            return py::make_tuple(to_array(basis.directions), to_array(ev));
        },
        py::arg("activations"), "Returns (directions as rows, eigenvalues descending).");
    m.def(
        "within_sae_similarity",
        [](const Array& dictionary) {
            const auto p = within_sae_similarity(to_tensor(dictionary));
            return py::make_tuple(p.values, p.mean);
        },
        py::arg("dictionary"));
    m.def(
        "save_sae",
        [](const std::string& path, const py::dict& sae) { save_sae(path, sae_from_dict(sae).cast<float>()); },
        py::arg("path"), py::arg("sae"));
    m.def(
        "load_sae", [](const std::string& path) { return sae_to_dict(load_sae(path)); }, py::arg("path"));
    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int status = 0;
            {
                py::gil_scoped_release release;
                status = run_cli(args, out, err);
            }
            return py::make_tuple(status, out.str(), err.str());
        },
        py::arg("args"), "Runs the command line; returns (status, stdout, stderr).");

    py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);
}
