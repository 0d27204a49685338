#include "saeforge/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace saeforge {

template <typename T>
void Adam<T>::step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, double lr) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("Adam::step: parameter and gradient counts differ");
    }
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.emplace_back(p->shape());
            v_.emplace_back(p->shape());
        }
    }
    if (m_.size() != params.size()) {
        throw std::invalid_argument("Adam::step: parameter count changed between steps");
    }
    ++t_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        auto g = grads[i].data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        if (p.size() != g.size() || p.size() != m.size()) {
            throw std::invalid_argument("Adam::step: shape mismatch for parameter " + std::to_string(i));
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g[j]);
            v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * static_cast<double>(g[j]) * g[j]);
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] = static_cast<T>(p[j] - lr * mhat / (std::sqrt(vhat) + options_.eps));
        }
    }
}

template <typename T>
double global_norm(const std::vector<Tensor<T>>& grads) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (auto v : g.data()) {
            if (!std::isfinite(v)) {
                throw std::domain_error("clip_gradients: non-finite gradient value");
            }
            sq += static_cast<double>(v) * v;
        }
    }
    return std::sqrt(sq);
}

template <typename T>
ClipResult clip_gradients(std::vector<Tensor<T>>& grads, double max_norm) {
    if (!(max_norm > 0.0)) {
        throw std::invalid_argument("clip_gradients: max_norm must be positive");
    }
    ClipResult r;
    r.pre_norm = global_norm(grads);
    if (r.pre_norm > max_norm) {
        r.scale = max_norm / r.pre_norm;
        for (auto& g : grads) {
            for (auto& v : g.data()) {
                v = static_cast<T>(v * r.scale);
            }
        }
    }
    return r;
}

template <typename T>
ClipResult clip_gradients(GradientMap<T>& grads, double max_norm) {
    std::vector<Tensor<T>> flat;
    for (auto& [id, g] : grads) {
        flat.push_back(std::move(g));
    }
    auto r = clip_gradients(flat, max_norm);
    std::size_t i = 0;
    for (auto& [id, g] : grads) {
        g = std::move(flat[i++]);
    }
    return r;
}

template class Adam<float>;
template class Adam<double>;
template ClipResult clip_gradients(std::vector<Tensor<float>>&, double);
template ClipResult clip_gradients(std::vector<Tensor<double>>&, double);
template ClipResult clip_gradients(GradientMap<float>&, double);
template ClipResult clip_gradients(GradientMap<double>&, double);
template double global_norm(const std::vector<Tensor<float>>&);
template double global_norm(const std::vector<Tensor<double>>&);

}  // namespace saeforge
