#pragma once

#include <cstddef>
#include <vector>

#include "saeforge/autodiff.hpp"
#include "saeforge/tensor.hpp"

namespace saeforge {

// Adam with bias correction. Moment buffers are allocated lazily on the
// first step and must keep the same parameter order afterwards.
template <typename T>
class Adam {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam() = default;
    explicit Adam(Options options) : options_(options) {}

    void step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, double lr);

    std::size_t steps() const { return t_; }

private:
    Options options_;
    std::vector<Tensor<T>> m_;
    std::vector<Tensor<T>> v_;
    std::size_t t_ = 0;
};

struct ClipResult {
    double pre_norm = 0.0;  // global L2 norm before clipping
    double scale = 1.0;     // factor applied to every gradient
};

// Scales all gradients by max_norm / global_norm when the global L2 norm
// exceeds max_norm. Throws std::domain_error on a non-finite gradient and
// std::invalid_argument when max_norm <= 0.
template <typename T>
ClipResult clip_gradients(std::vector<Tensor<T>>& grads, double max_norm);

template <typename T>
ClipResult clip_gradients(GradientMap<T>& grads, double max_norm);

template <typename T>
double global_norm(const std::vector<Tensor<T>>& grads);

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace saeforge
