#include "saeforge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "saeforge/optim.hpp"

namespace saeforge {

std::size_t TrainConfig::warmup() const {
    return warmup_samples ? *warmup_samples : total_samples / 20;
}

std::size_t TrainConfig::total_steps() const {
    return (total_samples + effective_batch_size - 1) / effective_batch_size;
}

void TrainConfig::validate() const {
    loss.validate();
    auto positive = [](double v, const char* name) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument(std::string("TrainConfig: ") + name + " must be positive");
        }
    };
    positive(lr_max, "lr_max");
    positive(grad_clip_norm, "grad_clip_norm");
    positive(static_cast<double>(effective_batch_size), "effective_batch_size");
    positive(static_cast<double>(micro_batch_size), "micro_batch_size");
    positive(static_cast<double>(total_samples), "total_samples");
    positive(static_cast<double>(eval_interval), "eval_interval");
    positive(static_cast<double>(alive_window_tokens), "alive_window_tokens");
    if (!(decay_floor_fraction >= 0.0 && decay_floor_fraction <= 1.0)) {
        throw std::invalid_argument("TrainConfig: decay_floor_fraction must be in [0, 1]");
    }
    if (warmup() >= total_samples) {
        throw std::invalid_argument("TrainConfig: warmup_samples must be < total_samples");
    }
    if (micro_batch_size > effective_batch_size) {
        throw std::invalid_argument("TrainConfig: micro_batch_size must be <= effective_batch_size");
    }
}

double lr_schedule(std::size_t step_samples, const TrainConfig& config) {
    const double s = static_cast<double>(std::min(step_samples, config.total_samples));
    const double warm = static_cast<double>(config.warmup());
    if (s < warm) {
        return config.lr_max * s / warm;
    }
    const double span = static_cast<double>(config.total_samples) - warm;
    const double t = span > 0.0 ? (s - warm) / span : 1.0;
    const double floor = config.decay_floor_fraction;
    return config.lr_max * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

AliveTracker::AliveTracker(std::size_t n_features, std::size_t window_tokens)
    : window_(window_tokens), last_fired_(n_features, 0) {
    if (window_tokens == 0) {
        throw std::invalid_argument("AliveTracker: window must be > 0");
    }
}

template <typename T>
void AliveTracker::observe(const Tensor<T>& codes) {
    const std::size_t n = last_fired_.size();
    if (codes.rank() == 0 || codes.shape().back() != n) {
        throw ShapeError("AliveTracker: codes shape " + shape_str(codes.shape()) + " needs last dim " +
                         std::to_string(n));
    }
    auto c = codes.data();
    const std::size_t rows = codes.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
        ++tokens_seen_;
        for (std::size_t j = 0; j < n; ++j) {
            if (c[r * n + j] > T{0}) {
                last_fired_[j] = tokens_seen_;
            }
        }
    }
}

std::vector<bool> AliveTracker::alive_mask() const {
    const std::size_t oldest = tokens_seen_ > window_ ? tokens_seen_ - window_ + 1 : 1;
    std::vector<bool> mask(last_fired_.size());
    for (std::size_t j = 0; j < mask.size(); ++j) {
        mask[j] = last_fired_[j] != 0 && last_fired_[j] >= oldest;
    }
    return mask;
}

std::size_t AliveTracker::alive_count() const {
    const auto m = alive_mask();
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
}

template void AliveTracker::observe(const Tensor<float>&);
template void AliveTracker::observe(const Tensor<double>&);

namespace {

// Only the streams the loss reads: up to the placement layer for local,
// everything from it onward plus logits for e2e kinds.
ResidualCache<float> original_cache(const TransformerParams<float>& model, const TokenDataset& tokens,
                                    std::size_t layer, LossKind kind) {
    if (kind == LossKind::local) {
        ResidualCache<float> cache;
        cache.start_layer = layer;
        cache.residuals.push_back(residual_at(model, tokens, layer));
        return cache;
    }
    auto full = forward_with_cache(model, tokens);
    full.residuals.erase(full.residuals.begin(), full.residuals.begin() + static_cast<std::ptrdiff_t>(layer));
    full.start_layer = layer;
    return full;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
    acc.total += w * b.total;
    acc.reconstruction += w * b.reconstruction;
    acc.sparsity += w * b.sparsity;
    acc.kl += w * b.kl;
    acc.downstream += w * b.downstream;
    if (acc.downstream_per_layer.size() < b.downstream_per_layer.size()) {
        acc.downstream_per_layer.resize(b.downstream_per_layer.size(), 0.0);
    }
    for (std::size_t i = 0; i < b.downstream_per_layer.size(); ++i) {
        acc.downstream_per_layer[i] += w * b.downstream_per_layer[i];
    }
}

}  // namespace

TrainResult train_sae(const TransformerParams<float>& model, SparseAutoencoder<float> sae, const TokenDataset& data,
                      const TrainConfig& config, const IntervalCallback& on_interval, const StepCallback& on_step) {
    config.validate();
    sae.validate();
    model.config.validate();
    if (sae.d_model() != model.config.d_model) {
        throw std::invalid_argument("train_sae: SAE width " + std::to_string(sae.d_model()) +
                                    " does not match d_model " + std::to_string(model.config.d_model));
    }
    if (sae.placement_layer >= model.config.n_layers) {
        throw std::invalid_argument("train_sae: placement layer " + std::to_string(sae.placement_layer) +
                                    " out of range");
    }
    if (data.n_sequences == 0) {
        throw std::invalid_argument("train_sae: empty training data");
    }

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    RunRecord& rec = result.record;
    rec.config = config;
    rec.placement_layer = sae.placement_layer;
    rec.n_dict = sae.n_dict();

    renormalize_dictionary(sae);
    Adam<float> adam;
    AliveTracker alive(sae.n_dict(), config.alive_window_tokens);
    std::mt19937_64 rng(mix_seed(config.seed, 0x7a1));
    std::vector<std::size_t> order(data.n_sequences);
    std::size_t cursor = order.size();

    auto next_rows = [&](std::size_t count) {
        std::vector<std::size_t> rows;
        while (rows.size() < count) {
            if (cursor == order.size()) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            rows.push_back(order[cursor++]);
        }
        return rows;
    };

    LossBreakdown interval_loss;
    double interval_l0 = 0.0;
    double interval_grad = 0.0;
    std::size_t interval_steps = 0;
    std::size_t samples_seen = 0;
    const std::size_t steps = config.total_steps();
    const std::size_t layer = sae.placement_layer;

    auto fail = [&](const std::string& what) {
        rec.error = what;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        throw TrainingError(what, rec);
    };

    for (std::size_t step = 0; step < steps; ++step) {
        const std::size_t batch = std::min(config.effective_batch_size, config.total_samples - samples_seen);
        const auto rows = next_rows(batch);
        std::vector<Tensor<float>> grads;
        LossBreakdown step_loss;
        double active = 0.0;
        std::size_t tokens = 0;

        for (std::size_t m = 0; m < batch; m += config.micro_batch_size) {
            const std::size_t count = std::min(config.micro_batch_size, batch - m);
            const std::vector<std::size_t> idx(rows.begin() + static_cast<std::ptrdiff_t>(m),
                                               rows.begin() + static_cast<std::ptrdiff_t>(m + count));
            const TokenDataset micro = data.gather(idx);
            const auto cache = original_cache(model, micro, layer, config.loss.kind);
            const double weight = static_cast<double>(count) / static_cast<double>(batch);

            Tape<float> tape;
            auto bound = bind_sae(tape, sae, true);
            TapedLoss<float> loss;
            try {
                if (config.loss.kind == LossKind::local) {
                    loss = taped_loss<float>(tape, bound, nullptr, cache, config.loss);
                } else {
                    auto frozen = bind_transformer(tape, model, false);
                    loss = taped_loss<float>(tape, bound, &frozen, cache, config.loss);
                }
            } catch (const std::domain_error& e) {
                fail("train_sae: step " + std::to_string(step) + ": " + e.what());
            }
            if (!std::isfinite(loss.breakdown.total)) {
                fail("train_sae: non-finite loss at step " + std::to_string(step));
            }
            accumulate(step_loss, loss.breakdown, weight);

            const auto g = tape.backward(loss.total);
            const auto handles = bound.handles();
            if (grads.empty()) {
                for (const auto& h : handles) {
                    grads.emplace_back(h.shape());
                }
            }
            for (std::size_t i = 0; i < handles.size(); ++i) {
                auto dst = grads[i].data();
                auto src = grad_of(g, handles[i]).data();
                for (std::size_t j = 0; j < dst.size(); ++j) {
                    dst[j] += static_cast<float>(weight * src[j]);
                }
            }

            const auto& codes = loss.codes.value();
            for (auto v : codes.data()) {
                active += v > 0.0f ? 1.0 : 0.0;
            }
            tokens += codes.numel() / sae.n_dict();
            alive.observe(codes);
        }

        ClipResult clip;
        try {
            clip = clip_gradients(grads, config.grad_clip_norm);
        } catch (const std::domain_error& e) {
            fail("train_sae: step " + std::to_string(step) + ": " + e.what());
        }

        samples_seen += batch;
        const double lr = lr_schedule(samples_seen, config);
        std::vector<Tensor<float>*> params;
        for (auto& [name, t] : sae.named()) {
            params.push_back(t);
        }
        adam.step(params, grads, lr);
        renormalize_dictionary(sae);
        if (on_step) {
            on_step(step, lr, sae);
        }

        accumulate(interval_loss, step_loss, 1.0);
        interval_l0 += active / static_cast<double>(tokens);
        interval_grad += clip.pre_norm;
        ++interval_steps;

        if ((step + 1) % config.eval_interval == 0 || step + 1 == steps) {
            IntervalRecord ir;
            ir.step = step + 1;
            ir.samples_seen = samples_seen;
            ir.lr = lr;
            const double inv = 1.0 / static_cast<double>(interval_steps);
            accumulate(ir.loss, interval_loss, inv);
            ir.l0 = interval_l0 * inv;
            ir.alive = alive.alive_count();
            ir.grad_norm = interval_grad * inv;
            rec.intervals.push_back(ir);
            if (on_interval) {
                on_interval(ir);
            }
            interval_loss = LossBreakdown{};
            interval_l0 = interval_grad = 0.0;
            interval_steps = 0;
        }
    }

    rec.completed = true;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.sae = std::move(sae);
    return result;
}

}  // namespace saeforge
