#pragma once

// SAE training loop: Adam, linear warmup then cosine decay, global-norm
// gradient clipping, a frozen base model and trailing-window aliveness.
// Samples are sequences; one optimizer step consumes effective_batch_size
// of them.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "saeforge/corpus.hpp"
#include "saeforge/losses.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

struct TrainConfig {
    LossConfig loss;
    double lr_max = 5e-4;
    std::optional<std::size_t> warmup_samples;  // unset: 5% of total_samples
    double decay_floor_fraction = 0.1;
    std::size_t effective_batch_size = 16;
    std::size_t micro_batch_size = 16;
    std::size_t total_samples = 16000;
    double grad_clip_norm = 10.0;
    std::uint64_t seed = 0;
    std::size_t eval_interval = 50;  // optimizer steps between records
    std::size_t alive_window_tokens = 100000;

    std::size_t warmup() const;
    std::size_t total_steps() const;
    // Throws std::invalid_argument naming the offending field.
    void validate() const;
};

// Linear 0 -> lr_max over the warmup, then cosine down to
// decay_floor_fraction * lr_max at total_samples.
double lr_schedule(std::size_t step_samples, const TrainConfig& config);

// Feature i is alive when it fired (> 0) in any of the last window_tokens
// tokens observed.
class AliveTracker {
public:
    AliveTracker(std::size_t n_features, std::size_t window_tokens);

    // codes: (..., n_features), one row per token in stream order.
    template <typename T>
    void observe(const Tensor<T>& codes);

    std::vector<bool> alive_mask() const;
    std::size_t alive_count() const;
    std::size_t tokens_seen() const { return tokens_seen_; }
    std::size_t window() const { return window_; }

private:
    std::size_t window_;
    std::size_t tokens_seen_ = 0;
    // 1-based index of the most recent token on which the feature fired; 0 = never
    std::vector<std::size_t> last_fired_;
};

struct IntervalRecord {
    std::size_t step = 0;          // optimizer steps completed
    std::size_t samples_seen = 0;
    double lr = 0.0;               // lr used for the last step in the interval
    LossBreakdown loss;            // mean over the interval's steps
    double l0 = 0.0;               // mean active features per token over the interval
    std::size_t alive = 0;
    double grad_norm = 0.0;        // mean pre-clip global gradient norm
};

struct RunRecord {
    TrainConfig config;
    std::size_t placement_layer = 0;
    std::size_t n_dict = 0;
    std::vector<IntervalRecord> intervals;
    std::string checkpoint_path;
    double wall_seconds = 0.0;
    bool completed = false;
    std::string error;
};

class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, RunRecord record)
        : std::runtime_error(what), record_(std::move(record)) {}
    const RunRecord& record() const { return record_; }

private:
    RunRecord record_;
};

struct TrainResult {
    SparseAutoencoder<float> sae;
    RunRecord record;
};

using StepCallback = std::function<void(std::size_t step, double lr, const SparseAutoencoder<float>& sae)>;
using IntervalCallback = std::function<void(const IntervalRecord&)>;

// Trains `sae` in place on rows of `data` drawn by a per-epoch permutation
// seeded from config.seed. The model is only read. Throws TrainingError on a
// non-finite loss or gradient; the error carries the record so far.
TrainResult train_sae(const TransformerParams<float>& model, SparseAutoencoder<float> sae, const TokenDataset& data,
                      const TrainConfig& config, const IntervalCallback& on_interval = {},
                      const StepCallback& on_step = {});

}  // namespace saeforge
