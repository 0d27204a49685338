#pragma once

// Pipeline glue: data generation, base-model provisioning and the sweep
// runner. Each sweep cell writes into its own directory:
//   sae.ckpt      trained SAE
//   run.json      RunRecord plus the cell and experiment config
//   metrics.json  MetricsReport on the eval set
//   cell.json     config hash; written last, marks the cell complete

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "saeforge/config.hpp"
#include "saeforge/corpus.hpp"
#include "saeforge/metrics.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

using LogFn = std::function<void(const std::string&)>;

SyntheticLanguage make_language(const ExperimentConfig& config);
TokenDataset base_training_data(const ExperimentConfig& config);
TokenDataset sae_training_data(const ExperimentConfig& config, std::size_t n_sequences);
TokenDataset eval_data(const ExperimentConfig& config);

// Trains the base model and writes it to config.base_checkpoint_path().
TransformerParams<float> train_base(const ExperimentConfig& config, const LogFn& log = {});

// Loads the base checkpoint, training it first when absent. Throws
// std::runtime_error when an existing checkpoint was built from a different
// base section.
TransformerParams<float> ensure_base_model(const ExperimentConfig& config, const LogFn& log = {});

struct SweepCell {
    LossKind kind = LossKind::local;
    double lambda = 0.0;
    std::uint64_t seed = 0;
    double lr = 0.0;
    double dict_ratio = 0.0;
    std::size_t total_samples = 0;
    std::string name;  // directory name, unique within a sweep
};

// Grid in (kind, lambda, seed, lr, dict_ratio, total_samples) order.
std::vector<SweepCell> expand_sweep(const ExperimentConfig& config);

// The single cell described by the train and sae sections.
SweepCell single_cell(const ExperimentConfig& config);

TrainConfig cell_train_config(const ExperimentConfig& config, const SweepCell& cell);
std::uint64_t cell_init_seed(const ExperimentConfig& config, const SweepCell& cell);

enum class CellStatus { trained, skipped, failed };

struct CellOutcome {
    SweepCell cell;
    CellStatus status = CellStatus::failed;
    std::filesystem::path dir;
    std::string error;
    double l0 = 0.0;
    std::size_t alive = 0;
    double ce_increase = 0.0;
    double kl_eval = 0.0;
};

struct SweepOptions {
    std::size_t parallel = 1;
    bool write_summary = true;
    LogFn log;
};

struct SweepSummary {
    std::vector<CellOutcome> cells;  // grid order
    std::filesystem::path csv_path;
    std::size_t failures() const;
};

// Runs (or resumes) every cell, then rewrites <output_dir>/summary.csv
// unless write_summary is off.
SweepSummary run_sweep(const ExperimentConfig& config, const std::vector<SweepCell>& cells,
                       const SweepOptions& options = {});
SweepSummary run_sweep(const ExperimentConfig& config, const SweepOptions& options = {});

// 9 significant digits, locale-independent; non-finite values print as nan/inf.
std::string format_csv_number(double v);

void write_summary_csv(const ExperimentConfig& config, const std::vector<CellOutcome>& cells,
                       const std::filesystem::path& path);

}  // namespace saeforge
