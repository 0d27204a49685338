#pragma once

// Experiment configuration, read from a JSON document. Unknown keys are
// rejected; every error names the offending key path (e.g. "train.lambda").

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "saeforge/corpus.hpp"
#include "saeforge/losses.hpp"
#include "saeforge/trainer.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& key, const std::string& message)
        : std::invalid_argument(key + ": " + message), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct BaseSection {
    TransformerConfig model;
    CorpusConfig corpus;
    BaseTrainOptions train;
    std::size_t sequences = 4096;    // rows of base-model training text
    std::uint64_t data_seed = 100;
    std::string checkpoint = "base.ckpt";  // relative paths resolve against output_dir
};

struct DataSection {
    std::size_t seq_len = 64;
    std::uint64_t seed = 200;  // SAE training text
};

struct SaeSection {
    std::size_t placement_layer = 2;
    double dict_ratio = 8.0;
    std::uint64_t init_seed = 0;

    std::size_t n_dict(std::size_t d_model) const;
};

// Empty lists fall back to the single value in the train / sae sections.
struct SweepSection {
    std::vector<LossKind> loss_kinds;
    std::map<LossKind, std::vector<double>> lambdas;  // per kind; a plain list applies to every kind
    std::vector<std::uint64_t> seeds;
    std::vector<double> lrs;
    std::vector<double> dict_ratios;
    std::vector<std::size_t> total_samples;
};

struct EvalSection {
    std::uint64_t seed = 300;
    std::size_t tokens = 16384;
    std::size_t batch_size = 16;
    std::size_t top_k = 10;
    std::size_t context_window = 8;  // tokens shown either side in dashboards

    std::size_t sequences(std::size_t seq_len) const { return (tokens + seq_len - 1) / seq_len; }
};

struct ExperimentConfig {
    BaseSection base;
    DataSection data;
    SaeSection sae;
    TrainConfig train;
    SweepSection sweep;
    EvalSection eval;
    std::string output_dir = "runs";

    std::filesystem::path base_checkpoint_path() const;
    // Throws ConfigError naming the key.
    void validate() const;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Canonical JSON with every default filled in; parses back to the same config.
nlohmann::json experiment_to_json(const ExperimentConfig& config);

}  // namespace saeforge
