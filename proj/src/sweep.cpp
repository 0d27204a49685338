#include "saeforge/sweep.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "saeforge/checkpoint.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/serialize.hpp"
#include "saeforge/trainer.hpp"

namespace saeforge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json base_fingerprint(const ExperimentConfig& config) {
    auto base = experiment_to_json(config)["base"];
    base["train"].erase("log_every");
    base.erase("checkpoint");
    return base;
}

std::string shortest(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

std::string brief(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return json::parse(f);
}

void write_json(const fs::path& path, const json& j) {
    write_file_atomic(path, j.dump(2) + "\n");
}

json cell_json(const SweepCell& cell) {
    return {{"name", cell.name},
            {"loss_kind", loss_kind_name(cell.kind)},
            {"lambda", cell.lambda},
            {"seed", cell.seed},
            {"lr", cell.lr},
            {"dict_ratio", cell.dict_ratio},
            {"total_samples", cell.total_samples}};
}

// Everything that determines a cell's artifacts.
json cell_fingerprint(const ExperimentConfig& config, const SweepCell& cell, std::uint64_t base_hash) {
    const auto exp = experiment_to_json(config);
    return {{"cell", cell_json(cell)},
            {"train", json(cell_train_config(config, cell))},
            {"init_seed", cell_init_seed(config, cell)},
            {"placement_layer", config.sae.placement_layer},
            {"data", exp["data"]},
            {"eval", exp["eval"]},
            {"base_params", hex64(base_hash)}};
}

double number_or_nan(const json& j, const char* key) {
    const auto it = j.find(key);
    return it != j.end() && it->is_number() ? it->get<double>() : std::nan("");
}

class Runner {
public:
    Runner(const ExperimentConfig& config, const SweepOptions& options)
        : config_(config), options_(options), model_(ensure_base_model(config, options.log)),
          base_hash_(parameter_hash(model_)), eval_(eval_data(config)) {}

    void prepare(const std::vector<SweepCell>& cells) {
        std::size_t rows = 0;
        for (const auto& c : cells) {
            rows = std::max(rows, c.total_samples);
        }
        train_ = sae_training_data(config_, rows);
    }

    CellOutcome run(const SweepCell& cell) {
        CellOutcome out;
        out.cell = cell;
        out.dir = fs::path(config_.output_dir) / cell.name;
        const std::string hash = hex64(fnv1a64(cell_fingerprint(config_, cell, base_hash_).dump()));
        try {
            if (complete(out.dir, hash)) {
                fill(out, read_json(out.dir / "metrics.json"));
                out.status = CellStatus::skipped;
                log(cell.name + ": up to date, skipped");
                return out;
            }
            train_and_evaluate(cell, out, hash);
            out.status = CellStatus::trained;
        } catch (const std::exception& e) {
            out.status = CellStatus::failed;
            out.error = e.what();
            out.l0 = out.ce_increase = out.kl_eval = std::nan("");
            out.alive = 0;
            log(cell.name + ": FAILED: " + out.error);
        }
        return out;
    }

private:
    void log(const std::string& msg) {
        if (options_.log) {
            std::lock_guard lock(log_mutex_);
            options_.log(msg);
        }
    }

    static bool complete(const fs::path& dir, const std::string& hash) {
        if (!fs::exists(dir / "cell.json") || !fs::exists(dir / "metrics.json") || !fs::exists(dir / "sae.ckpt")) {
            return false;
        }
        try {
            return read_json(dir / "cell.json").value("config_hash", "") == hash;
        } catch (const std::exception&) {
            return false;
        }
    }

    static void fill(CellOutcome& out, const json& metrics) {
        out.l0 = number_or_nan(metrics, "l0_mean");
        out.alive = metrics.value("alive_count", std::size_t{0});
        out.ce_increase = number_or_nan(metrics, "ce_increase");
        out.kl_eval = number_or_nan(metrics, "kl_eval");
    }

    void train_and_evaluate(const SweepCell& cell, CellOutcome& out, const std::string& hash) {
        fs::create_directories(out.dir);
        fs::remove(out.dir / "cell.json");
        const auto tc = cell_train_config(config_, cell);
        const auto& m = config_.base.model;
        auto sae = init_sae(m.d_model, static_cast<std::size_t>(std::llround(cell.dict_ratio * m.d_model)),
                            cell_init_seed(config_, cell), config_.sae.placement_layer);
        const auto data = train_.rows(0, cell.total_samples);
        const auto started = std::chrono::steady_clock::now();
        log(cell.name + ": training " + std::to_string(tc.total_steps()) + " steps");

        json meta = {{"cell", cell_json(cell)},
                     {"experiment", experiment_to_json(config_)},
                     {"base_params", hex64(base_hash_)}};
        RunRecord record;
        try {
            auto result = train_sae(model_, std::move(sae), data, tc, [&](const IntervalRecord& r) {
                log(cell.name + ": step " + std::to_string(r.step) + " loss " + brief(r.loss.total) + " l0 " +
                    brief(r.l0) + " alive " + std::to_string(r.alive));
            });
            sae = std::move(result.sae);
            record = std::move(result.record);
        } catch (const TrainingError& e) {
            json run = e.record();
            run["created"] = utc_now();
            run.update(meta);
            write_json(out.dir / "run.json", run);
            throw;
        }
        record.checkpoint_path = (out.dir / "sae.ckpt").string();
        record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        save_sae(out.dir / "sae.ckpt", sae, {{"train", json(tc)}, {"cell", cell_json(cell)}});

        EvalOptions eo;
        eo.batch_size = config_.eval.batch_size;
        eo.alive_window_tokens = config_.eval.tokens;
        const auto report = evaluate_sae(model_, sae, eval_, eo);
        const json metrics = report;
        write_json(out.dir / "metrics.json", metrics);

        json run = record;
        run["created"] = utc_now();
        run.update(meta);
        write_json(out.dir / "run.json", run);
        write_json(out.dir / "cell.json", {{"config_hash", hash}, {"cell", cell_json(cell)}});
        fill(out, metrics);
        log(cell.name + ": l0 " + brief(out.l0) + " ce_increase " + brief(out.ce_increase));
    }

    const ExperimentConfig& config_;
    const SweepOptions& options_;
    TransformerParams<float> model_;
    std::uint64_t base_hash_;
    TokenDataset eval_;
    TokenDataset train_;
    std::mutex log_mutex_;
};

}  // namespace

SyntheticLanguage make_language(const ExperimentConfig& config) {
    auto corpus = config.base.corpus;
    corpus.vocab_size = config.base.model.vocab_size;
    return SyntheticLanguage(corpus);
}

TokenDataset base_training_data(const ExperimentConfig& config) {
    return make_language(config).sample(config.base.sequences, config.base.model.context_len, config.base.data_seed);
}

TokenDataset sae_training_data(const ExperimentConfig& config, std::size_t n_sequences) {
    return make_language(config).sample(n_sequences, config.data.seq_len, config.data.seed);
}

TokenDataset eval_data(const ExperimentConfig& config) {
    return make_language(config).sample(config.eval.sequences(config.data.seq_len), config.data.seq_len,
                                        config.eval.seed);
}

TransformerParams<float> train_base(const ExperimentConfig& config, const LogFn& log) {
    const auto data = base_training_data(config);
    auto options = config.base.train;
    if (log && options.log_every == 0) {
        options.log_every = std::max<std::size_t>(1, options.steps / 10);
    }
    auto result = train_base_model(config.base.model, data, options, [&](std::size_t step, double loss) {
        if (log) {
            log("base: step " + std::to_string(step) + " loss " + brief(loss));
        }
    });
    const double ce = evaluate_cross_entropy(result.params, eval_data(config), config.eval.batch_size);
    if (log) {
        log("base: eval cross-entropy " + brief(ce));
    }
    save_transformer(config.base_checkpoint_path(), result.params,
                     {{"base", base_fingerprint(config)}, {"eval_cross_entropy", ce}});
    return std::move(result.params);
}

TransformerParams<float> ensure_base_model(const ExperimentConfig& config, const LogFn& log) {
    const auto path = config.base_checkpoint_path();
    if (!fs::exists(path)) {
        if (log) {
            log("base: no checkpoint at " + path.string() + ", training");
        }
        return train_base(config, log);
    }
    const auto ckpt = load_checkpoint(path);
    if (ckpt.run.value("base", json()) != base_fingerprint(config)) {
        throw std::runtime_error("base checkpoint " + path.string() +
                                 " was trained from a different base section; remove it or change base.checkpoint");
    }
    return transformer_from_checkpoint(ckpt);
}

std::vector<SweepCell> expand_sweep(const ExperimentConfig& config) {
    const auto& s = config.sweep;
    const auto kinds = s.loss_kinds.empty() ? std::vector<LossKind>{config.train.loss.kind} : s.loss_kinds;
    const auto seeds = s.seeds.empty() ? std::vector<std::uint64_t>{config.train.seed} : s.seeds;
    const auto lrs = s.lrs.empty() ? std::vector<double>{config.train.lr_max} : s.lrs;
    const auto ratios = s.dict_ratios.empty() ? std::vector<double>{config.sae.dict_ratio} : s.dict_ratios;
    const auto samples =
        s.total_samples.empty() ? std::vector<std::size_t>{config.train.total_samples} : s.total_samples;

    std::vector<SweepCell> cells;
    for (auto kind : kinds) {
        auto it = s.lambdas.find(kind);
        const auto lambdas =
            it == s.lambdas.end() || it->second.empty() ? std::vector<double>{config.train.loss.lambda} : it->second;
        for (double lambda : lambdas) {
            for (auto seed : seeds) {
                for (double lr : lrs) {
                    for (double ratio : ratios) {
                        for (auto n : samples) {
                            SweepCell c{kind, lambda, seed, lr, ratio, n, {}};
                            c.name = loss_kind_name(kind) + "_lam" + shortest(lambda) + "_seed" +
                                     std::to_string(seed) + "_lr" + shortest(lr);
                            if (!s.dict_ratios.empty()) {
                                c.name += "_ratio" + shortest(ratio);
                            }
                            if (!s.total_samples.empty()) {
                                c.name += "_n" + std::to_string(n);
                            }
                            cells.push_back(std::move(c));
                        }
                    }
                }
            }
        }
    }
    return cells;
}

SweepCell single_cell(const ExperimentConfig& config) {
    auto c = config;
    c.sweep = SweepSection{};
    return expand_sweep(c).front();
}

TrainConfig cell_train_config(const ExperimentConfig& config, const SweepCell& cell) {
    auto tc = config.train;
    tc.loss.kind = cell.kind;
    tc.loss.lambda = cell.lambda;
    tc.seed = cell.seed;
    tc.lr_max = cell.lr;
    tc.total_samples = cell.total_samples;
    return tc;
}

std::uint64_t cell_init_seed(const ExperimentConfig& config, const SweepCell& cell) {
    return mix_seed(config.sae.init_seed, cell.seed);
}

std::size_t SweepSummary::failures() const {
    std::size_t n = 0;
    for (const auto& c : cells) {
        n += c.status == CellStatus::failed;
    }
    return n;
}

SweepSummary run_sweep(const ExperimentConfig& config, const std::vector<SweepCell>& cells,
                       const SweepOptions& options) {
    fs::create_directories(config.output_dir);
    write_json(fs::path(config.output_dir) / "experiment.json", experiment_to_json(config));
    Runner runner(config, options);
    runner.prepare(cells);

    SweepSummary summary;
    summary.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            summary.cells[i] = runner.run(cells[i]);
        }
    };
    const std::size_t n_threads = std::clamp<std::size_t>(options.parallel, 1, std::max<std::size_t>(1, cells.size()));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) {
            pool.emplace_back(worker);
        }
    }
    if (options.write_summary) {
        summary.csv_path = fs::path(config.output_dir) / "summary.csv";
        write_summary_csv(config, summary.cells, summary.csv_path);
    }
    return summary;
}

SweepSummary run_sweep(const ExperimentConfig& config, const SweepOptions& options) {
    return run_sweep(config, expand_sweep(config), options);
}

std::string format_csv_number(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    if (std::isinf(v)) {
        return v > 0 ? "inf" : "-inf";
    }
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
    return std::string(buf, r.ptr);
}

void write_summary_csv(const ExperimentConfig& config, const std::vector<CellOutcome>& cells, const fs::path& path) {
    const bool ratios = !config.sweep.dict_ratios.empty();
    const bool samples = !config.sweep.total_samples.empty();
    std::ostringstream out;
    out << "loss_kind,lambda,seed,lr";
    if (ratios) {
        out << ",dict_ratio";
    }
    if (samples) {
        out << ",total_samples";
    }
    out << ",l0,alive,ce_increase,kl_eval\n";
    for (const auto& c : cells) {
        out << loss_kind_name(c.cell.kind) << ',' << format_csv_number(c.cell.lambda) << ',' << c.cell.seed << ','
            << format_csv_number(c.cell.lr);
        if (ratios) {
            out << ',' << format_csv_number(c.cell.dict_ratio);
        }
        if (samples) {
            out << ',' << c.cell.total_samples;
        }
        out << ',' << format_csv_number(c.l0) << ',';
        if (c.status == CellStatus::failed) {
            out << "nan";
        } else {
            out << c.alive;
        }
        out << ',' << format_csv_number(c.ce_increase) << ',' << format_csv_number(c.kl_eval) << '\n';
    }
    write_file_atomic(path, out.str());
}

}  // namespace saeforge
