#include "saeforge/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>

#include "saeforge/checkpoint.hpp"
#include "saeforge/config.hpp"
#include "saeforge/geometry.hpp"
#include "saeforge/metrics.hpp"
#include "saeforge/sae.hpp"
#include "saeforge/serialize.hpp"
#include "saeforge/sweep.hpp"

namespace saeforge {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool quiet = false;
};

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

class Commands {
public:
    Commands(const Globals& g, std::ostream& out, std::ostream& err) : g_(g), out_(out), err_(err) {}

    LogFn log() const {
        if (g_.quiet) {
            return {};
        }
        return [this](const std::string& msg) { err_ << msg << '\n' << std::flush; };
    }

    ExperimentConfig config(const std::string& path) const {
        auto c = load_experiment_config(path);
        if (g_.seed) {
            c.train.seed = *g_.seed;
            if (!c.sweep.seeds.empty()) {
                c.sweep.seeds = {*g_.seed};
            }
        }
        if (g_.out) {
            c.output_dir = *g_.out;
        }
        c.validate();
        return c;
    }

    int train_base_cmd(const std::string& cfg_path) {
        const auto cfg = config(cfg_path);
        const auto params = train_base(cfg, log());
        const double ce = evaluate_cross_entropy(params, eval_data(cfg), cfg.eval.batch_size);
        out_ << "checkpoint " << cfg.base_checkpoint_path().string() << '\n';
        out_ << "eval_cross_entropy " << fixed6(ce) << '\n';
        return 0;
    }

    int sweep_cmd(const std::string& cfg_path, std::size_t parallel, bool single) {
        const auto cfg = config(cfg_path);
        SweepOptions opts;
        opts.parallel = parallel;
        opts.log = log();
        opts.write_summary = !single;
        const auto cells = single ? std::vector<SweepCell>{single_cell(cfg)} : expand_sweep(cfg);
        const auto summary = run_sweep(cfg, cells, opts);
        for (const auto& c : summary.cells) {
            out_ << c.cell.name << ' '
                 << (c.status == CellStatus::failed ? "failed" : c.status == CellStatus::skipped ? "skipped" : "trained")
                 << " l0 " << format_csv_number(c.l0) << " alive " << c.alive << " ce_increase "
                 << format_csv_number(c.ce_increase) << " kl_eval " << format_csv_number(c.kl_eval) << '\n';
        }
        if (!summary.csv_path.empty()) {
            out_ << "summary " << summary.csv_path.string() << '\n';
        }
        if (summary.failures() > 0) {
            err_ << summary.failures() << " of " << summary.cells.size() << " cells failed\n";
            return 1;
        }
        return 0;
    }

    int eval_cmd(const std::string& ckpt, const std::string& cfg_path) {
        const auto cfg = config(cfg_path);
        const auto model = ensure_base_model(cfg, log());
        const auto sae = load_sae(ckpt);
        EvalOptions eo;
        eo.batch_size = cfg.eval.batch_size;
        eo.alive_window_tokens = cfg.eval.tokens;
        const auto report = evaluate_sae(model, sae, eval_data(cfg), eo);
        out_ << "ce_increase " << fixed6(report.ce_increase) << '\n';
        out_ << "ce_orig " << fixed6(report.ce_orig) << '\n';
        out_ << "ce_sae " << fixed6(report.ce_sae) << '\n';
        out_ << "kl_eval " << fixed6(report.kl_eval) << '\n';
        out_ << "l0 " << fixed6(report.l0_mean) << '\n';
        out_ << "alive " << report.alive_count << '\n';
        if (g_.out) {
            write_file_atomic(*g_.out, json(report).dump(2) + "\n");
        }
        return 0;
    }

    // Alive masks come from the eval set when a config is given; otherwise
    // every row counts.
    std::vector<bool> alive_mask(const SparseAutoencoder<float>& sae, const std::optional<ExperimentConfig>& cfg,
                                 const std::optional<TransformerParams<float>>& model) {
        if (!cfg) {
            return {};
        }
        return alive_features(*model, sae, eval_data(*cfg), cfg->eval.batch_size);
    }

    int geometry_cmd(const std::vector<std::string>& ckpts, const std::string& kind_name,
                     const std::string& cfg_path, std::size_t resamples, double level) {
        std::optional<ExperimentConfig> cfg;
        std::optional<TransformerParams<float>> model;
        if (!cfg_path.empty()) {
            cfg = config(cfg_path);
            model = ensure_base_model(*cfg, log());
        }
        BootstrapOptions bo;
        bo.resamples = resamples;
        bo.confidence = level;
        bo.seed = g_.seed.value_or(0);

        const auto a = load_sae(ckpts[0]);
        SimilarityProfile profile;
        if (ckpts.size() == 1) {
            if (!kind_name.empty() && kind_name != "within") {
                throw std::invalid_argument("--kind " + kind_name + " needs two checkpoints");
            }
            profile = within_sae_similarity(a.dictionary.cast<double>(), alive_mask(a, cfg, model), bo);
        } else {
            const auto b = load_sae(ckpts[1]);
            ComparisonKind kind = ComparisonKind::cross_seed;
            if (kind_name == "cross_type") {
                kind = ComparisonKind::cross_type;
            } else if (!kind_name.empty() && kind_name != "cross_seed") {
                throw std::invalid_argument("--kind must be cross_seed or cross_type for two checkpoints");
            }
            profile = cross_sae_similarity(a.dictionary.cast<double>(), alive_mask(a, cfg, model),
                                           b.dictionary.cast<double>(), alive_mask(b, cfg, model), kind, bo);
        }
        out_ << "kind " << comparison_kind_name(profile.kind) << '\n';
        out_ << "rows " << profile.rows.size() << '\n';
        out_ << "mean " << fixed6(profile.mean) << '\n';
        out_ << "ci " << fixed6(profile.ci.lo) << ' ' << fixed6(profile.ci.hi) << '\n';
        if (g_.out) {
            write_file_atomic(*g_.out, json(profile).dump(2) + "\n");
        }
        return 0;
    }

    int export_features_cmd(std::vector<std::string> paths, const std::string& cfg_path) {
        const fs::path target = paths.back();
        paths.pop_back();
        std::optional<ExperimentConfig> cfg;
        std::optional<TransformerParams<float>> model;
        if (!cfg_path.empty()) {
            cfg = config(cfg_path);
            model = ensure_base_model(*cfg, log());
        }
        std::vector<LabeledDictionary> dicts;
        for (const auto& p : paths) {
            const fs::path path(p);
            const auto sae = load_sae(path);
            const std::string label =
                path.filename() == "sae.ckpt" && path.has_parent_path() ? path.parent_path().filename().string()
                                                                        : path.stem().string();
            dicts.push_back({label, sae.dictionary.cast<double>(), alive_mask(sae, cfg, model)});
        }
        export_feature_matrix(dicts, target);
        std::size_t rows = 0;
        for (const auto& d : dicts) {
            for (std::size_t i = 0; i < d.dictionary.shape()[0]; ++i) {
                rows += d.alive.empty() || d.alive[i];
            }
        }
        out_ << "wrote " << rows << " features to " << target.string() << '\n';
        return 0;
    }

    int export_dashboards_cmd(const std::string& ckpt, const std::string& cfg_path, const std::string& out_dir) {
        const auto cfg = config(cfg_path);
        const auto model = ensure_base_model(cfg, log());
        const auto sae = load_sae(ckpt);
        const auto data = eval_data(cfg);
        const auto examples =
            max_activating_examples(model, sae, data, cfg.eval.top_k, cfg.eval.context_window, cfg.eval.batch_size);
        fs::create_directories(out_dir);
        json alive = json::array();
        for (std::size_t f = 0; f < examples.size(); ++f) {
            if (examples[f].empty()) {
                continue;
            }
            alive.push_back(f);
            char name[32];
            std::snprintf(name, sizeof(name), "feature_%05zu.json", f);
            write_file_atomic(fs::path(out_dir) / name,
                              json({{"feature", f}, {"checkpoint", ckpt}, {"examples", examples[f]}}).dump(2) + "\n");
        }
        const json index = {{"checkpoint", ckpt},
                            {"n_dict", sae.n_dict()},
                            {"placement_layer", sae.placement_layer},
                            {"top_k", cfg.eval.top_k},
                            {"context_window", cfg.eval.context_window},
                            {"eval_tokens", data.tokens.size()},
                            {"alive_features", alive},
                            {"experiment", experiment_to_json(cfg)}};
        write_file_atomic(fs::path(out_dir) / "index.json", index.dump(2) + "\n");
        out_ << "wrote " << alive.size() << " feature dashboards to " << out_dir << '\n';
        return 0;
    }

private:
    const Globals& g_;
    std::ostream& out_;
    std::ostream& err_;
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Sparse dictionary training and analysis on a small transformer", "saeforge"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Override the training seed (bootstrap seed for geometry)");
    app.add_option("--out", g.out, "Override output_dir; for eval/geometry, write a JSON report here");
    app.add_flag("--quiet", g.quiet, "Suppress progress output");

    std::string config_path, ckpt, out_dir, kind, opt_config;
    std::vector<std::string> paths;
    std::size_t parallel = 1, resamples = 5000;
    double level = 0.95;

    auto* train_base = app.add_subcommand("train-base", "Train the base transformer");
    train_base->add_option("config", config_path)->required();
    auto* train_sae = app.add_subcommand("train-sae", "Train one SAE from the train section");
    train_sae->add_option("config", config_path)->required();
    auto* sweep = app.add_subcommand("sweep", "Train and evaluate every cell of the sweep grid");
    sweep->add_option("config", config_path)->required();
    sweep->add_option("--parallel", parallel, "Cells to run concurrently")->check(CLI::PositiveNumber);
    auto* eval = app.add_subcommand("eval", "Evaluate an SAE checkpoint");
    eval->add_option("checkpoint", ckpt)->required();
    eval->add_option("config", config_path)->required();
    auto* geometry = app.add_subcommand("geometry", "Max cosine similarity profile within or across SAEs");
    geometry->add_option("checkpoints", paths)->required()->expected(1, 2);
    geometry->add_option("--kind", kind, "within, cross_seed or cross_type");
    geometry->add_option("--config", opt_config, "Restrict to features alive on the eval set");
    geometry->add_option("--resamples", resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);
    geometry->add_option("--level", level, "Confidence level")->check(CLI::Range(0.0, 1.0));
    auto* export_features = app.add_subcommand("export-features", "Write dictionary rows of several SAEs to CSV");
    export_features->add_option("paths", paths, "checkpoints... out.csv")->required()->expected(2, -1);
    export_features->add_option("--config", opt_config, "Restrict to features alive on the eval set");
    auto* export_dashboards = app.add_subcommand("export-dashboards", "Max-activating examples per feature as JSON");
    export_dashboards->add_option("checkpoint", ckpt)->required();
    export_dashboards->add_option("config", config_path)->required();
    export_dashboards->add_option("out_dir", out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    Commands cmd(g, out, err);
    try {
        if (*train_base) {
            return cmd.train_base_cmd(config_path);
        }
        if (*train_sae) {
            return cmd.sweep_cmd(config_path, 1, true);
        }
        if (*sweep) {
            return cmd.sweep_cmd(config_path, parallel, false);
        }
        if (*eval) {
            return cmd.eval_cmd(ckpt, config_path);
        }
        if (*geometry) {
            return cmd.geometry_cmd(paths, kind, opt_config, resamples, level);
        }
        if (*export_features) {
            return cmd.export_features_cmd(paths, opt_config);
        }
        if (*export_dashboards) {
            return cmd.export_dashboards_cmd(ckpt, config_path, out_dir);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"saeforge"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace saeforge
