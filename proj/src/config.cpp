#include "saeforge/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "saeforge/serialize.hpp"

namespace saeforge {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and remembers which were consumed, so that
// leftovers can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(label(), "expected an object");
        }
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

    const json* find(const std::string& k) {
        seen_.insert(k);
        auto it = j_.find(k);
        return it == j_.end() ? nullptr : &*it;
    }

    void read(const std::string& k, std::size_t& out) {
        if (const auto* v = find(k)) {
            out = as_count(*v, key(k));
        }
    }
    void read(const std::string& k, double& out) {
        if (const auto* v = find(k)) {
            out = as_real(*v, key(k));
        }
    }
    void read(const std::string& k, std::string& out) {
        if (const auto* v = find(k)) {
            if (!v->is_string()) {
                throw ConfigError(key(k), "expected a string");
            }
            out = v->get<std::string>();
        }
    }
    void read_seed(const std::string& k, std::uint64_t& out) {
        if (const auto* v = find(k)) {
            out = as_count(*v, key(k));
        }
    }

    Section child(const std::string& k) {
        static const json empty = json::object();
        const auto* v = find(k);
        return Section(v ? *v : empty, key(k));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(key(it.key()), "unknown key");
            }
        }
    }

    static std::uint64_t as_count(const json& v, const std::string& key) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            throw ConfigError(key, "expected a non-negative integer");
        }
        return v.get<std::uint64_t>();
    }

    static double as_real(const json& v, const std::string& key) {
        if (!v.is_number()) {
            throw ConfigError(key, "expected a number");
        }
        return v.get<double>();
    }

private:
    std::string label() const { return path_.empty() ? "<root>" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename F>
void keyed(const std::string& key, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key, e.what());
    }
}

LossKind read_kind(const json& v, const std::string& key) {
    if (!v.is_string()) {
        throw ConfigError(key, "expected a loss kind string");
    }
    LossKind kind{};
    keyed(key, [&] { kind = parse_loss_kind(v.get<std::string>()); });
    return kind;
}

std::vector<double> read_reals(const json& v, const std::string& key) {
    if (!v.is_array()) {
        throw ConfigError(key, "expected a list of numbers");
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(Section::as_real(v[i], key + "[" + std::to_string(i) + "]"));
    }
    return out;
}

template <typename U>
std::vector<U> read_counts(const json& v, const std::string& key) {
    if (!v.is_array()) {
        throw ConfigError(key, "expected a list of non-negative integers");
    }
    std::vector<U> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(static_cast<U>(Section::as_count(v[i], key + "[" + std::to_string(i) + "]")));
    }
    return out;
}

void parse_model(Section s, TransformerConfig& m) {
    s.read("n_layers", m.n_layers);
    s.read("d_model", m.d_model);
    s.read("n_heads", m.n_heads);
    s.read("d_mlp", m.d_mlp);
    s.read("vocab_size", m.vocab_size);
    s.read("context_len", m.context_len);
    s.read("ln_epsilon", m.ln_epsilon);
    s.finish();
}

void parse_corpus(Section s, CorpusConfig& c) {
    s.read("n_chains", c.n_chains);
    s.read("branching", c.branching);
    s.read("copy_prob", c.copy_prob);
    s.read("min_copy", c.min_copy);
    s.read("max_copy", c.max_copy);
    s.read_seed("language_seed", c.language_seed);
    s.finish();
}

void parse_base_train(Section s, BaseTrainOptions& o) {
    s.read("steps", o.steps);
    s.read("lr", o.lr);
    s.read("batch_size", o.batch_size);
    s.read("warmup_steps", o.warmup_steps);
    s.read("grad_clip", o.grad_clip);
    s.read_seed("seed", o.seed);
    s.read("log_every", o.log_every);
    s.finish();
}

void parse_train(Section s, TrainConfig& t) {
    if (const auto* v = s.find("loss")) {
        t.loss.kind = read_kind(*v, s.key("loss"));
    }
    s.read("lambda", t.loss.lambda);
    s.read("beta", t.loss.beta);
    if (const auto* v = s.find("kl_coeff"); v && !v->is_null()) {
        t.loss.kl_coeff = Section::as_real(*v, s.key("kl_coeff"));
    }
    if (const auto* v = s.find("kl_direction")) {
        if (!v->is_string()) {
            throw ConfigError(s.key("kl_direction"), "expected a string");
        }
        keyed(s.key("kl_direction"), [&] { t.loss.kl_direction = parse_kl_direction(v->get<std::string>()); });
    }
    s.read("lr_max", t.lr_max);
    if (const auto* v = s.find("warmup_samples"); v && !v->is_null()) {
        t.warmup_samples = Section::as_count(*v, s.key("warmup_samples"));
    }
    s.read("decay_floor_fraction", t.decay_floor_fraction);
    s.read("effective_batch_size", t.effective_batch_size);
    s.read("micro_batch_size", t.micro_batch_size);
    s.read("total_samples", t.total_samples);
    s.read("grad_clip_norm", t.grad_clip_norm);
    s.read_seed("seed", t.seed);
    s.read("eval_interval", t.eval_interval);
    s.read("alive_window_tokens", t.alive_window_tokens);
    s.finish();
}

void parse_sweep(Section s, SweepSection& w) {
    if (const auto* v = s.find("loss_kinds")) {
        if (!v->is_array()) {
            throw ConfigError(s.key("loss_kinds"), "expected a list of loss kinds");
        }
        for (std::size_t i = 0; i < v->size(); ++i) {
            w.loss_kinds.push_back(read_kind((*v)[i], s.key("loss_kinds") + "[" + std::to_string(i) + "]"));
        }
    }
    if (const auto* v = s.find("lambdas")) {
        const auto key = s.key("lambdas");
        if (v->is_object()) {
            for (auto it = v->begin(); it != v->end(); ++it) {
                LossKind kind{};
                keyed(key + "." + it.key(), [&] { kind = parse_loss_kind(it.key()); });
                w.lambdas[kind] = read_reals(it.value(), key + "." + it.key());
            }
        } else {
            const auto list = read_reals(*v, key);
            for (auto kind : {LossKind::local, LossKind::e2e, LossKind::e2e_downstream}) {
                w.lambdas[kind] = list;
            }
        }
    }
    if (const auto* v = s.find("seeds")) {
        w.seeds = read_counts<std::uint64_t>(*v, s.key("seeds"));
    }
    if (const auto* v = s.find("lrs")) {
        w.lrs = read_reals(*v, s.key("lrs"));
    }
    if (const auto* v = s.find("dict_ratios")) {
        w.dict_ratios = read_reals(*v, s.key("dict_ratios"));
    }
    if (const auto* v = s.find("total_samples")) {
        w.total_samples = read_counts<std::size_t>(*v, s.key("total_samples"));
    }
    s.finish();
}

void require(bool ok, const std::string& key, const std::string& message) {
    if (!ok) {
        throw ConfigError(key, message);
    }
}

void check_lambda(double v, const std::string& key) {
    require(std::isfinite(v) && v >= 0.0, key, "lambda must be a finite non-negative number");
}

void check_ratio(double v, std::size_t d_model, const std::string& key) {
    require(std::isfinite(v) && v > 0.0 && std::llround(v * static_cast<double>(d_model)) >= 1, key,
            "dictionary ratio must give at least one feature");
}

}  // namespace

std::size_t SaeSection::n_dict(std::size_t d_model) const {
    return static_cast<std::size_t>(std::llround(dict_ratio * static_cast<double>(d_model)));
}

std::filesystem::path ExperimentConfig::base_checkpoint_path() const {
    const std::filesystem::path p(base.checkpoint);
    return p.is_absolute() ? p : std::filesystem::path(output_dir) / p;
}

void ExperimentConfig::validate() const {
    const auto& m = base.model;
    keyed("base.model", [&] { m.validate(); });
    require(base.corpus.n_chains >= 1, "base.corpus.n_chains", "must be at least 1");
    require(base.corpus.branching >= 1, "base.corpus.branching", "must be at least 1");
    require(base.corpus.copy_prob >= 0.0 && base.corpus.copy_prob <= 1.0, "base.corpus.copy_prob",
            "must lie in [0, 1]");
    require(base.corpus.min_copy >= 1 && base.corpus.min_copy <= base.corpus.max_copy, "base.corpus.min_copy",
            "need 1 <= min_copy <= max_copy");
    require(base.train.steps >= 1, "base.train.steps", "must be at least 1");
    require(base.train.lr > 0.0, "base.train.lr", "must be positive");
    require(base.train.batch_size >= 1, "base.train.batch_size", "must be at least 1");
    require(base.train.grad_clip > 0.0, "base.train.grad_clip", "must be positive");
    require(base.sequences >= 1, "base.sequences", "must be at least 1");
    require(!base.checkpoint.empty(), "base.checkpoint", "must not be empty");

    require(data.seq_len >= 2 && data.seq_len <= m.context_len, "data.seq_len",
            "must lie in [2, base.model.context_len]");

    require(sae.placement_layer < m.n_layers, "sae.placement_layer", "must be below base.model.n_layers");
    check_ratio(sae.dict_ratio, m.d_model, "sae.dict_ratio");

    check_lambda(train.loss.lambda, "train.lambda");
    require(std::isfinite(train.loss.beta) && train.loss.beta >= 0.0, "train.beta", "must be non-negative");
    require(!train.loss.kl_coeff || *train.loss.kl_coeff > 0.0, "train.kl_coeff", "must be positive");
    keyed("train", [&] { train.validate(); });
    if (train.loss.kind == LossKind::e2e_downstream) {
        require(sae.placement_layer + 1 < m.n_layers, "sae.placement_layer",
                "e2e_ds needs at least one downstream layer");
    }

    for (std::size_t i = 0; i < sweep.loss_kinds.size(); ++i) {
        if (sweep.loss_kinds[i] == LossKind::e2e_downstream) {
            require(sae.placement_layer + 1 < m.n_layers, "sweep.loss_kinds[" + std::to_string(i) + "]",
                    "e2e_ds needs a placement layer with a downstream layer");
        }
    }
    for (const auto& [kind, list] : sweep.lambdas) {
        for (std::size_t i = 0; i < list.size(); ++i) {
            check_lambda(list[i], "sweep.lambdas." + loss_kind_name(kind) + "[" + std::to_string(i) + "]");
        }
    }
    for (std::size_t i = 0; i < sweep.lrs.size(); ++i) {
        require(std::isfinite(sweep.lrs[i]) && sweep.lrs[i] > 0.0, "sweep.lrs[" + std::to_string(i) + "]",
                "must be positive");
    }
    for (std::size_t i = 0; i < sweep.dict_ratios.size(); ++i) {
        check_ratio(sweep.dict_ratios[i], m.d_model, "sweep.dict_ratios[" + std::to_string(i) + "]");
    }
    for (std::size_t i = 0; i < sweep.total_samples.size(); ++i) {
        require(sweep.total_samples[i] >= train.effective_batch_size,
                "sweep.total_samples[" + std::to_string(i) + "]", "must cover at least one batch");
    }

    require(eval.tokens >= data.seq_len, "eval.tokens", "must cover at least one sequence");
    require(eval.batch_size >= 1, "eval.batch_size", "must be at least 1");
    require(!output_dir.empty(), "output_dir", "must not be empty");
}

ExperimentConfig parse_experiment_config(const json& j) {
    ExperimentConfig c;
    Section root(j, "");
    {
        auto base = root.child("base");
        parse_model(base.child("model"), c.base.model);
        parse_corpus(base.child("corpus"), c.base.corpus);
        parse_base_train(base.child("train"), c.base.train);
        base.read("sequences", c.base.sequences);
        base.read_seed("data_seed", c.base.data_seed);
        base.read("checkpoint", c.base.checkpoint);
        base.finish();
    }
    c.base.corpus.vocab_size = c.base.model.vocab_size;
    c.data.seq_len = c.base.model.context_len;
    {
        auto data = root.child("data");
        data.read("seq_len", c.data.seq_len);
        data.read_seed("seed", c.data.seed);
        data.finish();
    }
    {
        auto sae = root.child("sae");
        sae.read("placement_layer", c.sae.placement_layer);
        sae.read("dict_ratio", c.sae.dict_ratio);
        sae.read_seed("init_seed", c.sae.init_seed);
        sae.finish();
    }
    parse_train(root.child("train"), c.train);
    parse_sweep(root.child("sweep"), c.sweep);
    {
        auto eval = root.child("eval");
        eval.read_seed("seed", c.eval.seed);
        eval.read("tokens", c.eval.tokens);
        eval.read("batch_size", c.eval.batch_size);
        eval.read("top_k", c.eval.top_k);
        eval.read("context_window", c.eval.context_window);
        eval.finish();
    }
    root.read("output_dir", c.output_dir);
    root.finish();
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("cannot open config " + path.string());
    }
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", path.string() + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

json experiment_to_json(const ExperimentConfig& c) {
    const auto& b = c.base;
    json lambdas = json::object();
    for (const auto& [kind, list] : c.sweep.lambdas) {
        lambdas[loss_kind_name(kind)] = list;
    }
    json kinds = json::array();
    for (auto k : c.sweep.loss_kinds) {
        kinds.push_back(loss_kind_name(k));
    }
    const auto& t = c.train;
    return {
        {"base",
         {{"model", b.model},
          {"corpus",
           {{"n_chains", b.corpus.n_chains},
            {"branching", b.corpus.branching},
            {"copy_prob", b.corpus.copy_prob},
            {"min_copy", b.corpus.min_copy},
            {"max_copy", b.corpus.max_copy},
            {"language_seed", b.corpus.language_seed}}},
          {"train",
           {{"steps", b.train.steps},
            {"lr", b.train.lr},
            {"batch_size", b.train.batch_size},
            {"warmup_steps", b.train.warmup_steps},
            {"grad_clip", b.train.grad_clip},
            {"seed", b.train.seed},
            {"log_every", b.train.log_every}}},
          {"sequences", b.sequences},
          {"data_seed", b.data_seed},
          {"checkpoint", b.checkpoint}}},
        {"data", {{"seq_len", c.data.seq_len}, {"seed", c.data.seed}}},
        {"sae", {{"placement_layer", c.sae.placement_layer}, {"dict_ratio", c.sae.dict_ratio}, {"init_seed", c.sae.init_seed}}},
        {"train",
         {{"loss", loss_kind_name(t.loss.kind)},
          {"lambda", t.loss.lambda},
          {"beta", t.loss.beta},
          {"kl_coeff", t.loss.kl_coeff ? json(*t.loss.kl_coeff) : json(nullptr)},
          {"kl_direction", kl_direction_name(t.loss.kl_direction)},
          {"lr_max", t.lr_max},
          {"warmup_samples", t.warmup_samples ? json(*t.warmup_samples) : json(nullptr)},
          {"decay_floor_fraction", t.decay_floor_fraction},
          {"effective_batch_size", t.effective_batch_size},
          {"micro_batch_size", t.micro_batch_size},
          {"total_samples", t.total_samples},
          {"grad_clip_norm", t.grad_clip_norm},
          {"seed", t.seed},
          {"eval_interval", t.eval_interval},
          {"alive_window_tokens", t.alive_window_tokens}}},
        {"sweep",
         {{"loss_kinds", kinds},
          {"lambdas", lambdas},
          {"seeds", c.sweep.seeds},
          {"lrs", c.sweep.lrs},
          {"dict_ratios", c.sweep.dict_ratios},
          {"total_samples", c.sweep.total_samples}}},
        {"eval",
         {{"seed", c.eval.seed},
          {"tokens", c.eval.tokens},
          {"batch_size", c.eval.batch_size},
          {"top_k", c.eval.top_k},
          {"context_window", c.eval.context_window}}},
        {"output_dir", c.output_dir}};
}

}  // namespace saeforge
