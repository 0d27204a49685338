#include "saeforge/serialize.hpp"

#include <cmath>
#include <string>

namespace saeforge {

using nlohmann::json;

json finite_or_null(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

void to_json(json& j, const TransformerConfig& c) {
    j = {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"n_heads", c.n_heads},
         {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
         {"ln_epsilon", c.ln_epsilon}};
}

void from_json(const json& j, TransformerConfig& c) {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context_len = j.at("context_len").get<std::size_t>();
    c.ln_epsilon = j.value("ln_epsilon", 1e-5);
}

void to_json(json& j, const LossConfig& c) {
    j = {{"kind", loss_kind_name(c.kind)},
         {"lambda", c.lambda},
         {"beta", c.beta},
         {"kl_coeff", c.effective_kl_coeff()},
         {"kl_direction", kl_direction_name(c.kl_direction)}};
}

void to_json(json& j, const TrainConfig& c) {
    j = {{"loss", c.loss},
         {"lr_max", c.lr_max},
         {"warmup_samples", c.warmup()},
         {"decay_floor_fraction", c.decay_floor_fraction},
         {"effective_batch_size", c.effective_batch_size},
         {"micro_batch_size", c.micro_batch_size},
         {"total_samples", c.total_samples},
         {"grad_clip_norm", c.grad_clip_norm},
         {"seed", c.seed},
         {"eval_interval", c.eval_interval},
         {"alive_window_tokens", c.alive_window_tokens}};
}

void to_json(json& j, const LossBreakdown& b) {
    json per_layer = json::array();
    for (double v : b.downstream_per_layer) {
        per_layer.push_back(finite_or_null(v));
    }
    j = {{"total", finite_or_null(b.total)},
         {"reconstruction", finite_or_null(b.reconstruction)},
         {"sparsity", finite_or_null(b.sparsity)},
         {"kl", finite_or_null(b.kl)},
         {"downstream", finite_or_null(b.downstream)},
         {"downstream_per_layer", per_layer}};
}

void to_json(json& j, const IntervalRecord& r) {
    j = {{"step", r.step},   {"samples_seen", r.samples_seen}, {"lr", r.lr},
         {"loss", r.loss},   {"l0", finite_or_null(r.l0)},     {"alive", r.alive},
         {"grad_norm", finite_or_null(r.grad_norm)}};
}

void to_json(json& j, const RunRecord& r) {
    j = {{"config", r.config},
         {"placement_layer", r.placement_layer},
         {"n_dict", r.n_dict},
         {"intervals", r.intervals},
         {"checkpoint_path", r.checkpoint_path},
         {"wall_seconds", r.wall_seconds},
         {"completed", r.completed},
         {"error", r.error}};
}

void to_json(json& j, const MetricsReport& r) {
    json downstream = json::object();
    for (const auto& [k, v] : r.downstream_mse) {
        downstream[std::to_string(k)] = finite_or_null(v);
    }
    json ev = json::object();
    for (const auto& [k, v] : r.explained_variance) {
        ev[std::to_string(k)] = {{"raw", finite_or_null(v.raw)}, {"normalized", finite_or_null(v.normalized)}};
    }
    json deciles = json::array();
    for (double v : r.recon_cosine.deciles) {
        deciles.push_back(finite_or_null(v));
    }
    j = {{"placement_layer", r.placement_layer},
         {"n_dict", r.n_dict},
         {"eval_tokens", r.eval_tokens},
         {"ce_orig", finite_or_null(r.ce_orig)},
         {"ce_sae", finite_or_null(r.ce_sae)},
         {"ce_increase", finite_or_null(r.ce_increase)},
         {"kl_eval", finite_or_null(r.kl_eval)},
         {"l0_mean", finite_or_null(r.l0_mean)},
         {"alive_count", r.alive_count},
         {"downstream_mse", downstream},
         {"explained_variance", ev},
         {"l2_ratio",
          {{"position0", finite_or_null(r.l2_ratio.position0)},
           {"later", finite_or_null(r.l2_ratio.later)},
           {"excluded", r.l2_ratio.excluded}}},
         {"recon_cosine",
          {{"mean", finite_or_null(r.recon_cosine.mean)},
           {"deciles", deciles},
           {"count", r.recon_cosine.count},
           {"excluded", r.recon_cosine.excluded}}}};
}

void to_json(json& j, const ConfidenceInterval& c) {
    j = {{"lo", finite_or_null(c.lo)}, {"hi", finite_or_null(c.hi)}, {"level", c.level}, {"resamples", c.resamples}};
}

void to_json(json& j, const SimilarityProfile& p) {
    j = {{"kind", comparison_kind_name(p.kind)},
         {"rows", p.rows},
         {"values", p.values},
         {"mean", finite_or_null(p.mean)},
         {"ci", p.ci}};
}

void to_json(json& j, const ActivationExample& e) {
    j = {{"sequence", e.sequence},
         {"position", e.position},
         {"activation", e.activation},
         {"context_start", e.context_start},
         {"context", e.context}};
}

}  // namespace saeforge
