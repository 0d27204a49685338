#pragma once

// JSON forms of configs and run artifacts.

#include <json.hpp>

#include "saeforge/geometry.hpp"
#include "saeforge/losses.hpp"
#include "saeforge/metrics.hpp"
#include "saeforge/trainer.hpp"
#include "saeforge/transformer.hpp"

namespace saeforge {

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

void to_json(nlohmann::json& j, const LossConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void to_json(nlohmann::json& j, const LossBreakdown& b);
void to_json(nlohmann::json& j, const IntervalRecord& r);
void to_json(nlohmann::json& j, const RunRecord& r);
void to_json(nlohmann::json& j, const MetricsReport& r);
void to_json(nlohmann::json& j, const ConfidenceInterval& c);
void to_json(nlohmann::json& j, const SimilarityProfile& p);
void to_json(nlohmann::json& j, const ActivationExample& e);

// NaN and infinities become null.
nlohmann::json finite_or_null(double v);

}  // namespace saeforge
