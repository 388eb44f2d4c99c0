#pragma once

#include <nlohmann/json.hpp>

#include "msti/backbone.hpp"
#include "msti/training.hpp"

namespace msti {

nlohmann::json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelVariant& v);
ModelVariant variant_from_json(const nlohmann::json& j);
nlohmann::json to_json(const train::TrainConfig& c);
train::TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace msti
