#include "msti/serialization.hpp"

#include <set>

namespace msti {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw Error(std::string(what) + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.count(key)) throw Error(std::string(what) + ": unknown key '" + key + "'");
    }
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

std::string gate_name(astfm::GateTarget g) { return g == astfm::GateTarget::transformed ? "transformed" : "input"; }

astfm::GateTarget parse_gate(const std::string& s) {
    if (s == "transformed") return astfm::GateTarget::transformed;
    if (s == "input") return astfm::GateTarget::input;
    throw Error("unknown gate target '" + s + "' (expected transformed or input)");
}

}  // namespace

nlohmann::json to_json(const NetworkConfig& c) {
    return {{"levels", c.levels},
            {"channels", c.channels},
            {"bottleneck_channels", c.bottleneck_channels},
            {"input_frames", c.input_frames},
            {"resolution", c.resolution},
            {"skip_connections", c.skip_connections},
            {"reduction", c.reduction},
            {"gate_target", gate_name(c.gate_target)},
            {"memory_items", c.memory_items},
            {"bn_momentum", c.bn_momentum},
            {"bn_eps", c.bn_eps}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
    reject_unknown(j,
                   {"levels", "channels", "bottleneck_channels", "input_frames", "resolution", "skip_connections",
                    "reduction", "gate_target", "memory_items", "bn_momentum", "bn_eps"},
                   "network config");
    NetworkConfig c;
    read_opt(j, "levels", c.levels);
    read_opt(j, "channels", c.channels);
    read_opt(j, "bottleneck_channels", c.bottleneck_channels);
    read_opt(j, "input_frames", c.input_frames);
    read_opt(j, "resolution", c.resolution);
    read_opt(j, "skip_connections", c.skip_connections);
    read_opt(j, "reduction", c.reduction);
    if (j.contains("gate_target")) c.gate_target = parse_gate(j.at("gate_target").get<std::string>());
    read_opt(j, "memory_items", c.memory_items);
    read_opt(j, "bn_momentum", c.bn_momentum);
    read_opt(j, "bn_eps", c.bn_eps);
    c.validate();
    return c;
}

nlohmann::json to_json(const ModelVariant& v) {
    return {{"motion_stream", v.use_motion_stream},
            {"interaction", v.use_interaction},
            {"astfm", v.use_astfm},
            {"memory", v.use_memory}};
}

ModelVariant variant_from_json(const nlohmann::json& j) {
    reject_unknown(j, {"motion_stream", "interaction", "astfm", "memory"}, "variant");
    ModelVariant v;
    read_opt(j, "motion_stream", v.use_motion_stream);
    read_opt(j, "interaction", v.use_interaction);
    read_opt(j, "astfm", v.use_astfm);
    read_opt(j, "memory", v.use_memory);
    v.validate();
    return v;
}

nlohmann::json to_json(const train::TrainConfig& c) {
    return {{"lambda_intensity", c.lambda_intensity},
            {"lambda_separate", c.lambda_separate},
            {"lambda_compact", c.lambda_compact},
            {"delta", c.delta},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"max_steps", c.max_steps},
            {"intensity_sum", c.intensity_sum},
            {"compact_inverted", c.compact_inverted}};
}

train::TrainConfig train_config_from_json(const nlohmann::json& j) {
    reject_unknown(j,
                   {"lambda_intensity", "lambda_separate", "lambda_compact", "delta", "learning_rate", "beta1", "beta2",
                    "adam_eps", "batch_size", "epochs", "seed", "checkpoint_every", "max_steps", "intensity_sum",
                    "compact_inverted"},
                   "train config");
    train::TrainConfig c;
    read_opt(j, "lambda_intensity", c.lambda_intensity);
    read_opt(j, "lambda_separate", c.lambda_separate);
    read_opt(j, "lambda_compact", c.lambda_compact);
    read_opt(j, "delta", c.delta);
    read_opt(j, "learning_rate", c.learning_rate);
    read_opt(j, "beta1", c.beta1);
    read_opt(j, "beta2", c.beta2);
    read_opt(j, "adam_eps", c.adam_eps);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "seed", c.seed);
    read_opt(j, "checkpoint_every", c.checkpoint_every);
    read_opt(j, "max_steps", c.max_steps);
    read_opt(j, "intensity_sum", c.intensity_sum);
    read_opt(j, "compact_inverted", c.compact_inverted);
    c.validate();
    return c;
}

}  // namespace msti
