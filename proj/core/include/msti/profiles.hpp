#pragma once

#include "msti/backbone.hpp"
#include "msti/synthetic.hpp"
#include "msti/training.hpp"

// Settings for the 64x64 synthetic scenes on a single CPU core. The library defaults
// (NetworkConfig{}, TrainConfig{}) keep the full-size 256x256 configuration.
namespace msti::profiles {

inline NetworkConfig desk_network() {
    NetworkConfig c;
    c.resolution = 64;
    c.channels = {8, 16, 32};
    c.bottleneck_channels = 64;
    c.reduction = 4;
    return c;
}

inline train::TrainConfig desk_training() {
    train::TrainConfig c;
    c.learning_rate = 1e-3;
    c.batch_size = 8;
    c.epochs = 30;
    return c;
}

inline synthetic::SyntheticSceneConfig desk_scene() {
    synthetic::SyntheticSceneConfig c;
    c.anomalies = synthetic::default_anomaly_script(c, desk_network().input_frames);
    return c;
}

}  // namespace msti::profiles
