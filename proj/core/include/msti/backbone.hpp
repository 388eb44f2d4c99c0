#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msti/astfm.hpp"
#include "msti/layers.hpp"
#include "msti/memory.hpp"

namespace msti {

struct NetworkConfig {
    int levels = 3;
    std::vector<int> channels{64, 128, 256};
    int bottleneck_channels = 512;
    int input_frames = 4;
    int resolution = 256;
    bool skip_connections = true;
    int reduction = 8;
    astfm::GateTarget gate_target = astfm::GateTarget::transformed;
    int memory_items = 10;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    /// Throws Error on an inconsistent configuration.
    void validate() const;
};

/// Component toggles. Letters A-E name the ablation rows.
struct ModelVariant {
    bool use_motion_stream = true;
    bool use_interaction = true;
    bool use_astfm = true;
    bool use_memory = true;

    static ModelVariant from_letter(char letter);
    /// Letter of a named row, or '?' for other flag combinations.
    char letter() const;
    void validate() const;
    bool operator==(const ModelVariant&) const = default;
};

std::vector<char> variant_letters();

template <typename T>
struct EncoderOutput {
    Var<T> bottleneck;             ///< what feeds memory / decoder
    Var<T> appearance_bottleneck;  ///< appearance stream after the third level
    Var<T> motion_bottleneck;      ///< only for separate (non-interacting) dual streams
    std::vector<Var<T>> skips;     ///< per level, appearance features after fusion
    std::vector<Var<T>> attention; ///< per level fusion weights (empty unless ASTFM)
};

template <typename T>
struct ForwardOutput {
    Var<T> prediction;    ///< [B,3,H,W] in [-1,1]
    Var<T> queries;       ///< [1,1,B*h*w,C]
    Var<T> read_queries;  ///< undefined without memory
    Var<T> weights;       ///< undefined without memory
    Var<T> decoder_input;
    EncoderOutput<T> encoder;
};

/// Dual-stream encoder with per-level motion-to-appearance fusion, memory read, and
/// a U-shaped decoder predicting the next frame.
template <typename T>
class MstiNet {
public:
    MstiNet(NetworkConfig config, ModelVariant variant, std::uint64_t seed);

    const NetworkConfig& config() const { return config_; }
    const ModelVariant& variant() const { return variant_; }
    ParameterSet<T>& parameters() { return params_; }
    const ParameterSet<T>& parameters() const { return params_; }

    /// frames: [B,3T,H,W]; flow: [B,2T,H,W] (ignored without a motion stream).
    EncoderOutput<T> encode(const Var<T>& frames, const Var<T>& flow, bool training);
    /// input: [B,2C,h,w] with memory, [B,C,h,w] without.
    Var<T> decode(const Var<T>& input, const std::vector<Var<T>>& skips, bool training);
    /// `items` may be undefined when the variant has no memory.
    ForwardOutput<T> forward(const Var<T>& frames, const Var<T>& flow, const Var<T>& items, bool training);

    int decoder_input_channels() const;

private:
    NormMode<T> mode(bool training) const;

    NetworkConfig config_;
    ModelVariant variant_;
    ParameterSet<T> params_;

    ConvBlock<T> app_stem_;
    std::vector<ConvBlock<T>> app_blocks_;
    std::vector<Conv<T>> app_down_;
    std::vector<ConvBlock<T>> motion_blocks_;
    std::vector<Conv<T>> motion_down_;
    std::optional<ConvBlock<T>> motion_tail_block_;
    std::optional<Conv<T>> motion_tail_down_;
    std::vector<astfm::ChannelAttentionParams<T>> attention_;
    std::vector<astfm::FusionParams<T>> fusion_;
    std::vector<Conv<T>> concat_fusion_;
    std::vector<ConvBlock<T>> dec_blocks_;  // index l-1 for level l
    Conv<T> dec_out_;
};

}  // namespace msti
