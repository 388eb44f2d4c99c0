#pragma once

#include <string>

#include "msti/layers.hpp"

// Attention-based spatial-temporal fusion: channel attention over motion features,
// then an attention weight computed from concatenated appearance and motion features
// that gates the appearance features.
namespace msti::astfm {

/// What the pooled gate multiplies in channel attention.
enum class GateTarget {
    transformed,  ///< x + g(x) * sigmoid(g(gap(x)))
    input,        ///< x + x * sigmoid(g(gap(x))), the classical squeeze-excitation form
};

/// g(x) = j2 * relu(j1 * x) with 1x1 convolutions and no bias; shared by both branches.
template <typename T>
struct ChannelAttentionParams {
    Var<T> j1;  // [C/r, C, 1, 1]
    Var<T> j2;  // [C, C/r, 1, 1]
    int channels = 0;
    int reduction = 8;
};

/// Two 1x1 layers (2C -> C, ReLU, C -> C) and a sigmoid.
template <typename T>
struct FusionParams {
    Var<T> w1, b1, w2, b2;
    int channels = 0;
};

template <typename T>
struct FusionResult {
    Var<T> fused;      ///< x_a * A, shape of x_a
    Var<T> attention;  ///< A in (0,1), shape of x_a
};

/// Throws when `reduction` does not divide `channels`.
template <typename T>
ChannelAttentionParams<T> make_channel_attention(ParameterSet<T>& params, const std::string& name, int channels,
                                                 int reduction);
template <typename T>
FusionParams<T> make_fusion(ParameterSet<T>& params, const std::string& name, int channels);

template <typename T>
Var<T> channel_attention(const Var<T>& motion, const ChannelAttentionParams<T>& params,
                         GateTarget target = GateTarget::transformed);

/// `level` only labels error messages.
template <typename T>
FusionResult<T> fuse(const Var<T>& appearance, const Var<T>& motion_attended, const FusionParams<T>& params,
                     int level = 0);

}  // namespace msti::astfm
