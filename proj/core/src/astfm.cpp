#include "msti/astfm.hpp"

namespace msti::astfm {

template <typename T>
ChannelAttentionParams<T> make_channel_attention(ParameterSet<T>& params, const std::string& name, int channels,
                                                 int reduction) {
    if (reduction <= 0 || channels % reduction != 0) {
        throw Error("channel attention " + name + ": reduction " + std::to_string(reduction) +
                    " does not divide " + std::to_string(channels) + " channels");
    }
    const int hidden = channels / reduction;
    ChannelAttentionParams<T> ca;
    ca.channels = channels;
    ca.reduction = reduction;
    ca.j1 = params.add_he(name + ".j1", Shape{hidden, channels, 1, 1}, channels);
    ca.j2 = params.add_he(name + ".j2", Shape{channels, hidden, 1, 1}, hidden);
    return ca;
}

template <typename T>
FusionParams<T> make_fusion(ParameterSet<T>& params, const std::string& name, int channels) {
    FusionParams<T> f;
    f.channels = channels;
    f.w1 = params.add_he(name + ".w1", Shape{channels, 2 * channels, 1, 1}, 2 * channels);
    f.b1 = params.add_constant(name + ".b1", Shape{1, channels, 1, 1}, T(0));
    f.w2 = params.add_he(name + ".w2", Shape{channels, channels, 1, 1}, channels);
    f.b2 = params.add_constant(name + ".b2", Shape{1, channels, 1, 1}, T(0));
    return f;
}

template <typename T>
Var<T> channel_attention(const Var<T>& motion, const ChannelAttentionParams<T>& params, GateTarget target) {
    if (motion.shape().c != params.channels) {
        throw Error("channel attention expects " + std::to_string(params.channels) + " channels, got " +
                    motion.shape().str());
    }
    auto g = [&](const Var<T>& x) {
        return ops::conv2d(ops::relu(ops::conv2d(x, params.j1, Var<T>{}, 1)), params.j2, Var<T>{}, 1);
    };
    const Var<T> gate = ops::sigmoid(g(ops::global_avg_pool(motion)));
    const Var<T> gated = target == GateTarget::transformed ? ops::mul_channel(g(motion), gate)
                                                           : ops::mul_channel(motion, gate);
    return ops::add(motion, gated);
}

template <typename T>
FusionResult<T> fuse(const Var<T>& appearance, const Var<T>& motion_attended, const FusionParams<T>& params,
                     int level) {
    const Shape a = appearance.shape();
    const Shape m = motion_attended.shape();
    if (a.n != m.n || a.h != m.h || a.w != m.w || a.c != m.c) {
        throw Error("fusion at level " + std::to_string(level) + ": appearance " + a.str() +
                    " and motion " + m.str() + " are not aligned");
    }
    if (a.c != params.channels) {
        throw Error("fusion at level " + std::to_string(level) + ": expects " +
                    std::to_string(params.channels) + " channels, got " + a.str());
    }
    const Var<T> cat = ops::concat_channels(appearance, motion_attended);
    const Var<T> hidden = ops::relu(ops::conv2d(cat, params.w1, params.b1, 1));
    FusionResult<T> r;
    r.attention = ops::sigmoid(ops::conv2d(hidden, params.w2, params.b2, 1));
    r.fused = ops::mul(appearance, r.attention);
    return r;
}

#define MSTI_INSTANTIATE_ASTFM(T)                                                                          \
    template ChannelAttentionParams<T> make_channel_attention(ParameterSet<T>&, const std::string&, int, int); \
    template FusionParams<T> make_fusion(ParameterSet<T>&, const std::string&, int);                       \
    template Var<T> channel_attention(const Var<T>&, const ChannelAttentionParams<T>&, GateTarget);        \
    template FusionResult<T> fuse(const Var<T>&, const Var<T>&, const FusionParams<T>&, int);

MSTI_INSTANTIATE_ASTFM(float)
MSTI_INSTANTIATE_ASTFM(double)

}  // namespace msti::astfm
