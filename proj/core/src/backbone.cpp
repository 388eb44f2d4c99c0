#include "msti/backbone.hpp"

namespace msti {

void NetworkConfig::validate() const {
    if (levels != 3) throw Error("network config: levels must be 3, got " + std::to_string(levels));
    if (static_cast<int>(channels.size()) != levels) {
        throw Error("network config: expected " + std::to_string(levels) + " channel widths, got " +
                    std::to_string(channels.size()));
    }
    for (int c : channels)
        if (c <= 0) throw Error("network config: channel widths must be positive");
    if (bottleneck_channels <= 0) throw Error("network config: bottleneck channels must be positive");
    if (input_frames <= 0) throw Error("network config: input_frames must be positive");
    if (resolution <= 0 || resolution % 8 != 0) {
        throw Error("network config: resolution must be a positive multiple of 8, got " + std::to_string(resolution));
    }
    for (int c : channels) {
        if (reduction <= 0 || c % reduction != 0) {
            throw Error("network config: reduction " + std::to_string(reduction) + " does not divide channel width " +
                        std::to_string(c));
        }
    }
    if (memory_items <= 0) throw Error("network config: memory_items must be positive");
}

ModelVariant ModelVariant::from_letter(char letter) {
    switch (letter) {
        case 'A': case 'a': return {false, false, false, true};
        case 'B': case 'b': return {true, false, false, true};
        case 'C': case 'c': return {true, true, false, true};
        case 'D': case 'd': return {true, true, true, false};
        case 'E': case 'e': return {true, true, true, true};
        default: throw Error(std::string("unknown model variant '") + letter + "', expected one of A-E");
    }
}

char ModelVariant::letter() const {
    for (char l : variant_letters())
        if (from_letter(l) == *this) return l;
    return '?';
}

void ModelVariant::validate() const {
    if (use_interaction && !use_motion_stream) throw Error("model variant: interaction requires the motion stream");
    if (use_astfm && !use_interaction) throw Error("model variant: ASTFM requires interaction");
}

std::vector<char> variant_letters() { return {'A', 'B', 'C', 'D', 'E'}; }

template <typename T>
MstiNet<T>::MstiNet(NetworkConfig config, ModelVariant variant, std::uint64_t seed)
    : config_(std::move(config)), variant_(variant), params_(seed) {
    config_.validate();
    variant_.validate();
    const auto& c = config_.channels;
    const int levels = config_.levels;
    const int frames_in = 3 * config_.input_frames;
    const int flow_in = 2 * config_.input_frames;

    app_stem_ = make_conv_block(params_, "app.stem", frames_in, c[0]);
    if (variant_.use_motion_stream) {
        for (int l = 0; l < levels; ++l) {
            const std::string name = "motion.l" + std::to_string(l + 1);
            motion_blocks_.push_back(make_conv_block(params_, name + ".block", l == 0 ? flow_in : c[l - 1], c[l]));
            if (l + 1 < levels) motion_down_.push_back(make_conv(params_, name + ".down", c[l], c[l], 3, 2, true));
        }
        if (!variant_.use_interaction) {
            motion_tail_block_ = make_conv_block(params_, "motion.tail.block", c[levels - 1], c[levels - 1]);
            motion_tail_down_ =
                make_conv(params_, "motion.tail.down", c[levels - 1], config_.bottleneck_channels, 3, 2, true);
        }
    }
    for (int l = 0; l < levels; ++l) {
        const std::string lv = ".l" + std::to_string(l + 1);
        if (variant_.use_interaction && variant_.use_astfm) {
            attention_.push_back(astfm::make_channel_attention(params_, "astfm" + lv + ".ca", c[l], config_.reduction));
            fusion_.push_back(astfm::make_fusion(params_, "astfm" + lv + ".fuse", c[l]));
        } else if (variant_.use_interaction) {
            concat_fusion_.push_back(make_conv(params_, "concat" + lv, 2 * c[l], c[l], 1, 1, true));
        }
        const int next = l + 1 < levels ? c[l + 1] : config_.bottleneck_channels;
        app_blocks_.push_back(make_conv_block(params_, "app" + lv + ".block", c[l], c[l]));
        app_down_.push_back(make_conv(params_, "app" + lv + ".down", c[l], next, 3, 2, true));
    }
    dec_blocks_.resize(levels);
    int prev = decoder_input_channels();
    for (int l = levels - 1; l >= 0; --l) {
        const int in = prev + (config_.skip_connections ? c[l] : 0);
        dec_blocks_[l] = make_conv_block(params_, "dec.l" + std::to_string(l + 1) + ".block", in, c[l]);
        prev = c[l];
    }
    dec_out_ = make_conv(params_, "dec.out", c[0], 3, 3, 1, true);
}

template <typename T>
int MstiNet<T>::decoder_input_channels() const {
    return variant_.use_memory ? 2 * config_.bottleneck_channels : config_.bottleneck_channels;
}

template <typename T>
NormMode<T> MstiNet<T>::mode(bool training) const {
    return NormMode<T>{training, static_cast<T>(config_.bn_momentum), static_cast<T>(config_.bn_eps)};
}

template <typename T>
EncoderOutput<T> MstiNet<T>::encode(const Var<T>& frames, const Var<T>& flow, bool training) {
    const Shape fs = frames.shape();
    if (fs.c != 3 * config_.input_frames) {
        throw Error("encode: expected " + std::to_string(3 * config_.input_frames) + " frame channels, got " +
                    fs.str());
    }
    if (fs.h % 8 != 0 || fs.w % 8 != 0) throw Error("encode: spatial size must be divisible by 8, got " + fs.str());
    if (variant_.use_motion_stream) {
        const Shape ms = flow.shape();
        if (ms.c != 2 * config_.input_frames || ms.n != fs.n || ms.h != fs.h || ms.w != fs.w) {
            throw Error("encode: flow " + ms.str() + " is not aligned with frames " + fs.str());
        }
    }
    const NormMode<T> nm = mode(training);
    EncoderOutput<T> out;
    Var<T> a = app_stem_.forward(frames, nm);
    Var<T> m;
    for (int l = 0; l < config_.levels; ++l) {
        if (variant_.use_motion_stream) {
            const Var<T> m_in = l == 0 ? flow : motion_down_[l - 1](m);
            m = motion_blocks_[l].forward(m_in, nm);
        }
        Var<T> fused = a;
        if (variant_.use_interaction && variant_.use_astfm) {
            const Var<T> attended = astfm::channel_attention(m, attention_[l], config_.gate_target);
            auto r = astfm::fuse(a, attended, fusion_[l], l + 1);
            fused = r.fused;
            out.attention.push_back(r.attention);
        } else if (variant_.use_interaction) {
            if (!(a.shape() == m.shape())) {
                throw Error("concatenation fusion at level " + std::to_string(l + 1) + ": appearance " +
                            a.shape().str() + " and motion " + m.shape().str() + " are not aligned");
            }
            fused = concat_fusion_[l](ops::concat_channels(a, m));
        }
        out.skips.push_back(fused);
        a = app_down_[l](app_blocks_[l].forward(fused, nm));
    }
    out.appearance_bottleneck = a;
    out.bottleneck = a;
    if (variant_.use_motion_stream && !variant_.use_interaction) {
        out.motion_bottleneck = (*motion_tail_down_)(motion_tail_block_->forward(m, nm));
        out.bottleneck = ops::add(a, out.motion_bottleneck);
    }
    return out;
}

template <typename T>
Var<T> MstiNet<T>::decode(const Var<T>& input, const std::vector<Var<T>>& skips, bool training) {
    if (input.shape().c != decoder_input_channels()) {
        throw Error("decode: expected " + std::to_string(decoder_input_channels()) + " input channels, got " +
                    input.shape().str());
    }
    if (config_.skip_connections && static_cast<int>(skips.size()) != config_.levels) {
        throw Error("decode: expected " + std::to_string(config_.levels) + " skip features, got " +
                    std::to_string(skips.size()));
    }
    const NormMode<T> nm = mode(training);
    Var<T> x = input;
    for (int l = config_.levels - 1; l >= 0; --l) {
        x = ops::upsample_nearest2x(x);
        if (config_.skip_connections) x = ops::concat_channels(x, skips[l]);
        x = dec_blocks_[l].forward(x, nm);
    }
    return ops::tanh(dec_out_(x));
}

template <typename T>
ForwardOutput<T> MstiNet<T>::forward(const Var<T>& frames, const Var<T>& flow, const Var<T>& items, bool training) {
    ForwardOutput<T> out;
    out.encoder = encode(frames, flow, training);
    const Var<T>& y = out.encoder.bottleneck;
    if (variant_.use_memory) {
        if (!items.defined()) throw Error("forward: variant uses memory but no memory items were given");
        auto r = memory::read(y, items);
        out.queries = r.queries;
        out.weights = r.weights;
        out.read_queries = r.read_queries;
        out.decoder_input = ops::concat_channels(y, r.read);
    } else {
        out.queries = ops::to_queries(y);
        out.decoder_input = y;
    }
    out.prediction = decode(out.decoder_input, out.encoder.skips, training);
    return out;
}

template class MstiNet<float>;
template class MstiNet<double>;

}  // namespace msti
