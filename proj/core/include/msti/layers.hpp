#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "msti/ops.hpp"

namespace msti {

/// Named trainable tensors and non-trainable buffers in registration order.
template <typename T>
class ParameterSet {
public:
    explicit ParameterSet(std::uint64_t seed = 0) : rng_(seed) {}
    ParameterSet(ParameterSet&&) noexcept = default;
    ParameterSet& operator=(ParameterSet&&) noexcept = default;
    ParameterSet(const ParameterSet&) = delete;
    ParameterSet& operator=(const ParameterSet&) = delete;

    Var<T> add(const std::string& name, Tensor<T> init);
    /// He-normal initialization with the given fan-in.
    Var<T> add_he(const std::string& name, Shape shape, int fan_in);
    Var<T> add_constant(const std::string& name, Shape shape, T value);
    ops::BatchNormStats<T>* add_batch_norm_stats(const std::string& name, int channels);

    const std::vector<std::pair<std::string, Var<T>>>& parameters() const { return params_; }
    const std::map<std::string, std::unique_ptr<ops::BatchNormStats<T>>>& batch_norm_stats() const {
        return bn_stats_;
    }
    Var<T> find(const std::string& name) const;
    std::size_t count() const;
    void zero_grad();

private:
    std::mt19937_64 rng_;
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::map<std::string, std::unique_ptr<ops::BatchNormStats<T>>> bn_stats_;
};

template <typename T>
struct Conv {
    Var<T> weight;
    Var<T> bias;
    int stride = 1;

    Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride); }
};

template <typename T>
Conv<T> make_conv(ParameterSet<T>& params, const std::string& name, int in_channels, int out_channels,
                  int kernel, int stride, bool bias);

/// Batch-normalization hyper-parameters and mode for one forward pass.
template <typename T>
struct NormMode {
    bool training = false;
    T momentum = T(0.1);
    T eps = T(1e-5);
};

/// 3x3 conv (no bias) -> batch norm -> ReLU.
template <typename T>
struct ConvBnRelu {
    Conv<T> conv;
    Var<T> gamma;
    Var<T> beta;
    ops::BatchNormStats<T>* stats = nullptr;

    Var<T> forward(const Var<T>& x, const NormMode<T>& mode) const;
};

/// Two ConvBnRelu units.
template <typename T>
struct ConvBlock {
    ConvBnRelu<T> first;
    ConvBnRelu<T> second;

    Var<T> forward(const Var<T>& x, const NormMode<T>& mode) const {
        return second.forward(first.forward(x, mode), mode);
    }
};

template <typename T>
ConvBlock<T> make_conv_block(ParameterSet<T>& params, const std::string& name, int in_channels,
                             int out_channels);

}  // namespace msti
