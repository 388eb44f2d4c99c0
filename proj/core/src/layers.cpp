#include "msti/layers.hpp"

#include <cmath>

namespace msti {

template <typename T>
Var<T> ParameterSet<T>::add(const std::string& name, Tensor<T> init) {
    if (find(name).defined()) throw Error("duplicate parameter name: " + name);
    auto v = Var<T>::leaf(std::move(init), true);
    params_.emplace_back(name, v);
    return v;
}

template <typename T>
Var<T> ParameterSet<T>::add_he(const std::string& name, Shape shape, int fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng_));
    return add(name, std::move(t));
}

template <typename T>
Var<T> ParameterSet<T>::add_constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>(shape, value));
}

template <typename T>
ops::BatchNormStats<T>* ParameterSet<T>::add_batch_norm_stats(const std::string& name, int channels) {
    auto stats = std::make_unique<ops::BatchNormStats<T>>();
    stats->running_mean = Tensor<T>(Shape{1, channels, 1, 1}, T(0));
    stats->running_var = Tensor<T>(Shape{1, channels, 1, 1}, T(1));
    auto* raw = stats.get();
    if (!bn_stats_.emplace(name, std::move(stats)).second) throw Error("duplicate buffer name: " + name);
    return raw;
}

template <typename T>
Var<T> ParameterSet<T>::find(const std::string& name) const {
    for (const auto& [n, v] : params_)
        if (n == name) return v;
    return {};
}

template <typename T>
std::size_t ParameterSet<T>::count() const {
    std::size_t total = 0;
    for (const auto& [n, v] : params_) total += v.value().size();
    return total;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
    for (auto& [n, v] : params_) v.zero_grad();
}

template <typename T>
Conv<T> make_conv(ParameterSet<T>& params, const std::string& name, int in_channels, int out_channels,
                  int kernel, int stride, bool bias) {
    Conv<T> conv;
    conv.stride = stride;
    conv.weight = params.add_he(name + ".weight", Shape{out_channels, in_channels, kernel, kernel},
                                in_channels * kernel * kernel);
    if (bias) conv.bias = params.add_constant(name + ".bias", Shape{1, out_channels, 1, 1}, T(0));
    return conv;
}

template <typename T>
Var<T> ConvBnRelu<T>::forward(const Var<T>& x, const NormMode<T>& mode) const {
    return ops::relu(ops::batch_norm(conv(x), gamma, beta, *stats, mode.training, mode.momentum, mode.eps));
}

template <typename T>
ConvBlock<T> make_conv_block(ParameterSet<T>& params, const std::string& name, int in_channels,
                             int out_channels) {
    auto unit = [&](const std::string& n, int cin) {
        ConvBnRelu<T> u;
        u.conv = make_conv(params, n + ".conv", cin, out_channels, 3, 1, false);
        u.gamma = params.add_constant(n + ".bn.gamma", Shape{1, out_channels, 1, 1}, T(1));
        u.beta = params.add_constant(n + ".bn.beta", Shape{1, out_channels, 1, 1}, T(0));
        u.stats = params.add_batch_norm_stats(n + ".bn", out_channels);
        return u;
    };
    ConvBlock<T> block;
    block.first = unit(name + ".0", in_channels);
    block.second = unit(name + ".1", out_channels);
    return block;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template struct ConvBnRelu<float>;
template struct ConvBnRelu<double>;
template Conv<float> make_conv(ParameterSet<float>&, const std::string&, int, int, int, int, bool);
template Conv<double> make_conv(ParameterSet<double>&, const std::string&, int, int, int, int, bool);
template ConvBlock<float> make_conv_block(ParameterSet<float>&, const std::string&, int, int);
template ConvBlock<double> make_conv_block(ParameterSet<double>&, const std::string&, int, int);

}  // namespace msti
