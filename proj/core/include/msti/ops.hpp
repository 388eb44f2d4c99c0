#pragma once

#include <vector>

#include "msti/autograd.hpp"

// Differentiable tensor operations. Every op returns a new graph node; backward
// accumulates into whichever inputs require gradients.
namespace msti::ops {

/// 2-D convolution with square kernel k in {1, 3}, padding k/2. `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride);

template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

/// Per-channel batch normalization. Training mode normalizes with batch moments and
/// updates `stats`; inference uses the running moments.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                  bool training, T momentum, T eps);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
/// x[N,C,H,W] * gate[N,C,1,1] broadcast over spatial positions.
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& gate);
template <typename T>
Var<T> scale(const Var<T>& x, T s);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
/// Mean over H,W: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);
template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x);

/// [N,C,H,W] -> query matrix [1,1,N*H*W,C]; row k = position (n, h, w) in raster order.
template <typename T>
Var<T> to_queries(const Var<T>& y);
/// Inverse of to_queries for a target feature shape.
template <typename T>
Var<T> from_queries(const Var<T>& q, Shape feature_shape);

/// Row-wise softmax over cosine similarities between queries [K,C] and items [N,C] -> [K,N].
template <typename T>
Var<T> cosine_address(const Var<T>& queries, const Var<T>& items);
/// Matrix product of [1,1,R,K] and [1,1,K,C].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Mean squared error over all elements (or the raw sum when `mean` is false).
template <typename T>
Var<T> squared_error(const Var<T>& pred, const Var<T>& target, bool mean = true);
/// Mean over rows of the Shannon entropy (natural log) of each row of w; 0 log 0 = 0.
template <typename T>
Var<T> row_entropy(const Var<T>& w);
/// Mean over rows k of max(|cos(a_k, b_k)| - delta, 0). With `inverted`, the hinge
/// penalizes dissimilarity instead: max(1 - |cos| - delta, 0).
template <typename T>
Var<T> cosine_hinge(const Var<T>& a, const Var<T>& b, T delta, bool inverted = false);
/// sum_i weights[i] * terms[i] over scalar nodes.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights);

/// Guard applied to cosine denominators.
inline constexpr double kCosineEps = 1e-12;

}  // namespace msti::ops
