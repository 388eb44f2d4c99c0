#pragma once

#include <cstdint>

#include "msti/ops.hpp"

// Normality memory: N unit-norm prototype items addressed by cosine-softmax.
namespace msti::memory {

template <typename T>
class MemoryBank {
public:
    MemoryBank() = default;
    /// Items drawn from a standard normal and projected to the unit sphere.
    MemoryBank(int items, int dim, std::uint64_t seed);
    /// Adopts the given [1,1,N,C] items verbatim.
    explicit MemoryBank(Tensor<T> items);

    int size() const { return items_.shape().h; }
    int dim() const { return items_.shape().w; }
    const Tensor<T>& items() const { return items_; }

    /// Per-item softmax over queries of cos(p_i, q_k): [N, K].
    Tensor<T> update_weights(const Tensor<T>& queries) const;
    /// p_i <- normalize(p_i + sum_k v_ik q_k); an item whose sum has zero norm is left unchanged.
    void update(const Tensor<T>& queries);

    /// Constant graph node over the current items.
    Var<T> as_constant() const { return Var<T>::constant(items_); }

private:
    Tensor<T> items_;
};

template <typename T>
struct ReadResult {
    Var<T> queries;       ///< [1,1,K,C], K = N*H*W of the feature map
    Var<T> weights;       ///< [1,1,K,N], rows are probability vectors
    Var<T> read_queries;  ///< w * M, [1,1,K,C]
    Var<T> read;          ///< read_queries in the feature layout
};

/// Reads the memory with every spatial position of `y` as one query.
template <typename T>
ReadResult<T> read(const Var<T>& y, const Var<T>& items);

/// Mean per-query entropy of the read weights.
template <typename T>
Var<T> separateness_loss(const Var<T>& weights) {
    return ops::row_entropy(weights);
}

/// Mean over queries of max(|cos(y_hat_k, y_k)| - delta, 0) on [K,C] query matrices.
template <typename T>
Var<T> compactness_loss(const Var<T>& queries, const Var<T>& read_queries, T delta, bool inverted = false) {
    return ops::cosine_hinge(read_queries, queries, delta, inverted);
}

/// Mean over queries of the L2 distance to the nearest item. Throws on an empty bank.
template <typename T>
T memory_distance(const Tensor<T>& queries, const Tensor<T>& items);
/// Max-over-queries variant of memory_distance.
template <typename T>
T memory_distance_max(const Tensor<T>& queries, const Tensor<T>& items);

}  // namespace msti::memory
