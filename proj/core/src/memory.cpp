#include "msti/memory.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace msti::memory {

namespace {

template <typename T>
std::vector<T> nearest_distances(const Tensor<T>& queries, const Tensor<T>& items) {
    const int n_items = items.shape().h;
    const int dim = items.shape().w;
    if (n_items == 0) throw Error("memory distance: empty memory bank");
    if (queries.shape().w != dim) {
        throw Error("memory distance: query width " + std::to_string(queries.shape().w) +
                    " does not match item width " + std::to_string(dim));
    }
    const int k_rows = queries.shape().h;
    std::vector<T> out(k_rows);
    for (int k = 0; k < k_rows; ++k) {
        T best = std::numeric_limits<T>::infinity();
        for (int i = 0; i < n_items; ++i) {
            T sq = 0;
            for (int c = 0; c < dim; ++c) {
                const T d = queries[static_cast<std::size_t>(k) * dim + c] - items[static_cast<std::size_t>(i) * dim + c];
                sq += d * d;
            }
            best = std::min(best, sq);
        }
        out[k] = std::sqrt(best);
    }
    return out;
}

}  // namespace

template <typename T>
MemoryBank<T>::MemoryBank(int items, int dim, std::uint64_t seed) : items_(Shape{1, 1, items, dim}) {
    if (items <= 0 || dim <= 0) throw Error("memory bank needs positive item count and dimension");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (int i = 0; i < items; ++i) {
        double sq = 0;
        std::vector<double> v(dim);
        do {
            sq = 0;
            for (auto& x : v) {
                x = dist(rng);
                sq += x * x;
            }
        } while (sq == 0.0);
        const double inv = 1.0 / std::sqrt(sq);
        for (int c = 0; c < dim; ++c) items_[static_cast<std::size_t>(i) * dim + c] = static_cast<T>(v[c] * inv);
    }
}

template <typename T>
MemoryBank<T>::MemoryBank(Tensor<T> items) : items_(std::move(items)) {
    const Shape s = items_.shape();
    if (s.n != 1 || s.c != 1 || s.h <= 0 || s.w <= 0) throw Error("memory bank items must be [1,1,N,C], got " + s.str());
}

template <typename T>
Tensor<T> MemoryBank<T>::update_weights(const Tensor<T>& queries) const {
    return ops::cosine_address(Var<T>::constant(items_), Var<T>::constant(queries)).value();
}

template <typename T>
void MemoryBank<T>::update(const Tensor<T>& queries) {
    if (queries.shape().w != dim()) {
        throw Error("memory update: query width " + std::to_string(queries.shape().w) + " does not match " +
                    std::to_string(dim()));
    }
    if (queries.shape().h == 0) return;
    const Tensor<T> v = update_weights(queries);
    const int n_items = size();
    const int k_rows = queries.shape().h;
    const int d = dim();
    std::vector<double> next(d);
    for (int i = 0; i < n_items; ++i) {
        T* p = items_.data() + static_cast<std::size_t>(i) * d;
        for (int c = 0; c < d; ++c) next[c] = p[c];
        for (int k = 0; k < k_rows; ++k) {
            const T wk = v[static_cast<std::size_t>(i) * k_rows + k];
            const T* q = queries.data() + static_cast<std::size_t>(k) * d;
            for (int c = 0; c < d; ++c) next[c] += wk * q[c];
        }
        double sq = 0;
        for (double x : next) sq += x * x;
        if (!(sq > 0.0) || !std::isfinite(sq)) continue;
        const double inv = 1.0 / std::sqrt(sq);
        for (int c = 0; c < d; ++c) p[c] = static_cast<T>(next[c] * inv);
    }
}

template <typename T>
ReadResult<T> read(const Var<T>& y, const Var<T>& items) {
    if (y.shape().c != items.shape().w) {
        throw Error("memory read: feature channels " + std::to_string(y.shape().c) + " do not match item width " +
                    std::to_string(items.shape().w));
    }
    ReadResult<T> r;
    r.queries = ops::to_queries(y);
    r.weights = ops::cosine_address(r.queries, items);
    r.read_queries = ops::matmul(r.weights, items);
    r.read = ops::from_queries(r.read_queries, y.shape());
    return r;
}

template <typename T>
T memory_distance(const Tensor<T>& queries, const Tensor<T>& items) {
    const auto d = nearest_distances(queries, items);
    if (d.empty()) return T(0);
    T sum = 0;
    for (T v : d) sum += v;
    return sum / static_cast<T>(d.size());
}

template <typename T>
T memory_distance_max(const Tensor<T>& queries, const Tensor<T>& items) {
    const auto d = nearest_distances(queries, items);
    T best = 0;
    for (T v : d) best = std::max(best, v);
    return best;
}

template class MemoryBank<float>;
template class MemoryBank<double>;
template ReadResult<float> read(const Var<float>&, const Var<float>&);
template ReadResult<double> read(const Var<double>&, const Var<double>&);
template float memory_distance(const Tensor<float>&, const Tensor<float>&);
template double memory_distance(const Tensor<double>&, const Tensor<double>&);
template float memory_distance_max(const Tensor<float>&, const Tensor<float>&);
template double memory_distance_max(const Tensor<double>&, const Tensor<double>&);

}  // namespace msti::memory
