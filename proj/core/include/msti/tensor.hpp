#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msti {

/// Error raised for invalid shapes, configurations and malformed inputs.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NCHW extent. Matrices use n = c = 1 with rows in h and columns in w.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

/// Dense row-major NCHW tensor with value semantics.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel()) {
            throw Error("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                        shape_.str());
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    T at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    /// Contiguous H*W plane of sample n, channel c.
    std::span<T> plane(int n, int c) { return {data_.data() + index(n, c, 0, 0), shape_.plane()}; }
    std::span<const T> plane(int n, int c) const {
        return {data_.data() + index(n, c, 0, 0), shape_.plane()};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same storage reinterpreted with a new extent of equal volume.
    Tensor reshaped(Shape shape) const {
        if (shape.numel() != shape_.numel()) {
            throw Error("cannot reshape " + shape_.str() + " to " + shape.str());
        }
        return Tensor(shape, data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

private:
    Shape shape_{0, 0, 0, 0};
    std::vector<T> data_;
};

inline std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
}

}  // namespace msti
