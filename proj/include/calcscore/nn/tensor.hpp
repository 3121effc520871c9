#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "calcscore/common.hpp"

namespace calcscore::nn {

/// Dense row-major array. Activations are laid out [N, C, H, W] or [N, F].
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::vector<int> shape, T fill = T{0}) : shape_(std::move(shape)) {
        for (int e : shape_) require(e >= 0, ErrorKind::invalid_argument, "negative tensor extent");
        data_.assign(count(shape_), fill);
    }
    Tensor(std::vector<int> shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
        require(data_.size() == count(shape_), ErrorKind::size_mismatch, "tensor values do not match shape");
    }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int e : shape) n *= static_cast<std::size_t>(e);
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Element (n, c, h, w) of a rank-4 tensor.
    T& at(int n, int c, int h, int w) { return data_[offset4(n, c, h, w)]; }
    const T& at(int n, int c, int h, int w) const { return data_[offset4(n, c, h, w)]; }
    T& at(int n, int f) { return data_[static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(f)]; }
    const T& at(int n, int f) const { return data_[static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(f)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void reshape(std::vector<int> shape) {
        require(count(shape) == data_.size(), ErrorKind::size_mismatch, "reshape changes element count");
        shape_ = std::move(shape);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + "]";
    }

private:
    std::size_t offset4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(c)) *
                    static_cast<std::size_t>(shape_[2]) +
                static_cast<std::size_t>(h)) *
                   static_cast<std::size_t>(shape_[3]) +
               static_cast<std::size_t>(w);
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

/// Channel concatenation of rank-2 or rank-4 tensors with equal batch and
/// spatial extents.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> parts) {
    require(!parts.empty(), ErrorKind::invalid_argument, "concat of nothing");
    const auto& first = *parts[0];
    std::vector<int> shape = first.shape();
    int channels = 0;
    for (const auto* p : parts) {
        require(p->rank() == first.rank() && p->dim(0) == first.dim(0), ErrorKind::invalid_argument,
                "concat shape mismatch");
        for (int i = 2; i < first.rank(); ++i)
            require(p->dim(i) == first.dim(i), ErrorKind::invalid_argument, "concat spatial mismatch");
        channels += p->dim(1);
    }
    shape[1] = channels;
    Tensor<T> out(shape);
    const std::size_t inner = first.rank() == 4 ? static_cast<std::size_t>(first.dim(2)) * static_cast<std::size_t>(first.dim(3)) : 1;
    T* dst = out.data();
    for (int n = 0; n < first.dim(0); ++n)
        for (const auto* p : parts) {
            std::size_t block = static_cast<std::size_t>(p->dim(1)) * inner;
            const T* src = p->data() + static_cast<std::size_t>(n) * block;
            dst = std::copy(src, src + block, dst);
        }
    return out;
}

/// Inverse of concat_channels for gradients.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& t, std::span<const int> channels) {
    std::vector<Tensor<T>> out;
    const std::size_t inner = t.rank() == 4 ? static_cast<std::size_t>(t.dim(2)) * static_cast<std::size_t>(t.dim(3)) : 1;
    for (int c : channels) {
        std::vector<int> shape = t.shape();
        shape[1] = c;
        out.emplace_back(shape);
    }
    const T* src = t.data();
    for (int n = 0; n < t.dim(0); ++n)
        for (std::size_t k = 0; k < channels.size(); ++k) {
            std::size_t block = static_cast<std::size_t>(channels[k]) * inner;
            std::copy(src, src + block, out[k].data() + static_cast<std::size_t>(n) * block);
            src += block;
        }
    return out;
}

}  // namespace calcscore::nn
