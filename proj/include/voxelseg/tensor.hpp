#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "voxelseg/common.hpp"

namespace voxelseg {

/// Dense N-D array in row-major order (last axis fastest) with an optional
/// gradient slot of identical length. The shape is fixed at construction;
/// reshaped() returns a new tensor over a copy of the data.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size())
            throw ConfigError("tensor data length does not match shape product");
    }

    static Tensor full(std::vector<std::size_t> shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }
    T* raw() { return data_.data(); }
    const T* raw() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    Tensor reshaped(std::vector<std::size_t> new_shape) const {
        if (checked_numel(new_shape) != data_.size())
            throw ConfigError("reshape must preserve the element count");
        return Tensor(std::move(new_shape), data_);
    }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) {
        requires_grad_ = on;
        if (on && grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
        if (!on) grad_.clear();
    }
    bool has_grad() const { return grad_.size() == data_.size() && !data_.empty(); }
    std::vector<T>& grad() { return grad_; }
    const std::vector<T>& grad() const { return grad_; }
    void zero_grad() { grad_.assign(data_.size(), T(0)); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << shape_[i] << (i + 1 < shape_.size() ? "x" : "");
        os << ']';
        return os.str();
    }

  private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto e : shape) {
            if (e == 0) throw ConfigError("tensor axes must be positive");
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
    bool requires_grad_ = false;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
    Tensor<To> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = static_cast<To>(a[i]);
    return out;
}

}  // namespace voxelseg
