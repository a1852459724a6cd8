#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bdforge/common.hpp"

namespace bdforge {

/// Dense row-major tensor of 64-bit reals. Value semantics; shape extents
/// are positive and product(shape) == data.size() always holds.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::size_t size() const { return data_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Multi-index accessors for the common ranks.
    double& at(int i) { return data_[static_cast<std::size_t>(i)]; }
    double at(int i) const { return data_[static_cast<std::size_t>(i)]; }
    double& at(int i, int j) { return data_[flat(i, j)]; }
    double at(int i, int j) const { return data_[flat(i, j)]; }
    double& at(int i, int j, int k) { return data_[flat(i, j, k)]; }
    double at(int i, int j, int k) const { return data_[flat(i, j, k)]; }
    double& at(int i, int j, int k, int l) { return data_[flat(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return data_[flat(i, j, k, l)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool is_scalar() const { return size() == 1; }
    double scalar_value() const;

    bool all_finite() const;

    // Elementwise clip, in place.
    void clip(double lo, double hi);

    std::string shape_str() const;
    static std::string shape_str(const std::vector<int>& shape);

private:
    std::size_t flat(int i, int j) const {
        return static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
               static_cast<std::size_t>(j);
    }
    std::size_t flat(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
                static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(shape_[2]) +
               static_cast<std::size_t>(k);
    }
    std::size_t flat(int i, int j, int k, int l) const {
        return ((static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
                 static_cast<std::size_t>(j)) *
                    static_cast<std::size_t>(shape_[2]) +
                static_cast<std::size_t>(k)) *
                   static_cast<std::size_t>(shape_[3]) +
               static_cast<std::size_t>(l);
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<int>& shape);

}  // namespace bdforge
