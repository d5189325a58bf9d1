#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "fsdet/errors.hpp"
#include "fsdet/rng.hpp"

namespace fsdet {

// Dense row-major double tensor. The 4-D case (batch, channels, height,
// width) is the workhorse; boxes and vectors reuse the same container with
// 1-D/2-D shapes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape);
    Tensor(std::vector<std::int64_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::int64_t> shape, double value);
    static Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double stddev = 1.0);
    static Tensor uniform(std::vector<std::int64_t> shape, Rng& rng, double lo, double hi);

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return numel_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 4-D accessors (b, c, y, x).
    double& at4(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
    }
    double at4(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>(((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
    }
    // 3-D accessors (c, y, x) for image tensors.
    double& at3(std::int64_t c, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }
    double at3(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }
    double& at2(std::int64_t i, std::int64_t j) {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }
    double at2(std::int64_t i, std::int64_t j) const {
        return data_[static_cast<std::size_t>(i * shape_[1] + j)];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    void fill(double v);
    bool all_finite() const;
    void require_finite(const std::string& context) const;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double s);

private:
    std::vector<std::int64_t> shape_;
    std::int64_t numel_ = 0;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fsdet
