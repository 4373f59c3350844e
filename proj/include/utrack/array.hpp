#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace utrack {

// Dense row-major tensor of 64-bit floats. Shapes are lists of positive
// extents; the element count always equals the product of the extents.
class Array {
public:
    Array() = default;
    explicit Array(std::vector<std::size_t> shape);  // zero-filled
    Array(std::vector<std::size_t> shape, std::vector<double> data);
    Array(std::vector<std::size_t> shape, double fill);

    static Array scalar(double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_[axis]; }
    std::size_t size() const { return data_.size(); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // 2-D and 3-D accessors (row-major).
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const Array& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    bool bit_equal(const Array& other) const;

    std::string shape_str() const;  // e.g. "[4x5]"

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace utrack
