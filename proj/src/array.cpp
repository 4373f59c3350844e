#include "utrack/array.hpp"

#include <cmath>
#include <cstring>

#include "utrack/error.hpp"

namespace utrack {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Array::Array(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
    for (std::size_t e : shape_) {
        if (e == 0) throw ShapeError("Array: zero extent in shape " + utrack::shape_str(shape_));
    }
}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("Array: shape " + utrack::shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
    }
}

Array::Array(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Array Array::scalar(double v) { return Array({1}, std::vector<double>{v}); }

bool Array::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Array::bit_equal(const Array& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Array::shape_str() const { return utrack::shape_str(shape_); }

}  // namespace utrack
