#pragma once

#include <cstddef>
#include <limits>

#include "utrack/array.hpp"

namespace utrack {

// Sentinel marking a masked-out position. It is the most negative finite
// double; adding it before a softmax drives the entry to exactly zero, so
// arrays carrying masks stay finite everywhere.
inline constexpr double kMaskedOut = std::numeric_limits<double>::lowest();

Array matmul(const Array& a, const Array& b);
Array transpose2d(const Array& a);

// Softmax along `axis`, numerically stabilized by max subtraction. The
// optional mask holds 0 for live entries and kMaskedOut for dead ones; its
// extents must equal x's or be 1 (broadcast). Masked entries come out as
// exactly 0. A slice with every entry masked is an error.
Array masked_softmax(const Array& x, std::size_t axis, const Array* mask = nullptr);

// Cross-correlation with zero padding. input [Cin x H x W], kernel
// [Cout x Cin x k x k], k odd; output extents must come out integral.
Array conv2d(const Array& input, const Array& kernel, std::size_t stride, std::size_t pad);

Array global_avg_pool(const Array& x);  // [C x H x W] -> [C x 1 x 1]

// Bilinear interpolation, factor 2 or 4. Output pixel o reads the source
// coordinate (o + 0.5)/factor - 0.5, clamped to the valid range.
Array bilinear_upsample(const Array& x, std::size_t factor);

// y[c,h,w] = x[c,h,w] * scale[c] + shift[c]
Array channel_affine(const Array& x, const Array& scale, const Array& shift);

// Row-wise normalization of x [N x d] with learnable gain/bias [d].
Array layer_norm(const Array& x, const Array& gain, const Array& bias, double eps = 1e-5);

// Value of a 2-D map at a continuous location, bilinear between the four
// surrounding cells; coordinates are clamped to [0, W-1] x [0, H-1].
double bilinear_sample(const Array& map2d, double x, double y);

// Same-shape elementwise helpers.
Array ew_add(const Array& a, const Array& b);
Array ew_sub(const Array& a, const Array& b);
Array ew_mul(const Array& a, const Array& b);
Array ew_div(const Array& a, const Array& b);
Array ew_scale(const Array& a, double s);
Array ew_shift(const Array& a, double s);
double reduce_sum(const Array& a);

}  // namespace utrack
