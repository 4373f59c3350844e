#pragma once

#include <cstddef>
#include <vector>

#include "utrack/ops.hpp"
#include "utrack/tape.hpp"

// Differentiable primitives recorded on a Tape. Forward math lives in
// ops.cpp; these wrappers add the backward rules.
namespace utrack::ad {

// Elementwise, same shape.
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div_ew(Tape& t, Var a, Var b);
Var min_ew(Tape& t, Var a, Var b);
Var max_ew(Tape& t, Var a, Var b);
Var atan2_ew(Tape& t, Var y, Var x);

Var add_scalar(Tape& t, Var a, double s);
Var mul_scalar(Tape& t, Var a, double s);
Var neg(Tape& t, Var a);

Var relu(Tape& t, Var a);
Var softplus(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var exp_ew(Tape& t, Var a);
Var log_ew(Tape& t, Var a);
Var sqrt_ew(Tape& t, Var a);
Var square(Tape& t, Var a);
Var abs_ew(Tape& t, Var a);

// Reductions.
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);

// Structure.
Var reshape(Tape& t, Var a, std::vector<std::size_t> shape);
Var transpose(Tape& t, Var a);
Var concat(Tape& t, const std::vector<Var>& parts, std::size_t axis);
Var slice(Tape& t, Var a, std::size_t axis, std::size_t start, std::size_t len);
Var element(Tape& t, Var a, std::size_t flat_index);  // -> scalar

// Linear algebra / NN primitives.
Var matmul(Tape& t, Var a, Var b);
Var masked_softmax(Tape& t, Var x, std::size_t axis, const Array* mask = nullptr);
Var conv2d(Tape& t, Var input, Var kernel, std::size_t stride, std::size_t pad);
Var channel_affine(Tape& t, Var x, Var scale, Var shift);
Var add_channel_bias(Tape& t, Var x, Var bias);
Var add_row_bias(Tape& t, Var x, Var bias);
Var global_avg_pool(Tape& t, Var x);
Var bilinear_upsample(Tape& t, Var x, std::size_t factor);
Var layer_norm(Tape& t, Var x, Var gain, Var bias);

// Splits an image [3 x H x W] into S x S patches, each flattened
// channel-major to a row of the output [n x 3*S*S]; patch order is row-major
// over the patch grid.
Var patch_flatten(Tape& t, Var image, std::size_t patch);

// Map value at a continuous, clamped location; differentiable in the map and
// in both coordinates.
Var bilinear_sample(Tape& t, Var map2d, Var x, Var y);

}  // namespace utrack::ad
