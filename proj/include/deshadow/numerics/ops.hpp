#pragma once

#include <vector>

#include "deshadow/numerics/kernels.hpp"
#include "deshadow/numerics/tape.hpp"

// Differentiable primitives recorded on a Tape.
namespace deshadow::ad {

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
// Elementwise product with a constant tensor of the same shape.
Var mul_const(Tape& t, Var a, const Tensor& m);
// a + c where c is a constant tensor of the same shape.
Var add_const(Tape& t, Var a, const Tensor& c);

Var exp(Tape& t, Var a);
Var tanh(Tape& t, Var a);
Var softplus(Tape& t, Var a);
Var silu(Tape& t, Var a);
Var clamp(Tape& t, Var a, double lo, double hi);

Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);

Var reshape(Tape& t, Var a, Shape shape);
// Contiguous run of shape_size(shape) elements of a starting at offset.
Var slice(Tape& t, Var a, std::size_t offset, Shape shape);
// Swaps the last two axes (rank 2 or 3).
Var transpose_hw(Tape& t, Var a);
Var concat_channels(Tape& t, const std::vector<Var>& parts);

Var conv2d(Tape& t, Var x, Var weight, Var bias, kernels::Conv2dSpec spec);
Var depthwise_conv2d(Tape& t, Var x, Var weight, Var bias);
Var layer_norm(Tape& t, Var x, Var gain, Var shift, double eps = 1e-5);
Var bilinear_sample_2d(Tape& t, Var src, Var grid);

// y = x W^T (+ b) for x: L x Cin, W: Cout x Cin, b: Cout.
Var linear(Tape& t, Var x, Var weight);
Var linear(Tape& t, Var x, Var weight, Var bias);

// 2x2 average pooling and 2x nearest-neighbour upsampling on C x H x W.
Var avg_pool2(Tape& t, Var x);
Var upsample_nearest2(Tape& t, Var x);

}  // namespace deshadow::ad
