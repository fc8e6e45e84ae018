#pragma once

#include "deshadow/numerics/tensor.hpp"

// Forward kernels and their adjoints. The tape ops in ops.hpp wrap these; they
// are also usable directly for inference paths that never record a graph.
namespace deshadow::kernels {

double softplus(double x);
double sigmoid(double x);
double silu(double x);
Tensor softplus(const Tensor& x);

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Cross-correlation with zero padding. x: Cin x H x W, weight: Cout x Cin x k x k, bias: Cout.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dSpec spec);
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out, Conv2dSpec spec,
                     Tensor* grad_x, Tensor* grad_weight, Tensor* grad_bias);

// Per-channel 3x3 (any odd k) convolution, stride 1, same padding. weight: C x k x k.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
void depthwise_conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                               Tensor* grad_x, Tensor* grad_weight, Tensor* grad_bias);

// Normalizes over the channel axis at every spatial position of a C x H x W tensor.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5);
void layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& grad_out, double eps,
                         Tensor* grad_x, Tensor* grad_gain, Tensor* grad_shift);

// Bilinear interpolation of src (C x H x W) at absolute coordinates grid (2 x Ho x Wo, channel 0
// is x/column, channel 1 is y/row). Coordinates are clamped to the border first.
Tensor bilinear_sample_2d(const Tensor& src, const Tensor& grid);
void bilinear_sample_2d_backward(const Tensor& src, const Tensor& grid, const Tensor& grad_out,
                                 Tensor* grad_src, Tensor* grad_grid);

// Identity sampling grid (x = column, y = row) of spatial size H x W.
Tensor identity_grid(std::size_t height, std::size_t width);

}  // namespace deshadow::kernels
