#include "deshadow/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>

#include "deshadow/errors.hpp"

namespace deshadow::kernels {

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

Tensor softplus(const Tensor& x) {
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = softplus(x[i]);
  return out;
}

namespace {

void check_conv_shapes(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 3, "conv2d input must be C x H x W");
  require(weight.rank() == 4, "conv2d weight must be Cout x Cin x k x k");
  if (weight.dim(1) != x.dim(0)) {
    throw ContractViolation("conv2d channel mismatch: input has " + std::to_string(x.dim(0)) +
                            " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  require(weight.dim(2) == weight.dim(3), "conv2d kernel must be square");
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(0), "conv2d bias must have Cout entries");
}

std::size_t conv_extent(std::size_t n, std::size_t k, Conv2dSpec spec) {
  require(spec.stride >= 1, "conv2d stride must be >= 1");
  require(n + 2 * spec.padding >= k, "conv2d kernel larger than padded input");
  return (n + 2 * spec.padding - k) / spec.stride + 1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dSpec spec) {
  check_conv_shapes(x, weight, bias);
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const std::size_t ho = conv_extent(h, k, spec), wo = conv_extent(w, k, spec);
  const auto pad = static_cast<long>(spec.padding);
  Tensor out({cout, ho, wo});
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = &out.at(o, 0, 0);
    std::fill(dst, dst + ho * wo, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          const double wv = weight.at(o, c, ki, kj);
          if (wv == 0.0) continue;
          for (std::size_t i = 0; i < ho; ++i) {
            const long yi = static_cast<long>(i * spec.stride + ki) - pad;
            if (yi < 0 || yi >= static_cast<long>(h)) continue;
            const double* src = &x.at(c, static_cast<std::size_t>(yi), 0);
            double* row = dst + i * wo;
            for (std::size_t j = 0; j < wo; ++j) {
              const long xj = static_cast<long>(j * spec.stride + kj) - pad;
              if (xj < 0 || xj >= static_cast<long>(w)) continue;
              row[j] += wv * src[xj];
            }
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out, Conv2dSpec spec,
                     Tensor* grad_x, Tensor* grad_weight, Tensor* grad_bias) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  const std::size_t ho = grad_out.dim(1), wo = grad_out.dim(2);
  const auto pad = static_cast<long>(spec.padding);
  for (std::size_t o = 0; o < cout; ++o) {
    const double* g = &grad_out.at(o, 0, 0);
    if (grad_bias) {
      double s = 0.0;
      for (std::size_t n = 0; n < ho * wo; ++n) s += g[n];
      (*grad_bias)[o] += s;
    }
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t ki = 0; ki < k; ++ki) {
        for (std::size_t kj = 0; kj < k; ++kj) {
          const double wv = weight.at(o, c, ki, kj);
          double gw = 0.0;
          for (std::size_t i = 0; i < ho; ++i) {
            const long yi = static_cast<long>(i * spec.stride + ki) - pad;
            if (yi < 0 || yi >= static_cast<long>(h)) continue;
            const auto yu = static_cast<std::size_t>(yi);
            const double* src = &x.at(c, yu, 0);
            const double* grow = g + i * wo;
            double* gx_row = grad_x ? &grad_x->at(c, yu, 0) : nullptr;
            for (std::size_t j = 0; j < wo; ++j) {
              const long xj = static_cast<long>(j * spec.stride + kj) - pad;
              if (xj < 0 || xj >= static_cast<long>(w)) continue;
              gw += grow[j] * src[xj];
              if (gx_row) gx_row[xj] += grow[j] * wv;
            }
          }
          if (grad_weight) grad_weight->at(o, c, ki, kj) += gw;
        }
      }
    }
  }
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 3 && weight.rank() == 3, "depthwise_conv2d expects C x H x W and C x k x k");
  require(weight.dim(0) == x.dim(0) && bias.size() == x.dim(0), "depthwise_conv2d channel mismatch");
  require(weight.dim(1) == weight.dim(2) && weight.dim(1) % 2 == 1, "depthwise kernel must be odd square");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(1);
  const long half = static_cast<long>(k / 2);
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double s = bias[ch];
        for (std::size_t ki = 0; ki < k; ++ki) {
          const long yi = static_cast<long>(i + ki) - half;
          if (yi < 0 || yi >= static_cast<long>(h)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const long xj = static_cast<long>(j + kj) - half;
            if (xj < 0 || xj >= static_cast<long>(w)) continue;
            s += weight.at(ch, ki, kj) * x.at(ch, static_cast<std::size_t>(yi), static_cast<std::size_t>(xj));
          }
        }
        out.at(ch, i, j) = s;
      }
    }
  }
  return out;
}

void depthwise_conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                               Tensor* grad_x, Tensor* grad_weight, Tensor* grad_bias) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(1);
  const long half = static_cast<long>(k / 2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double g = grad_out.at(ch, i, j);
        if (grad_bias) (*grad_bias)[ch] += g;
        for (std::size_t ki = 0; ki < k; ++ki) {
          const long yi = static_cast<long>(i + ki) - half;
          if (yi < 0 || yi >= static_cast<long>(h)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const long xj = static_cast<long>(j + kj) - half;
            if (xj < 0 || xj >= static_cast<long>(w)) continue;
            const auto yu = static_cast<std::size_t>(yi), xu = static_cast<std::size_t>(xj);
            if (grad_weight) grad_weight->at(ch, ki, kj) += g * x.at(ch, yu, xu);
            if (grad_x) grad_x->at(ch, yu, xu) += g * weight.at(ch, ki, kj);
          }
        }
      }
    }
  }
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
  require(x.rank() == 3, "layer_norm expects C x H x W");
  require(eps > 0.0, "layer_norm eps must be positive");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  require(gain.size() == c && shift.size() == c, "layer_norm gain/shift must have C entries");
  Tensor out = Tensor::zeros_like(x);
  const double* src = x.data().data();
  double* dst = out.data().data();
  for (std::size_t p = 0; p < n; ++p) {
    double mean = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mean += src[ch * n + p];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = src[ch * n + p] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t ch = 0; ch < c; ++ch) dst[ch * n + p] = gain[ch] * (src[ch * n + p] - mean) * inv + shift[ch];
  }
  return out;
}

void layer_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& grad_out, double eps,
                         Tensor* grad_x, Tensor* grad_gain, Tensor* grad_shift) {
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  const double* src = x.data().data();
  const double* g = grad_out.data().data();
  std::vector<double> xhat(c), gxhat(c);
  for (std::size_t p = 0; p < n; ++p) {
    double mean = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) mean += src[ch * n + p];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = src[ch * n + p] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      xhat[ch] = (src[ch * n + p] - mean) * inv;
      const double go = g[ch * n + p];
      if (grad_gain) (*grad_gain)[ch] += go * xhat[ch];
      if (grad_shift) (*grad_shift)[ch] += go;
      gxhat[ch] = go * gain[ch];
      mean_g += gxhat[ch];
      mean_gx += gxhat[ch] * xhat[ch];
    }
    if (!grad_x) continue;
    mean_g /= static_cast<double>(c);
    mean_gx /= static_cast<double>(c);
    double* gx = grad_x->data().data();
    for (std::size_t ch = 0; ch < c; ++ch) gx[ch * n + p] += inv * (gxhat[ch] - mean_g - xhat[ch] * mean_gx);
  }
}

namespace {

struct Tap {
  std::size_t x0, x1, y0, y1;
  double fx, fy;
  bool x_inside, y_inside;
};

Tap make_tap(double x, double y, std::size_t h, std::size_t w) {
  Tap t{};
  const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
  t.x_inside = x >= 0.0 && x <= xmax;
  t.y_inside = y >= 0.0 && y <= ymax;
  const double xc = std::clamp(x, 0.0, xmax);
  const double yc = std::clamp(y, 0.0, ymax);
  const double xf = std::floor(xc), yf = std::floor(yc);
  t.x0 = static_cast<std::size_t>(xf);
  t.y0 = static_cast<std::size_t>(yf);
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.fx = xc - xf;
  t.fy = yc - yf;
  return t;
}

}  // namespace

Tensor bilinear_sample_2d(const Tensor& src, const Tensor& grid) {
  require(src.rank() == 3 && src.size() > 0, "bilinear_sample_2d source must be a non-empty C x H x W");
  if (grid.rank() != 3 || grid.dim(0) != 2) {
    throw ContractViolation("bilinear_sample_2d grid must be 2 x H x W, got " + shape_string(grid.shape()));
  }
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  const std::size_t ho = grid.dim(1), wo = grid.dim(2);
  Tensor out({c, ho, wo});
  for (std::size_t i = 0; i < ho; ++i) {
    for (std::size_t j = 0; j < wo; ++j) {
      const Tap t = make_tap(grid.at(0, i, j), grid.at(1, i, j), h, w);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = (1.0 - t.fx) * src.at(ch, t.y0, t.x0) + t.fx * src.at(ch, t.y0, t.x1);
        const double bottom = (1.0 - t.fx) * src.at(ch, t.y1, t.x0) + t.fx * src.at(ch, t.y1, t.x1);
        out.at(ch, i, j) = (1.0 - t.fy) * top + t.fy * bottom;
      }
    }
  }
  return out;
}

void bilinear_sample_2d_backward(const Tensor& src, const Tensor& grid, const Tensor& grad_out,
                                 Tensor* grad_src, Tensor* grad_grid) {
  const std::size_t c = src.dim(0), h = src.dim(1), w = src.dim(2);
  const std::size_t ho = grid.dim(1), wo = grid.dim(2);
  for (std::size_t i = 0; i < ho; ++i) {
    for (std::size_t j = 0; j < wo; ++j) {
      const Tap t = make_tap(grid.at(0, i, j), grid.at(1, i, j), h, w);
      double gx = 0.0, gy = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = grad_out.at(ch, i, j);
        const double v00 = src.at(ch, t.y0, t.x0), v01 = src.at(ch, t.y0, t.x1);
        const double v10 = src.at(ch, t.y1, t.x0), v11 = src.at(ch, t.y1, t.x1);
        if (grad_src) {
          grad_src->at(ch, t.y0, t.x0) += g * (1.0 - t.fx) * (1.0 - t.fy);
          grad_src->at(ch, t.y0, t.x1) += g * t.fx * (1.0 - t.fy);
          grad_src->at(ch, t.y1, t.x0) += g * (1.0 - t.fx) * t.fy;
          grad_src->at(ch, t.y1, t.x1) += g * t.fx * t.fy;
        }
        gx += g * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
        gy += g * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
      }
      if (grad_grid) {
        if (t.x_inside) grad_grid->at(0, i, j) += gx;
        if (t.y_inside) grad_grid->at(1, i, j) += gy;
      }
    }
  }
}

Tensor identity_grid(std::size_t height, std::size_t width) {
  Tensor g({2, height, width});
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      g.at(0, i, j) = static_cast<double>(j);
      g.at(1, i, j) = static_cast<double>(i);
    }
  }
  return g;
}

}  // namespace deshadow::kernels
