#include "deshadow/numerics/ops.hpp"

#include <algorithm>
#include <cmath>

#include "deshadow/errors.hpp"

namespace deshadow::ad {

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
  }
}

// Elementwise unary op whose derivative is a function of (input, output).
template <typename F, typename D>
Var unary(Tape& t, Var a, F f, D df) {
  const Tensor& x = t.value(a);
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return t.record(std::move(out), {a}, [df](const BackwardArgs& b) {
    const Tensor& x = *b.in[0];
    Tensor& g = *b.grad_in[0];
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += b.grad_out[i] * df(x[i], b.out[i]);
  });
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  same_shape(x, y, "add");
  Tensor out = x;
  out += y;
  return t.record(std::move(out), {a, b}, [](const BackwardArgs& b) {
    for (int k = 0; k < 2; ++k)
      if (b.grad_in[k]) *b.grad_in[k] += b.grad_out;
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  same_shape(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return t.record(std::move(out), {a, b}, [](const BackwardArgs& b) {
    if (b.grad_in[0]) *b.grad_in[0] += b.grad_out;
    if (b.grad_in[1]) {
      Tensor& g = *b.grad_in[1];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= b.grad_out[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  same_shape(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return t.record(std::move(out), {a, b}, [](const BackwardArgs& b) {
    const Tensor& x = *b.in[0];
    const Tensor& y = *b.in[1];
    if (b.grad_in[0])
      for (std::size_t i = 0; i < x.size(); ++i) (*b.grad_in[0])[i] += b.grad_out[i] * y[i];
    if (b.grad_in[1])
      for (std::size_t i = 0; i < x.size(); ++i) (*b.grad_in[1])[i] += b.grad_out[i] * x[i];
  });
}

Var scale(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  out *= s;
  return t.record(std::move(out), {a}, [s](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * b.grad_out[i];
  });
}

Var add_scalar(Tape& t, Var a, double s) {
  Tensor out = t.value(a);
  for (auto& v : out.data()) v += s;
  return t.record(std::move(out), {a}, [](const BackwardArgs& b) { *b.grad_in[0] += b.grad_out; });
}

Var mul_const(Tape& t, Var a, const Tensor& m) {
  const Tensor& x = t.value(a);
  same_shape(x, m, "mul_const");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return t.record(std::move(out), {a}, [m](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += b.grad_out[i] * m[i];
  });
}

Var add_const(Tape& t, Var a, const Tensor& c) {
  const Tensor& x = t.value(a);
  same_shape(x, c, "add_const");
  Tensor out = x;
  out += c;
  return t.record(std::move(out), {a}, [](const BackwardArgs& b) { *b.grad_in[0] += b.grad_out; });
}

Var exp(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var tanh(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(Tape& t, Var a) {
  return unary(
      t, a, [](double x) { return kernels::softplus(x); }, [](double x, double) { return kernels::sigmoid(x); });
}

Var silu(Tape& t, Var a) {
  return unary(
      t, a, [](double x) { return kernels::silu(x); },
      [](double x, double) {
        const double s = kernels::sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var clamp(Tape& t, Var a, double lo, double hi) {
  return unary(
      t, a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var sum(Tape& t, Var a) {
  return t.record(Tensor::scalar(deshadow::sum(t.value(a))), {a}, [](const BackwardArgs& b) {
    const double g = b.grad_out[0];
    for (auto& v : b.grad_in[0]->data()) v += g;
  });
}

Var mean(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  require(x.size() > 0, "mean of an empty tensor");
  const double n = static_cast<double>(x.size());
  return t.record(Tensor::scalar(deshadow::sum(x) / n), {a}, [n](const BackwardArgs& b) {
    const double g = b.grad_out[0] / n;
    for (auto& v : b.grad_in[0]->data()) v += g;
  });
}

Var reshape(Tape& t, Var a, Shape shape) {
  return t.record(t.value(a).reshaped(std::move(shape)), {a}, [](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += b.grad_out[i];
  });
}

Var slice(Tape& t, Var a, std::size_t offset, Shape shape) {
  const Tensor& x = t.value(a);
  const std::size_t n = shape_size(shape);
  require(offset + n <= x.size(), "slice runs past the end of its input");
  Tensor out(std::move(shape), std::vector<double>(x.data().begin() + static_cast<long>(offset),
                                                   x.data().begin() + static_cast<long>(offset + n)));
  return t.record(std::move(out), {a}, [offset](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    for (std::size_t i = 0; i < b.grad_out.size(); ++i) g[offset + i] += b.grad_out[i];
  });
}

Var transpose_hw(Tape& t, Var a) {
  return t.record(transpose_last2(t.value(a)), {a},
                  [](const BackwardArgs& b) { *b.grad_in[0] += transpose_last2(b.grad_out); });
}

Var concat_channels(Tape& t, const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_channels needs at least one input");
  const Tensor& first = t.value(parts.front());
  require(first.rank() == 3, "concat_channels expects C x H x W inputs");
  const std::size_t h = first.dim(1), w = first.dim(2);
  std::size_t channels = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    require(v.rank() == 3 && v.dim(1) == h && v.dim(2) == w, "concat_channels spatial mismatch");
    channels += v.dim(0);
  }
  Tensor out({channels, h, w});
  std::size_t offset = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<long>(offset));
    offset += v.size();
  }
  return t.record(std::move(out), parts, [](const BackwardArgs& b) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < b.in.size(); ++k) {
      const std::size_t n = b.in[k]->size();
      if (b.grad_in[k]) {
        Tensor& g = *b.grad_in[k];
        for (std::size_t i = 0; i < n; ++i) g[i] += b.grad_out[offset + i];
      }
      offset += n;
    }
  });
}

Var conv2d(Tape& t, Var x, Var weight, Var bias, kernels::Conv2dSpec spec) {
  Tensor out = kernels::conv2d(t.value(x), t.value(weight), t.value(bias), spec);
  return t.record(std::move(out), {x, weight, bias}, [spec](const BackwardArgs& b) {
    kernels::conv2d_backward(*b.in[0], *b.in[1], b.grad_out, spec, b.grad_in[0], b.grad_in[1], b.grad_in[2]);
  });
}

Var depthwise_conv2d(Tape& t, Var x, Var weight, Var bias) {
  Tensor out = kernels::depthwise_conv2d(t.value(x), t.value(weight), t.value(bias));
  return t.record(std::move(out), {x, weight, bias}, [](const BackwardArgs& b) {
    kernels::depthwise_conv2d_backward(*b.in[0], *b.in[1], b.grad_out, b.grad_in[0], b.grad_in[1], b.grad_in[2]);
  });
}

Var layer_norm(Tape& t, Var x, Var gain, Var shift, double eps) {
  Tensor out = kernels::layer_norm(t.value(x), t.value(gain), t.value(shift), eps);
  return t.record(std::move(out), {x, gain, shift}, [eps](const BackwardArgs& b) {
    kernels::layer_norm_backward(*b.in[0], *b.in[1], b.grad_out, eps, b.grad_in[0], b.grad_in[1], b.grad_in[2]);
  });
}

Var bilinear_sample_2d(Tape& t, Var src, Var grid) {
  Tensor out = kernels::bilinear_sample_2d(t.value(src), t.value(grid));
  return t.record(std::move(out), {src, grid}, [](const BackwardArgs& b) {
    kernels::bilinear_sample_2d_backward(*b.in[0], *b.in[1], b.grad_out, b.grad_in[0], b.grad_in[1]);
  });
}

namespace {

Var linear_impl(Tape& t, Var x, Var weight, const Var* bias) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(weight);
  require(xv.rank() == 2 && wv.rank() == 2, "linear expects L x Cin input and Cout x Cin weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw ContractViolation("linear width mismatch: input " + shape_string(xv.shape()) + ", weight " +
                            shape_string(wv.shape()));
  }
  const std::size_t len = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
  Tensor out({len, cout});
  if (bias) {
    const Tensor& bv = t.value(*bias);
    require(bv.size() == cout, "linear bias must have Cout entries");
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t o = 0; o < cout; ++o) out.at(l, o) = bv[o];
  }
  for (std::size_t l = 0; l < len; ++l) {
    const double* xr = &xv.at(l, 0);
    for (std::size_t o = 0; o < cout; ++o) {
      const double* wr = &wv.at(o, 0);
      double s = 0.0;
      for (std::size_t c = 0; c < cin; ++c) s += wr[c] * xr[c];
      out.at(l, o) += s;
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return t.record(std::move(out), std::move(inputs), [](const BackwardArgs& b) {
    const Tensor& xv = *b.in[0];
    const Tensor& wv = *b.in[1];
    const std::size_t len = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
    for (std::size_t l = 0; l < len; ++l) {
      const double* xr = &xv.at(l, 0);
      const double* gr = &b.grad_out.at(l, 0);
      for (std::size_t o = 0; o < cout; ++o) {
        const double g = gr[o];
        if (g == 0.0) continue;
        if (b.grad_in[0]) {
          double* gx = &b.grad_in[0]->at(l, 0);
          const double* wr = &wv.at(o, 0);
          for (std::size_t c = 0; c < cin; ++c) gx[c] += g * wr[c];
        }
        if (b.grad_in[1]) {
          double* gw = &b.grad_in[1]->at(o, 0);
          for (std::size_t c = 0; c < cin; ++c) gw[c] += g * xr[c];
        }
      }
      if (b.in.size() == 3 && b.grad_in[2])
        for (std::size_t o = 0; o < cout; ++o) (*b.grad_in[2])[o] += gr[o];
    }
  });
}

}  // namespace

Var linear(Tape& t, Var x, Var weight) { return linear_impl(t, x, weight, nullptr); }

Var linear(Tape& t, Var x, Var weight, Var bias) { return linear_impl(t, x, weight, &bias); }

Var avg_pool2(Tape& t, Var x) {
  const Tensor& v = t.value(x);
  require(v.rank() == 3 && v.dim(1) % 2 == 0 && v.dim(2) % 2 == 0, "avg_pool2 needs even C x H x W");
  const std::size_t c = v.dim(0), h = v.dim(1) / 2, w = v.dim(2) / 2;
  Tensor out({c, h, w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out.at(k, i, j) = 0.25 * (v.at(k, 2 * i, 2 * j) + v.at(k, 2 * i, 2 * j + 1) + v.at(k, 2 * i + 1, 2 * j) +
                                  v.at(k, 2 * i + 1, 2 * j + 1));
  return t.record(std::move(out), {x}, [](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    const std::size_t c = b.grad_out.dim(0), h = b.grad_out.dim(1), w = b.grad_out.dim(2);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double q = 0.25 * b.grad_out.at(k, i, j);
          g.at(k, 2 * i, 2 * j) += q;
          g.at(k, 2 * i, 2 * j + 1) += q;
          g.at(k, 2 * i + 1, 2 * j) += q;
          g.at(k, 2 * i + 1, 2 * j + 1) += q;
        }
  });
}

Var upsample_nearest2(Tape& t, Var x) {
  const Tensor& v = t.value(x);
  require(v.rank() == 3, "upsample_nearest2 expects C x H x W");
  const std::size_t c = v.dim(0), h = v.dim(1), w = v.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) out.at(k, i, j) = v.at(k, i / 2, j / 2);
  return t.record(std::move(out), {x}, [](const BackwardArgs& b) {
    Tensor& g = *b.grad_in[0];
    const std::size_t c = b.grad_out.dim(0), h = b.grad_out.dim(1), w = b.grad_out.dim(2);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) g.at(k, i / 2, j / 2) += b.grad_out.at(k, i, j);
  });
}

}  // namespace deshadow::ad
