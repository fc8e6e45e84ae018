#include "deshadow/ssm/ssm.hpp"

#include <cmath>
#include <memory>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/kernels.hpp"
#include "deshadow/numerics/ops.hpp"

namespace deshadow::ssm {

std::vector<double> ContinuousParams::transition() const {
  std::vector<double> a(a_log.size());
  for (std::size_t z = 0; z < a.size(); ++z) a[z] = -std::exp(a_log[z]);
  return a;
}

ContinuousParams ContinuousParams::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
  require(channels >= 1 && state_dim >= 1, "scan needs at least one channel and one state dimension");
  ContinuousParams p;
  p.a_log = Tensor({state_dim});
  for (std::size_t z = 0; z < state_dim; ++z) p.a_log[z] = std::log(static_cast<double>(z + 1));
  const double s = 1.0 / std::sqrt(static_cast<double>(channels));
  p.b_proj = rng.normal_tensor({state_dim, channels}, s);
  p.c_proj = rng.normal_tensor({state_dim, channels}, s);
  p.delta_proj = rng.normal_tensor({channels, channels}, 0.5 * s);
  p.delta_bias = Tensor({channels});
  for (std::size_t e = 0; e < channels; ++e) {
    const double dt = std::exp(rng.uniform(std::log(0.001), std::log(0.1)));
    p.delta_bias[e] = dt + std::log(-std::expm1(-dt));  // inverse softplus
  }
  p.gate_proj = rng.normal_tensor({channels, 1}, 0.1);
  p.feedthrough = Tensor({channels}, 1.0);
  return p;
}

ParamVars bind(ad::Tape& tape, const ContinuousParams& p, bool requires_grad) {
  return ParamVars{tape.leaf(p.a_log, requires_grad),      tape.leaf(p.b_proj, requires_grad),
                   tape.leaf(p.c_proj, requires_grad),     tape.leaf(p.delta_proj, requires_grad),
                   tape.leaf(p.delta_bias, requires_grad), tape.leaf(p.gate_proj, requires_grad),
                   tape.leaf(p.feedthrough, requires_grad)};
}

Discretized discretize_zoh(double a, double b, double delta) {
  require(delta > 0.0, "discretize_zoh requires delta > 0");
  const double da = delta * a;
  const double a_bar = std::exp(da);
  const double coef = std::abs(da) < kSeriesThreshold ? delta * (1.0 + 0.5 * da) : std::expm1(da) / a;
  return {a_bar, coef * b};
}

ScanStep selective_params(std::span<const double> x_t, const ContinuousParams& p, double gate_t) {
  const std::size_t c = p.channels(), z = p.state_dim();
  require(x_t.size() == c, "selective_params: input width does not match the parameter channel count");
  ScanStep s{Tensor({c, z}), Tensor({c, z}), Tensor({z}), Tensor({c}), p.feedthrough};
  std::vector<double> b(z);
  for (std::size_t k = 0; k < z; ++k) {
    double bs = 0.0, cs = 0.0;
    for (std::size_t e = 0; e < c; ++e) {
      bs += p.b_proj.at(k, e) * x_t[e];
      cs += p.c_proj.at(k, e) * x_t[e];
    }
    b[k] = bs;
    s.c[k] = cs;
  }
  const auto a = p.transition();
  for (std::size_t e = 0; e < c; ++e) {
    double pre = p.delta_bias[e];
    for (std::size_t f = 0; f < c; ++f) pre += p.delta_proj.at(e, f) * x_t[f];
    pre += p.gate_proj.at(e, 0) * gate_t;
    s.delta[e] = kernels::softplus(pre);
    for (std::size_t k = 0; k < z; ++k) {
      const auto d = discretize_zoh(a[k], b[k], s.delta[e]);
      s.a_bar.at(e, k) = d.a_bar;
      s.b_bar.at(e, k) = d.b_bar;
    }
  }
  return s;
}

namespace {

struct Coefficient {
  double a_bar;
  double coef;     // B_bar / B
  double dcoef_dt;
  double dcoef_da;
};

inline Coefficient zoh_coefficient(double dt, double a) {
  const double da = dt * a;
  const double em1 = std::expm1(da);
  Coefficient r{};
  r.a_bar = 1.0 + em1;
  if (std::abs(da) < kSeriesThreshold) {
    r.coef = dt * (1.0 + 0.5 * da);
    r.dcoef_dt = 1.0 + da;
    r.dcoef_da = 0.5 * dt * dt;
  } else {
    r.coef = em1 / a;
    r.dcoef_dt = r.a_bar;
    r.dcoef_da = (dt * r.a_bar - r.coef) / a;
  }
  return r;
}

void check_scan_shapes(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c, const Tensor& a,
                       const Tensor& d) {
  require(x.rank() == 2 && x.dim(0) >= 1, "scan input must be L x C with L >= 1");
  const std::size_t len = x.dim(0), ch = x.dim(1), z = a.size();
  require(z >= 1, "scan state dimension must be >= 1");
  require(delta.shape() == x.shape(), "scan step sizes must be L x C");
  require(b.rank() == 2 && b.dim(0) == len && b.dim(1) == z, "scan B must be L x Z");
  require(c.rank() == 2 && c.dim(0) == len && c.dim(1) == z, "scan C must be L x Z");
  require(d.size() == ch, "scan feedthrough must have C entries");
}

Tensor scan_forward(const Tensor& x, const Tensor& delta, const Tensor& b, const Tensor& c, const Tensor& a,
                    const Tensor& d, Tensor& states) {
  const std::size_t len = x.dim(0), ch = x.dim(1), z = a.size();
  Tensor y({len, ch});
  states = Tensor({len, ch, z});
  std::vector<double> h(ch * z, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    const double* bt = &b.at(t, 0);
    const double* ct = &c.at(t, 0);
    double* st = &states.at(t, 0, 0);
    for (std::size_t e = 0; e < ch; ++e) {
      const double dt = delta.at(t, e);
      const double xe = x.at(t, e);
      double out = d[e] * xe;
      double* he = &h[e * z];
      for (std::size_t k = 0; k < z; ++k) {
        const Coefficient q = zoh_coefficient(dt, a[k]);
        he[k] = q.a_bar * he[k] + q.coef * bt[k] * xe;
        out += ct[k] * he[k];
        st[e * z + k] = he[k];
      }
      y.at(t, e) = out;
    }
  }
  return y;
}

ad::Var scan_core_impl(ad::Tape& tape, ad::Var x, ad::Var delta, ad::Var b, ad::Var c, ad::Var a, ad::Var d,
                       Tensor* states_out) {
  const Tensor& xv = tape.value(x);
  const Tensor& dv = tape.value(delta);
  const Tensor& bv = tape.value(b);
  const Tensor& cv = tape.value(c);
  const Tensor& av = tape.value(a);
  const Tensor& fv = tape.value(d);
  check_scan_shapes(xv, dv, bv, cv, av, fv);
  auto states = std::make_shared<Tensor>();
  Tensor y = scan_forward(xv, dv, bv, cv, av, fv, *states);
  if (states_out) *states_out = *states;
  return tape.record(std::move(y), {x, delta, b, c, a, d}, [states](const ad::BackwardArgs& args) {
    const Tensor& x = *args.in[0];
    const Tensor& delta = *args.in[1];
    const Tensor& b = *args.in[2];
    const Tensor& c = *args.in[3];
    const Tensor& a = *args.in[4];
    const Tensor& d = *args.in[5];
    Tensor* gx = args.grad_in[0];
    Tensor* gdelta = args.grad_in[1];
    Tensor* gb = args.grad_in[2];
    Tensor* gc = args.grad_in[3];
    Tensor* ga = args.grad_in[4];
    Tensor* gd = args.grad_in[5];
    const Tensor& gy = args.grad_out;
    const std::size_t len = x.dim(0), ch = x.dim(1), z = a.size();
    std::vector<double> carry(ch * z, 0.0);
    std::vector<double> ga_acc(z, 0.0);
    for (std::size_t t = len; t-- > 0;) {
      const double* bt = &b.at(t, 0);
      const double* ct = &c.at(t, 0);
      const double* st = &states->at(t, 0, 0);
      const double* sp = t > 0 ? &states->at(t - 1, 0, 0) : nullptr;
      for (std::size_t e = 0; e < ch; ++e) {
        const double g_out = gy.at(t, e);
        const double xe = x.at(t, e);
        const double dt = delta.at(t, e);
        if (gd) (*gd)[e] += g_out * xe;
        double g_x = g_out * d[e];
        double g_dt = 0.0;
        for (std::size_t k = 0; k < z; ++k) {
          const std::size_t ek = e * z + k;
          if (gc) gc->at(t, k) += g_out * st[ek];
          const double g_h = carry[ek] + g_out * ct[k];
          const double h_prev = sp ? sp[ek] : 0.0;
          const Coefficient q = zoh_coefficient(dt, a[k]);
          const double g_abar = g_h * h_prev;
          const double g_coef = g_h * bt[k] * xe;
          if (gb) gb->at(t, k) += g_h * q.coef * xe;
          g_x += g_h * q.coef * bt[k];
          g_dt += g_abar * q.a_bar * a[k] + g_coef * q.dcoef_dt;
          ga_acc[k] += g_abar * q.a_bar * dt + g_coef * q.dcoef_da;
          carry[ek] = g_h * q.a_bar;
        }
        if (gx) gx->at(t, e) += g_x;
        if (gdelta) gdelta->at(t, e) += g_dt;
      }
    }
    if (ga)
      for (std::size_t k = 0; k < z; ++k) (*ga)[k] += ga_acc[k];
  });
}

ad::Var scan_with_states(ad::Tape& tape, ad::Var x, const ParamVars& p, std::optional<ad::Var> gates,
                         Tensor* states) {
  ad::Var b = ad::linear(tape, x, p.b_proj);
  ad::Var c = ad::linear(tape, x, p.c_proj);
  ad::Var pre = ad::linear(tape, x, p.delta_proj, p.delta_bias);
  if (gates) {
    const Tensor& g = tape.value(*gates);
    const Tensor& xv = tape.value(x);
    require(g.rank() == 2 && g.dim(0) == xv.dim(0) && g.dim(1) == 1, "scan gates must be L x 1");
    pre = ad::add(tape, pre, ad::linear(tape, *gates, p.gate_proj));
  }
  ad::Var delta = ad::softplus(tape, pre);
  ad::Var a = ad::scale(tape, ad::exp(tape, p.a_log), -1.0);
  return scan_core_impl(tape, x, delta, b, c, a, p.feedthrough, states);
}

std::optional<ad::Var> gate_var(ad::Tape& tape, const std::optional<Tensor>& gates) {
  if (!gates) return std::nullopt;
  return tape.constant(gates->reshaped({gates->size(), 1}));
}

}  // namespace

ad::Var scan_core(ad::Tape& tape, ad::Var x, ad::Var delta, ad::Var b, ad::Var c, ad::Var a, ad::Var d) {
  return scan_core_impl(tape, x, delta, b, c, a, d, nullptr);
}

ad::Var selective_scan(ad::Tape& tape, ad::Var x, const ParamVars& params, std::optional<ad::Var> gates) {
  return scan_with_states(tape, x, params, gates, nullptr);
}

ScanTrace selective_scan_trace(const Tensor& x, const ContinuousParams& params, const std::optional<Tensor>& gates) {
  ad::Tape tape;
  const ParamVars p = bind(tape, params, false);
  ScanTrace trace;
  ad::Var y = scan_with_states(tape, tape.constant(x), p, gate_var(tape, gates), &trace.states);
  trace.y = tape.value(y);
  return trace;
}

Tensor selective_scan(const Tensor& x, const ContinuousParams& params, const std::optional<Tensor>& gates) {
  ad::Tape tape;
  const ParamVars p = bind(tape, params, false);
  return tape.value(scan_with_states(tape, tape.constant(x), p, gate_var(tape, gates), nullptr));
}

Tensor scan_matrix_oracle(const Tensor& x, const ContinuousParams& params, const std::optional<Tensor>& gates) {
  require(x.rank() == 2 && x.dim(1) == params.channels(), "oracle input must be L x C");
  const std::size_t len = x.dim(0), ch = x.dim(1), z = params.state_dim();
  require(len >= 1 && len <= kOracleMaxLength, "scan_matrix_oracle supports 1 <= L <= 512");
  if (gates) require(gates->size() == len, "oracle gates must have L entries");

  std::vector<ScanStep> steps;
  steps.reserve(len);
  for (std::size_t t = 0; t < len; ++t) {
    std::span<const double> row(&x.at(t, 0), ch);
    steps.push_back(selective_params(row, params, gates ? (*gates)[t] : 0.0));
  }

  Tensor y({len, ch});
  Tensor mix({len, len});
  std::vector<double> prod(z);
  for (std::size_t e = 0; e < ch; ++e) {
    // mix[t, s] = C_t . (prod_{k=s+1..t} Abar_k) . Bbar_s for s <= t.
    for (std::size_t s = 0; s < len; ++s) {
      std::fill(prod.begin(), prod.end(), 1.0);
      for (std::size_t t = s; t < len; ++t) {
        if (t > s)
          for (std::size_t k = 0; k < z; ++k) prod[k] *= steps[t].a_bar.at(e, k);
        double m = 0.0;
        for (std::size_t k = 0; k < z; ++k) m += steps[t].c[k] * prod[k] * steps[s].b_bar.at(e, k);
        mix.at(t, s) = m;
      }
    }
    for (std::size_t t = 0; t < len; ++t) {
      double acc = steps[t].d[e] * x.at(t, e);
      for (std::size_t s = 0; s <= t; ++s) acc += mix.at(t, s) * x.at(s, e);
      y.at(t, e) = acc;
    }
  }
  return y;
}

std::size_t spatial_index(ScanOrder order, std::size_t t, std::size_t height, std::size_t width) {
  const std::size_t len = height * width;
  switch (order) {
    case ScanOrder::kRowForward:
      return t;
    case ScanOrder::kRowReverse:
      return len - 1 - t;
    case ScanOrder::kColForward:
      return (t % height) * width + t / height;
    case ScanOrder::kColReverse: {
      const std::size_t r = len - 1 - t;
      return (r % height) * width + r / height;
    }
  }
  return t;
}

Tensor to_sequence(const Tensor& image, ScanOrder order) {
  require(image.rank() == 3, "to_sequence expects C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), len = h * w;
  Tensor seq({len, c});
  for (std::size_t t = 0; t < len; ++t) {
    const std::size_t p = spatial_index(order, t, h, w);
    for (std::size_t k = 0; k < c; ++k) seq.at(t, k) = image[k * len + p];
  }
  return seq;
}

Tensor from_sequence(const Tensor& seq, ScanOrder order, std::size_t height, std::size_t width) {
  const std::size_t len = height * width;
  require(seq.rank() == 2 && seq.dim(0) == len, "from_sequence length does not match H x W");
  const std::size_t c = seq.dim(1);
  Tensor image({c, height, width});
  for (std::size_t t = 0; t < len; ++t) {
    const std::size_t p = spatial_index(order, t, height, width);
    for (std::size_t k = 0; k < c; ++k) image[k * len + p] = seq.at(t, k);
  }
  return image;
}

ad::Var to_sequence(ad::Tape& tape, ad::Var image, ScanOrder order) {
  const Tensor& v = tape.value(image);
  return tape.record(to_sequence(v, order), {image}, [order](const ad::BackwardArgs& b) {
    const std::size_t h = b.in[0]->dim(1), w = b.in[0]->dim(2);
    *b.grad_in[0] += from_sequence(b.grad_out, order, h, w);
  });
}

ad::Var from_sequence(ad::Tape& tape, ad::Var seq, ScanOrder order, std::size_t height, std::size_t width) {
  return tape.record(from_sequence(tape.value(seq), order, height, width), {seq},
                     [order](const ad::BackwardArgs& b) { *b.grad_in[0] += to_sequence(b.grad_out, order); });
}

ad::Var scan_image_4dir(ad::Tape& tape, ad::Var features, const std::array<ParamVars, 4>& params,
                        const DirectionalGateVars& gates) {
  const Tensor& f = tape.value(features);
  require(f.rank() == 3, "scan_image_4dir expects C x H x W");
  const std::size_t h = f.dim(1), w = f.dim(2);
  auto check_gate = [&](const std::optional<ad::Var>& g) {
    if (!g) return;
    const Tensor& gv = tape.value(*g);
    if (gv.size() != h * w || (gv.rank() == 2 && (gv.dim(0) != h || gv.dim(1) != w))) {
      throw ContractViolation("gate map shape " + shape_string(gv.shape()) + " does not match features " +
                              shape_string(f.shape()));
    }
  };
  check_gate(gates.horizontal);
  check_gate(gates.vertical);

  ad::Var total;
  for (std::size_t k = 0; k < kScanOrders.size(); ++k) {
    const ScanOrder order = kScanOrders[k];
    const auto& gate = is_horizontal(order) ? gates.horizontal : gates.vertical;
    std::optional<ad::Var> gate_seq;
    if (gate) gate_seq = to_sequence(tape, ad::reshape(tape, *gate, {1, h, w}), order);
    ad::Var y = selective_scan(tape, to_sequence(tape, features, order), params[k], gate_seq);
    ad::Var img = from_sequence(tape, y, order, h, w);
    total = total.valid() ? ad::add(tape, total, img) : img;
  }
  return total;
}

Tensor scan_image_4dir(const Tensor& features, const std::array<ContinuousParams, 4>& params,
                       const DirectionalGates& gates) {
  ad::Tape tape;
  std::array<ParamVars, 4> vars;
  for (std::size_t k = 0; k < 4; ++k) vars[k] = bind(tape, params[k], false);
  DirectionalGateVars gv;
  if (gates.horizontal) gv.horizontal = tape.constant(*gates.horizontal);
  if (gates.vertical) gv.vertical = tape.constant(*gates.vertical);
  return tape.value(scan_image_4dir(tape, tape.constant(features), vars, gv));
}

}  // namespace deshadow::ssm
