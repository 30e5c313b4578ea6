#include "midl/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace midl {

namespace {

Tensor apply_activation(Tape& tape, const Tensor& z, Activation act) {
  switch (act) {
    case Activation::Identity: return z;
    case Activation::Relu: return relu(tape, z);
    case Activation::Sigmoid: return sigmoid(tape, z);
  }
  throw ContractError("unknown activation");
}

}  // namespace

Tensor fc_forward(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                  Activation act) {
  if (x.shape().size() != 2 || w.shape().size() != 2)
    throw DimensionError("fc_forward: expected rank-2 x and w, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.cols() != w.cols())
    throw DimensionError("fc_forward: input width " + shape_str(x.shape()) +
                         " does not match weight " + shape_str(w.shape()) +
                         " (weights are [d_out x d_in])");
  if (b.shape().size() != 1 || b.shape()[0] != w.rows())
    throw DimensionError("fc_forward: bias " + shape_str(b.shape()) +
                         " does not match weight " + shape_str(w.shape()));
  Tensor z = add_row(tape, matmul_nt(tape, x, w), b);
  return apply_activation(tape, z, act);
}

Tensor dropout_mask(Shape shape, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: rate " + std::to_string(p) + " outside [0, 1)");
  Tensor m = Tensor::zeros(std::move(shape));
  double keep_scale = 1.0 / (1.0 - p);
  for (double& v : m.data()) v = rng.bernoulli(p) ? 0.0 : keep_scale;
  return m;
}

Tensor dropout_fc_forward(Tape& tape, const Tensor& x, const Tensor& w,
                          const Tensor& b, double p, bool training, Rng& rng,
                          Activation act) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout_fc: rate " + std::to_string(p) + " outside [0, 1)");
  Tensor in = x;
  if (training && p > 0.0) in = mul(tape, x, dropout_mask(x.shape(), p, rng));
  return fc_forward(tape, in, w, b, act);
}

Tensor topk_mask(const Tensor& values, int k) {
  if (values.shape().size() != 2)
    throw DimensionError("topk_mask: expected rank-2 values, got " +
                         shape_str(values.shape()));
  int64_t B = values.rows(), d = values.cols();
  if (k < 1 || k > d)
    throw ConfigError("topk_mask: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(d) + "]");
  Tensor mask = Tensor::zeros(values.shape());
  auto vd = values.data();
  auto md = mask.data();
  std::vector<int64_t> idx(static_cast<size_t>(d));
  for (int64_t n = 0; n < B; ++n) {
    const double* row = vd.data() + n * d;
    double* mrow = md.data() + n * d;
    if (k == d) {
      std::fill(mrow, mrow + d, 1.0);
      continue;
    }
    std::iota(idx.begin(), idx.end(), int64_t{0});
    // value descending, index ascending on ties -- boundary ties go low-index
    std::sort(idx.begin(), idx.end(), [row](int64_t a, int64_t b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    for (int i = 0; i < k; ++i) mrow[idx[static_cast<size_t>(i)]] = 1.0;
  }
  return mask;
}

Tensor random_topk_mask(int64_t batch, int64_t d, int k, Rng& rng) {
  if (batch <= 0 || d <= 0)
    throw ConfigError("random_topk_mask: non-positive dimensions");
  if (k < 1 || k > d)
    throw ConfigError("random_topk_mask: k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(d) + "]");
  Tensor mask = Tensor::zeros({batch, d});
  auto md = mask.data();
  std::vector<int64_t> idx(static_cast<size_t>(d));
  for (int64_t n = 0; n < batch; ++n) {
    std::iota(idx.begin(), idx.end(), int64_t{0});
    // partial Fisher-Yates: first k entries are uniform without replacement
    for (int i = 0; i < k; ++i) {
      int64_t j = rng.uniform_int(i, d - 1);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      md[n * d + idx[static_cast<size_t>(i)]] = 1.0;
    }
  }
  return mask;
}

namespace {

double gumbel_draw(Rng& rng) {
  double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
  return -std::log(-std::log(u));
}

}  // namespace

Tensor gumbel_gate_with_noise(Tape& tape, const Tensor& x, const Tensor& w_alpha,
                              double temperature, const Tensor& noise) {
  if (temperature <= 0.0)
    throw ConfigError("gumbel_gate: temperature must be positive");
  Tensor u = matmul(tape, x, w_alpha);
  if (noise.shape() != u.shape())
    throw DimensionError("gumbel_gate: noise " + shape_str(noise.shape()) +
                         " does not match logits " + shape_str(u.shape()));
  Tensor shifted = add(tape, u, noise);
  return sigmoid(tape, affine(tape, shifted, 1.0 / temperature, 0.0));
}

Tensor gumbel_gate(Tape& tape, const Tensor& x, const Tensor& w_alpha,
                   double temperature, bool training, Rng& rng) {
  if (!training) {
    // zero-temperature limit: deterministic hard gate on the logit sign
    Tape off(false);
    Tensor u = matmul(off, x, w_alpha);
    Tensor hard = Tensor::zeros(u.shape());
    auto ud = u.data();
    auto hd = hard.data();
    for (size_t i = 0; i < hd.size(); ++i) hd[i] = ud[i] > 0.0 ? 1.0 : 0.0;
    return hard;
  }
  Tensor u_probe;  // shape probe only; reuse op for the dimension checks
  {
    Tape off(false);
    u_probe = matmul(off, x, w_alpha);
  }
  Tensor noise = Tensor::zeros(u_probe.shape());
  for (double& v : noise.data()) v = gumbel_draw(rng) - gumbel_draw(rng);
  return gumbel_gate_with_noise(tape, x, w_alpha, temperature, noise);
}

// ---- MID-L ----------------------------------------------------------------

int GateConfig::resolve_k(int64_t d_out, int epoch) const {
  if (k.count > 0) {
    if (k.count > d_out)
      throw ConfigError("k=" + std::to_string(k.count) + " exceeds layer width " +
                        std::to_string(d_out));
    return k.count;
  }
  double f = k.fraction;
  if (k.end_fraction >= 0.0 && k.anneal_epochs > 0) {
    double t = std::clamp(static_cast<double>(epoch) / k.anneal_epochs, 0.0, 1.0);
    f = k.fraction + (k.end_fraction - k.fraction) * t;
  }
  if (!(f > 0.0 && f <= 1.0))
    throw ConfigError("k fraction " + std::to_string(f) + " outside (0, 1]");
  auto kk = static_cast<int>(std::lround(f * static_cast<double>(d_out)));
  return std::clamp(kk, 1, static_cast<int>(d_out));
}

MidlParams MidlParams::init(int64_t d_in, int64_t d_out, int64_t rank, int64_t hidden,
                            Rng& rng) {
  if (d_in <= 0 || d_out <= 0)
    throw ConfigError("MidlParams::init: non-positive layer width");
  if (rank <= 0) rank = (d_in + 1) / 2;  // ceil(d_in / 2)
  if (hidden <= 0) hidden = d_out;
  MidlParams p;
  p.f1_down = init_uniform_fanin({d_in, rank}, d_in, rng);
  p.f1_up = init_uniform_fanin({rank, d_out}, rank, rng);
  p.f1_bias = Tensor::zeros({d_out});
  p.f2_w1 = init_uniform_fanin({d_in, hidden}, d_in, rng);
  p.f2_b1 = Tensor::zeros({hidden});
  p.f2_w2 = init_uniform_fanin({hidden, d_out}, hidden, rng);
  p.f2_b2 = Tensor::zeros({d_out});
  p.w_alpha = init_uniform_fanin({d_in, d_out}, d_in, rng);
  for (Tensor t : p.all()) t.set_requires_grad(true);
  return p;
}

std::vector<Tensor> MidlParams::all() const {
  return {f1_down, f1_up, f1_bias, f2_w1, f2_b1, f2_w2, f2_b2, w_alpha};
}

std::vector<std::pair<std::string, Tensor>> MidlParams::named(
    const std::string& prefix) const {
  return {{prefix + ".f1_down", f1_down}, {prefix + ".f1_up", f1_up},
          {prefix + ".f1_bias", f1_bias}, {prefix + ".f2_w1", f2_w1},
          {prefix + ".f2_b1", f2_b1},     {prefix + ".f2_w2", f2_w2},
          {prefix + ".f2_b2", f2_b2},     {prefix + ".w_alpha", w_alpha}};
}

namespace {

Tensor f1_path(Tape& tape, const Tensor& x, const MidlParams& p) {
  return add_row(tape, matmul(tape, matmul(tape, x, p.f1_down), p.f1_up), p.f1_bias);
}

Tensor f2_path(Tape& tape, const Tensor& x, const MidlParams& p) {
  Tensor h = relu(tape, add_row(tape, matmul(tape, x, p.f2_w1), p.f2_b1));
  return add_row(tape, matmul(tape, h, p.f2_w2), p.f2_b2);
}

// z = applied * f1 + (1 - applied) * f2
Tensor interpolate(Tape& tape, const Tensor& applied, const Tensor& f1o,
                   const Tensor& f2o) {
  return add(tape, mul(tape, applied, f1o),
             mul(tape, affine(tape, applied, -1.0, 1.0), f2o));
}

}  // namespace

MidlOutput midl_forward(Tape& tape, const Tensor& x, const MidlParams& params,
                        const GateConfig& gate, bool training, Rng& rng, int epoch) {
  if (x.shape().size() != 2)
    throw DimensionError("midl_forward: expected rank-2 input, got " +
                         shape_str(x.shape()));
  if (x.cols() != params.d_in())
    throw DimensionError("midl_forward: input " + shape_str(x.shape()) +
                         " does not match d_in=" + std::to_string(params.d_in()));
  int64_t B = x.rows(), d = params.d_out();
  Shape gshape{B, d};
  MidlOutput out;

  auto apply_post_dropout = [&](const Tensor& ahat) {
    if (training && gate.post_gate_dropout_p > 0.0)
      return mul(tape, ahat, dropout_mask(gshape, gate.post_gate_dropout_p, rng));
    return ahat;
  };

  switch (gate.mode) {
    case GateConfig::Mode::FixedAlpha: {
      double v = gate.fixed_alpha;
      if (v < 0.0 || v > 1.0)
        throw ConfigError("fixed_alpha=" + std::to_string(v) + " outside [0, 1]");
      out.trace.alpha = Tensor::full(gshape, v);
      out.trace.mask = Tensor::full(gshape, 1.0);
      out.trace.alpha_hat = out.trace.alpha;
      out.trace.k = 0;
      out.gate_applied = out.trace.alpha_hat;
      // Endpoints return the path output itself: the other path is not
      // computed and post-gate dropout does not apply (an F1-only or F2-only
      // model must be exactly that path).
      if (v == 1.0) {
        out.f1_out = f1_path(tape, x, params);
        out.output = out.f1_out;
        return out;
      }
      if (v == 0.0) {
        out.f2_out = f2_path(tape, x, params);
        out.output = out.f2_out;
        return out;
      }
      out.f1_out = f1_path(tape, x, params);
      out.f2_out = f2_path(tape, x, params);
      out.gate_applied = apply_post_dropout(out.trace.alpha_hat);
      out.output = interpolate(tape, out.gate_applied, out.f1_out, out.f2_out);
      return out;
    }
    case GateConfig::Mode::RandomTopk: {
      int k = gate.resolve_k(d, epoch);
      Tensor m = random_topk_mask(B, d, k, rng);
      out.trace.alpha = m;  // the mask is used directly as alpha_hat
      out.trace.mask = m;
      out.trace.alpha_hat = m;
      out.trace.k = k;
      out.f1_out = f1_path(tape, x, params);
      out.f2_out = f2_path(tape, x, params);
      out.gate_applied = apply_post_dropout(m);
      out.output = interpolate(tape, out.gate_applied, out.f1_out, out.f2_out);
      return out;
    }
    case GateConfig::Mode::Gumbel: {
      Tensor g;
      {
        Tape off(false);
        Tensor u = matmul(off, x, params.w_alpha);
        out.trace.alpha = sigmoid(off, u);  // deterministic scores, for diagnostics
      }
      if (training) {
        g = gumbel_gate(tape, x, params.w_alpha, gate.gumbel_temperature, true, rng);
        out.trace.mask = Tensor::full(gshape, 1.0);  // relaxed gate, nothing pruned
      } else {
        g = gumbel_gate(tape, x, params.w_alpha, gate.gumbel_temperature, false, rng);
        out.trace.mask = g;
      }
      out.trace.alpha_hat = g;
      out.trace.k = 0;
      out.f1_out = f1_path(tape, x, params);
      out.f2_out = f2_path(tape, x, params);
      out.gate_applied = apply_post_dropout(g);
      out.output = interpolate(tape, out.gate_applied, out.f1_out, out.f2_out);
      return out;
    }
    case GateConfig::Mode::Learned: {
      int k = gate.resolve_k(d, epoch);
      Tensor u = matmul(tape, x, params.w_alpha);  // no gate bias
      Tensor alpha = sigmoid(tape, u);
      Tensor mask = topk_mask(alpha, k);
      Tensor ahat = ste_topk(tape, alpha, mask, gate.ste);
      out.trace.alpha = alpha;
      out.trace.mask = mask;
      out.trace.alpha_hat = ahat;
      out.trace.k = k;
      out.f1_out = f1_path(tape, x, params);
      out.f2_out = f2_path(tape, x, params);
      out.gate_applied = apply_post_dropout(ahat);
      out.output = interpolate(tape, out.gate_applied, out.f1_out, out.f2_out);
      return out;
    }
  }
  throw ContractError("midl_forward: unknown gate mode");
}

// ---- gradient cross-check ---------------------------------------------------

namespace {

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Plain-value loss sum(G * z) with the gate taken as sigmoid(x.w_alpha),
// multiplied by frozen_mask when it is defined. Freezing the mask is what
// makes this differentiable in the straight-through sense.
double numeric_loss(const Tensor& x, const MidlParams& p, const Tensor& G,
                    const Tensor& frozen_mask) {
  Tape off(false);
  Tensor f1o = f1_path(off, x, p);
  Tensor f2o = f2_path(off, x, p);
  Tensor a = sigmoid(off, matmul(off, x, p.w_alpha));
  if (frozen_mask.defined()) a = mul(off, a, frozen_mask);
  Tensor z = interpolate(off, a, f1o, f2o);
  return sum(off, mul(off, z, G)).value();
}

double max_fd_err(const Tensor& param, const Tensor& x, const MidlParams& p,
                  const Tensor& G, const Tensor& frozen_mask) {
  const double h = 1e-5;
  Tensor t = param;  // shared storage: perturbations hit the live parameters
  auto vals = t.data();
  auto grads = t.grad_if_allocated();
  double worst = 0.0;
  for (size_t i = 0; i < vals.size(); ++i) {
    double saved = vals[i];
    vals[i] = saved + h;
    double lp = numeric_loss(x, p, G, frozen_mask);
    vals[i] = saved - h;
    double lm = numeric_loss(x, p, G, frozen_mask);
    vals[i] = saved;
    double fd = (lp - lm) / (2.0 * h);
    double ad = grads.empty() ? 0.0 : grads[i];
    worst = std::max(worst, rel_err(ad, fd));
  }
  return worst;
}

}  // namespace

GradCheckReport midl_backward_check(const MidlParams& params, const Tensor& x,
                                    const GateConfig& gate, double min_gap) {
  if (gate.mode != GateConfig::Mode::Learned)
    throw ContractError("midl_backward_check: only the Learned gate mode is checked");
  int64_t B = x.rows(), d = params.d_out();
  int k = gate.resolve_k(d, 0);

  // Reference autodiff pass (eval forward: no dropout).
  Rng unused(0);
  Tape tape;
  MidlOutput fwd = midl_forward(tape, x, params, gate, /*training=*/false, unused);

  // Precondition: the k boundary must be comfortably separated in every row,
  // otherwise a finite-difference step could flip the mask.
  {
    auto ad = fwd.trace.alpha.data();
    std::vector<double> row(static_cast<size_t>(d));
    for (int64_t n = 0; n < B && k < d; ++n) {
      std::copy(ad.begin() + n * d, ad.begin() + (n + 1) * d, row.begin());
      std::sort(row.begin(), row.end(), std::greater<>());
      double gap = row[static_cast<size_t>(k - 1)] - row[static_cast<size_t>(k)];
      if (gap <= min_gap)
        throw ContractError(
            "midl_backward_check: gate scores nearly tied at the k boundary (row " +
            std::to_string(n) + ", gap " + std::to_string(gap) +
            "); resample the inputs");
    }
  }

  Rng gseed(0xC0FFEE);
  Tensor G = Tensor::zeros({B, d});
  for (double& v : G.data()) v = gseed.uniform(-1.0, 1.0);

  zero_grads(params.all());
  Tensor loss = sum(tape, mul(tape, fwd.output, G));
  tape.backward(loss);

  // Intermediates for the closed forms, recomputed without a tape.
  Tape off(false);
  Tensor h1 = matmul(off, x, params.f1_down);                               // [B x r]
  Tensor h2pre = add_row(off, matmul(off, x, params.f2_w1), params.f2_b1);  // [B x h]
  Tensor h2 = relu(off, h2pre);
  const Tensor& ahat = fwd.trace.alpha_hat;
  const Tensor& alpha = fwd.trace.alpha;
  const Tensor& mask = fwd.trace.mask;
  int64_t r = params.rank(), hd = params.hidden(), din = params.d_in();

  // dL/dz = G; the F1 path sees diag(alpha_hat) G, the F2 path diag(1-alpha_hat) G.
  Tensor g1 = Tensor::zeros({B, d});  // G * alpha_hat
  Tensor g2 = Tensor::zeros({B, d});  // G * (1 - alpha_hat)
  for (int64_t i = 0; i < B * d; ++i) {
    g1.data()[i] = G.data()[i] * ahat.data()[i];
    g2.data()[i] = G.data()[i] * (1.0 - ahat.data()[i]);
  }

  double worst_closed = 0.0;
  auto compare = [&](const Tensor& param, const Tensor& expected) {
    auto g = param.grad_if_allocated();
    auto e = expected.data();
    for (size_t i = 0; i < e.size(); ++i)
      worst_closed = std::max(worst_closed, rel_err(g.empty() ? 0.0 : g[i], e[i]));
  };

  {  // f1_up[rho,i] <- sum_n h1[n,rho] g1[n,i];  f1_bias[i] <- sum_n g1[n,i]
    Tensor d_up = Tensor::zeros({r, d});
    Tensor d_b = Tensor::zeros({d});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t i = 0; i < d; ++i) {
        double v = g1(n, i);
        d_b.data()[i] += v;
        for (int64_t rho = 0; rho < r; ++rho) d_up.data()[rho * d + i] += h1(n, rho) * v;
      }
    compare(params.f1_up, d_up);
    compare(params.f1_bias, d_b);

    // f1_down[j,rho] <- sum_n x[n,j] * sum_i f1_up[rho,i] g1[n,i]
    Tensor dh1 = Tensor::zeros({B, r});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t rho = 0; rho < r; ++rho) {
        double s = 0.0;
        for (int64_t i = 0; i < d; ++i) s += params.f1_up(rho, i) * g1(n, i);
        dh1.data()[n * r + rho] = s;
      }
    Tensor d_down = Tensor::zeros({din, r});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t j = 0; j < din; ++j)
        for (int64_t rho = 0; rho < r; ++rho)
          d_down.data()[j * r + rho] += x(n, j) * dh1(n, rho);
    compare(params.f1_down, d_down);
  }

  {  // F2 path mirrors with diag(1 - alpha_hat) and the ReLU indicator
    Tensor d_w2 = Tensor::zeros({hd, d});
    Tensor d_b2 = Tensor::zeros({d});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t i = 0; i < d; ++i) {
        double v = g2(n, i);
        d_b2.data()[i] += v;
        for (int64_t rho = 0; rho < hd; ++rho) d_w2.data()[rho * d + i] += h2(n, rho) * v;
      }
    compare(params.f2_w2, d_w2);
    compare(params.f2_b2, d_b2);

    Tensor dpre = Tensor::zeros({B, hd});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t rho = 0; rho < hd; ++rho) {
        if (h2pre(n, rho) <= 0.0) continue;
        double s = 0.0;
        for (int64_t i = 0; i < d; ++i) s += params.f2_w2(rho, i) * g2(n, i);
        dpre.data()[n * hd + rho] = s;
      }
    Tensor d_w1 = Tensor::zeros({din, hd});
    Tensor d_b1 = Tensor::zeros({hd});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t j = 0; j < din; ++j)
        for (int64_t rho = 0; rho < hd; ++rho)
          d_w1.data()[j * hd + rho] += x(n, j) * dpre(n, rho);
    for (int64_t n = 0; n < B; ++n)
      for (int64_t rho = 0; rho < hd; ++rho) d_b1.data()[rho] += dpre(n, rho);
    compare(params.f2_w1, d_w1);
    compare(params.f2_b1, d_b1);
  }

  {  // w_alpha[j,i] <- sum_n x[n,j] G[n,i] (F1-F2)[n,i] sigma'(u)[n,i]
     // full STE drops the mask factor; masked STE keeps it
    Tensor d_wa = Tensor::zeros({din, d});
    for (int64_t n = 0; n < B; ++n)
      for (int64_t i = 0; i < d; ++i) {
        double a = alpha(n, i);
        double v = G(n, i) * (fwd.f1_out(n, i) - fwd.f2_out(n, i)) * a * (1.0 - a);
        if (gate.ste == SteMode::Masked) v *= mask(n, i);
        for (int64_t j = 0; j < din; ++j) d_wa.data()[j * d + i] += x(n, j) * v;
      }
    compare(params.w_alpha, d_wa);
  }

  // Finite differences. F1/F2 parameters differentiate the true (masked)
  // forward; the gate path differentiates the straight-through surrogate:
  // mask dropped entirely under full STE, frozen under masked STE.
  GradCheckReport report;
  report.max_rel_err_closed_form = worst_closed;
  Tensor frozen = mask.detached_copy();
  double worst_fd = 0.0;
  for (const Tensor& t : {params.f1_down, params.f1_up, params.f1_bias, params.f2_w1,
                          params.f2_b1, params.f2_w2, params.f2_b2})
    worst_fd = std::max(worst_fd, max_fd_err(t, x, params, G, frozen));
  Tensor gate_mask = gate.ste == SteMode::Full ? Tensor() : frozen;
  worst_fd = std::max(worst_fd, max_fd_err(params.w_alpha, x, params, G, gate_mask));
  report.max_rel_err_fd = worst_fd;
  return report;
}

}  // namespace midl
