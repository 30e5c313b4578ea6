#pragma once

#include <string>
#include <utility>
#include <vector>

#include "midl/tensor.hpp"

// Layers and gates. The centerpiece is the MID-L block: two parallel paths
// through the same width -- F1, a factored linear map (down-project to a low
// rank, back up, add bias), and F2, a two-layer ReLU MLP -- blended per input
// and per neuron by a learned sparse gate:
//
//   alpha     = sigmoid(x . w_alpha)            gate scores in (0,1)
//   alpha_hat = alpha * topk_mask(alpha, k)     per-row Top-k sparsification
//   z         = alpha_hat * F1(x) + (1 - alpha_hat) * F2(x)
//
// The Top-k mask is non-differentiable; training uses a straight-through
// estimator (SteMode). During training, inverted dropout is applied to
// alpha_hat before the interpolation.

namespace midl {

enum class Activation { Identity, Relu, Sigmoid };

// phi(x . w^T + b) with w in [d_out x d_in] orientation.
Tensor fc_forward(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                  Activation act = Activation::Identity);

// FC with inverted dropout (keep-prob scaling at train time) applied to the
// *input* activations; eval mode is exactly fc_forward.
Tensor dropout_fc_forward(Tape& tape, const Tensor& x, const Tensor& w,
                          const Tensor& b, double p, bool training, Rng& rng,
                          Activation act = Activation::Identity);

// Binary mask selecting the k largest entries of each row; ties at the
// boundary value go to the lowest index. k must lie in [1, cols].
Tensor topk_mask(const Tensor& values, int k);

// Mask with exactly k ones per row, positions uniform without replacement.
Tensor random_topk_mask(int64_t batch, int64_t d, int k, Rng& rng);

// Binary-concrete gate sigma((x.w_alpha + G1 - G2) / tau) at train time,
// where G1, G2 are iid Gumbel(0,1); at eval the deterministic
// zero-temperature limit 1[x.w_alpha > 0].
Tensor gumbel_gate(Tape& tape, const Tensor& x, const Tensor& w_alpha,
                   double temperature, bool training, Rng& rng);
// Same with caller-supplied noise = G1 - G2 (zero noise makes it
// sigma(x.w_alpha / tau) exactly); seam for tests.
Tensor gumbel_gate_with_noise(Tape& tape, const Tensor& x, const Tensor& w_alpha,
                              double temperature, const Tensor& noise);

// Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).
Tensor dropout_mask(Shape shape, double p, Rng& rng);

// ---- MID-L block -----------------------------------------------------------

struct KSchedule {
  int count = 0;              // > 0: explicit neuron count, overrides fraction
  double fraction = 0.5;      // of d_out, used when count == 0
  double end_fraction = -1.0; // >= 0: linear anneal from `fraction` to this
  int anneal_epochs = 0;      // epochs over which the anneal completes
};

struct GateConfig {
  enum class Mode { Learned, RandomTopk, FixedAlpha, Gumbel };
  Mode mode = Mode::Learned;
  KSchedule k;
  SteMode ste = SteMode::Full;
  double post_gate_dropout_p = 0.1;
  double fixed_alpha = 0.5;      // FixedAlpha mode only
  double gumbel_temperature = 1.0;

  // Effective k for this epoch; ConfigError if the schedule leaves [1, d_out].
  int resolve_k(int64_t d_out, int epoch) const;
};

struct MidlParams {
  Tensor f1_down;  // [d_in x r]
  Tensor f1_up;    // [r x d_out]
  Tensor f1_bias;  // [d_out]
  Tensor f2_w1;    // [d_in x h]
  Tensor f2_b1;    // [h]
  Tensor f2_w2;    // [h x d_out]
  Tensor f2_b2;    // [d_out]
  Tensor w_alpha;  // [d_in x d_out], no bias

  // rank <= 0 defaults to ceil(d_in / 2); hidden <= 0 defaults to d_out.
  // Weights U[-1/sqrt(fan_in), ...], biases zero, all marked trainable.
  static MidlParams init(int64_t d_in, int64_t d_out, int64_t rank, int64_t hidden,
                         Rng& rng);

  int64_t d_in() const { return f1_down.rows(); }
  int64_t d_out() const { return f1_up.cols(); }
  int64_t rank() const { return f1_down.cols(); }
  int64_t hidden() const { return f2_w1.cols(); }

  std::vector<Tensor> all() const;
  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const;
};

// Per-batch gate diagnostics. alpha_hat is pre-dropout; in Learned and
// RandomTopk modes alpha_hat == alpha * mask holds elementwise and every mask
// row has exactly k ones. FixedAlpha/Gumbel apply no Top-k and report k = 0.
struct GateTrace {
  Tensor alpha;
  Tensor mask;
  Tensor alpha_hat;
  int k = 0;
};

struct MidlOutput {
  Tensor output;        // [B x d_out]
  GateTrace trace;
  Tensor f1_out;        // path outputs, when the mode computes them
  Tensor f2_out;
  Tensor gate_applied;  // alpha_hat after post-gate dropout (== alpha_hat at eval)
};

MidlOutput midl_forward(Tape& tape, const Tensor& x, const MidlParams& params,
                        const GateConfig& gate, bool training, Rng& rng,
                        int epoch = 0);

// Compares autodiff gradients of a MID-L block (Learned mode, full STE, eval
// forward) against (a) hand-composed closed forms built from the forward
// intermediates and (b) central finite differences of the mask-frozen
// surrogate z = alpha*F1 + (1-alpha)*F2 for the gate path. Requires the
// per-row gap between the k-th and (k+1)-th gate scores to exceed `min_gap`
// so the mask is locally constant.
struct GradCheckReport {
  double max_rel_err_closed_form = 0.0;
  double max_rel_err_fd = 0.0;
};
GradCheckReport midl_backward_check(const MidlParams& params, const Tensor& x,
                                    const GateConfig& gate, double min_gap = 1e-3);

}  // namespace midl
