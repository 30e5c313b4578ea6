#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "midl/layers.hpp"
#include "midl/tensor.hpp"

// Evaluation metrics: gate sparsity (ANR), analytic FLOP counts, sliced
// mutual information, classification quality, calibration, and a wall-clock
// latency probe.

namespace midl {

// Active-neuron ratio: fraction of (sample, neuron) gate values alpha_hat
// strictly above tau. With tau = 0 and a Top-k gate this is exactly k/d.
double active_neuron_ratio(const GateTrace& trace, double tau = 0.01);

// ---- analytic FLOPs ---------------------------------------------------------
// Per-sample counts, fixed convention: a [m]->[n] matmul costs 2mn, a bias
// add n, an activation n. A MID-L block pays every path densely:
//   F1: 2*d_in*r + 2*r*d_out + d_out
//   F2: 2*d_in*h + h + h(relu) + 2*h*d_out + d_out
//   gate: 2*d_in*d_out + d_out (sigmoid)        interpolation: 4*d_out
// The effective count scales the F1 term by ANR and the F2 term by 1 - ANR;
// gate and interpolation are always paid.

struct LayerDesc {
  enum class Kind { Fc, Midl };
  Kind kind = Kind::Fc;
  int64_t d_in = 0;
  int64_t d_out = 0;
  int64_t rank = 0;         // Midl only
  int64_t hidden = 0;       // Midl only
  bool activation = false;  // trailing activation counted with the layer
};

struct FlopsCount {
  uint64_t dense = 0;
  uint64_t effective = 0;
};

// anr < 0 means "no measurement": effective == dense.
FlopsCount flops_count(const std::vector<LayerDesc>& layers, double anr = -1.0);

// ---- sliced mutual information ----------------------------------------------
// Mean over random unit projections of the plug-in discrete mutual
// information (nats) between the binned projection and the labels, with
// equal-width bins spanning [min, max] of each projection.

struct SmiConfig {
  int num_projections = 128;
  int num_bins = 16;
  uint64_t projection_seed = 0;
};

double sliced_mutual_information(const Tensor& features, const std::vector<int>& labels,
                                 const SmiConfig& cfg = {});

// The 1-D building block, exposed for per-neuron diagnostics.
double binned_mutual_information(const std::vector<double>& values,
                                 const std::vector<int>& labels, int num_bins);

// ---- classification / calibration --------------------------------------------

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;  // classes absent from labels AND predictions excluded
};
ClassificationMetrics classification_metrics(const std::vector<int>& predictions,
                                             const std::vector<int>& labels);

struct CalibrationMetrics {
  double ece = 0.0;    // equal-width bins over max-prob confidence
  double brier = 0.0;  // multiclass, in [0, 2]
};
CalibrationMetrics calibration_metrics(const Tensor& probabilities,
                                       const std::vector<int>& labels,
                                       int num_bins = 15);

// ---- latency -----------------------------------------------------------------

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::vector<double> samples_ms;
};

// Runs `op` once as warmup, then `repeats` timed runs (steady_clock).
LatencyStats latency_probe(const std::function<void()>& op, int repeats);

// ---- per-run record ------------------------------------------------------------

struct MetricsRecord {
  uint64_t seed = 0;
  int epoch = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double anr = 0.0;
  uint64_t flops_dense = 0;
  uint64_t flops_effective = 0;
  double latency_ms = 0.0;
  double smi_nats = 0.0;
  double ece = 0.0;
  double brier = 0.0;

  static std::string csv_header();  // fixed column order
  std::string csv_row() const;      // %.17g, lossless and byte-stable
};

}  // namespace midl
