#pragma once

#include <optional>
#include <string>
#include <vector>

#include "midl/data.hpp"
#include "midl/layers.hpp"
#include "midl/metrics.hpp"

// Declarative experiment harness: an ExperimentConfig (JSON) names a dataset,
// a model, an optimizer, and an evaluation protocol; train() runs one seed
// end-to-end and writes config.json / metrics.csv / result.json / final.ckpt
// under <output_dir>/<experiment>/<seed>/. Defaults reproduce the reference
// protocol: Adam(lr 1e-3), batch 64, Top-k at 50% of the layer width,
// post-gate dropout 0.1.

namespace midl {

struct DatasetSpec {
  std::string name = "mnist";  // "mnist" | "synthetic"
  std::string mnist_dir = "data/mnist";
  bool test_split_for_eval = true;
  int64_t train_subset = 0;       // > 0: first N training rows
  int64_t test_subset = 0;        // > 0: first N test rows
  int stress_per_class = 0;       // > 0: overfit stress subset of the train split
  double noise_rate = 0.0;        // symmetric label noise on the train split
  std::optional<uint64_t> noise_seed;   // default: derived from the run seed
  std::optional<uint64_t> subset_seed;  // default: derived from the run seed
  // synthetic blobs
  int64_t synthetic_n = 2000;
  int64_t synthetic_d = 20;
  double synthetic_separation = 3.0;
  uint64_t synthetic_seed = 1234;
};

struct ModelSpec {
  std::vector<int64_t> widths{784, 256, 10};
  std::string hidden = "midl";  // "midl" | "dense" | "dropout"
  double dropout_p = 0.5;       // dropout-MLP baseline rate
  int64_t rank = 0;             // 0: ceil(d_in/2)
  int64_t f2_hidden = 0;        // 0: d_out
  GateConfig gate;
};

struct OptimizerSpec {
  std::string kind = "adam";
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct MetricsSpec {
  bool smi = false;
  int smi_projections = 128;
  int smi_bins = 16;
  int latency_repeats = 0;  // 0: skip the latency probe (latency_ms = 0)
  double anr_tau = 0.01;
  int eval_every = 1;  // test evaluation every N epochs (final epoch always)
};

struct ExperimentConfig {
  std::string experiment = "experiment";
  DatasetSpec dataset;
  ModelSpec model;
  OptimizerSpec optimizer;
  int64_t batch_size = 64;
  int epochs = 5;  // 0 = evaluate-only (metrics of the initial weights)
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "runs";
  MetricsSpec metrics;
  std::optional<uint64_t> shuffle_seed;  // default: derived from the run seed

  static ExperimentConfig from_json_file(const std::string& path);
  static ExperimentConfig from_json_string(const std::string& text);
  std::string to_json() const;  // round-trips through from_json_string
  void validate() const;        // ConfigError on out-of-range fields
};

// ---- model ------------------------------------------------------------------

class Model {
 public:
  Model(const ModelSpec& spec, Rng& init_rng);

  // Logits for a batch. Collects gate traces (one per MID-L layer) and the
  // first hidden block's output when the caller passes sinks.
  Tensor forward(Tape& tape, const Tensor& x, bool training, Rng& noise_rng,
                 int epoch, std::vector<GateTrace>* traces = nullptr,
                 Tensor* first_hidden = nullptr) const;

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<LayerDesc> layer_descs() const;
  void load_parameters(const std::vector<std::pair<std::string, Tensor>>& named);

  const ModelSpec& spec() const { return spec_; }
  // Shallow copy sharing parameter storage but gating with `mode` -- lets a
  // trained backbone be re-evaluated under a different selection rule.
  Model with_gate_mode(GateConfig::Mode mode) const;

 private:
  struct Layer {
    enum class Kind { Fc, DropoutFc, Midl };
    Kind kind = Kind::Fc;
    MidlParams midl;
    Tensor w, b;
    Activation act = Activation::Identity;
    double dropout_p = 0.0;
  };
  ModelSpec spec_;
  std::vector<Layer> layers_;
};

// ---- optimizer ----------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  int64_t t = 0;
};

// One Adam update from the gradients currently stored on the parameters.
// State tensors are allocated lazily on first call; a parameter-list shape
// change afterwards is a ContractError.
void adam_step(const std::vector<Tensor>& params, AdamState& state,
               const OptimizerSpec& opt);

// ---- runs ---------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  MetricsRecord train;  // accumulated over the training pass (smi/latency 0)
  bool has_test = false;
  MetricsRecord test;
  double train_loss = 0.0;
};

struct RunResult {
  uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  MetricsRecord final_test;
  double wall_clock_s = 0.0;
  // per-neuron diagnostics of the first gated layer (when metrics.smi is on)
  std::vector<double> neuron_activation_freq;
  std::vector<double> neuron_smi;
  std::string run_dir;  // empty when outputs were not written
};

// Train one seed; when write_outputs, emits the run directory files
// (config.json, metrics.csv, result.json, final.ckpt) atomically.
RunResult train(const ExperimentConfig& config, uint64_t seed, bool write_outputs = true);

// As train(), but also hands back the live model and datasets for analysis.
struct TrainedRun {
  RunResult result;
  Model model;
  Dataset train_set;
  Dataset test_set;
};
TrainedRun train_with_model(const ExperimentConfig& config, uint64_t seed,
                            bool write_outputs = true);

// All seeds in config order.
std::vector<RunResult> run_all_seeds(const ExperimentConfig& config,
                                     bool write_outputs = true);

MetricsRecord evaluate_model(const Model& model, const Dataset& test,
                             const ExperimentConfig& config, uint64_t seed, int epoch);

// Materialize the train or test split an ExperimentConfig describes.
Dataset load_split(const ExperimentConfig& config, bool train_split, uint64_t run_seed);

// ---- sweeps --------------------------------------------------------------------
// Variant vocabulary: "midl", "f1_only", "f2_only", "fixed_alpha:<v>",
// "random_topk", "gumbel", "dense", "dropout".

ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& variant);

struct SweepRow {
  std::string variant;
  double accuracy_mean = 0, accuracy_std = 0;
  double macro_f1_mean = 0, macro_f1_std = 0;
  double anr_mean = 0, anr_std = 0;
  double smi_mean = 0, smi_std = 0;
};

// Runs every variant over all config seeds; rows keep the given order. When
// csv_path is nonempty the table is also written there.
std::vector<SweepRow> sweep(const ExperimentConfig& base,
                            const std::vector<std::string>& variants,
                            const std::string& csv_path = "");
std::string sweep_csv(const std::vector<SweepRow>& rows);

// ---- plots ---------------------------------------------------------------------

// Scatter of per-neuron activation frequency (x, in [0,1]) vs per-neuron
// mutual information with the labels (y, nats) as a standalone SVG 1.1
// document. Deterministic output; empty input draws the axes alone.
std::string smi_scatter_svg(const std::vector<double>& activation_freq,
                            const std::vector<double>& neuron_smi);
void emit_smi_scatter(const std::vector<double>& activation_freq,
                      const std::vector<double>& neuron_smi, const std::string& path);

}  // namespace midl
