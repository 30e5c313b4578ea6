#include "midl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include <nlohmann/json.hpp>

#include "midl/checkpoint.hpp"

namespace midl {

using nlohmann::json;

// ---- config <-> json ---------------------------------------------------------

namespace {

GateConfig::Mode gate_mode_from_string(const std::string& s) {
  if (s == "learned") return GateConfig::Mode::Learned;
  if (s == "random_topk") return GateConfig::Mode::RandomTopk;
  if (s == "fixed_alpha") return GateConfig::Mode::FixedAlpha;
  if (s == "gumbel") return GateConfig::Mode::Gumbel;
  throw ConfigError("unknown gate mode \"" + s + "\"");
}

std::string gate_mode_to_string(GateConfig::Mode m) {
  switch (m) {
    case GateConfig::Mode::Learned: return "learned";
    case GateConfig::Mode::RandomTopk: return "random_topk";
    case GateConfig::Mode::FixedAlpha: return "fixed_alpha";
    case GateConfig::Mode::Gumbel: return "gumbel";
  }
  throw ContractError("unknown gate mode value");
}

GateConfig gate_from_json(const json& j) {
  GateConfig g;
  g.mode = gate_mode_from_string(j.value("mode", "learned"));
  g.k.count = j.value("k_count", 0);
  g.k.fraction = j.value("k_fraction", 0.5);
  g.k.end_fraction = j.value("k_end_fraction", -1.0);
  g.k.anneal_epochs = j.value("k_anneal_epochs", 0);
  std::string ste = j.value("ste", "full");
  if (ste == "full") g.ste = SteMode::Full;
  else if (ste == "masked") g.ste = SteMode::Masked;
  else throw ConfigError("unknown ste mode \"" + ste + "\"");
  g.post_gate_dropout_p = j.value("post_gate_dropout", 0.1);
  g.fixed_alpha = j.value("fixed_alpha", 0.5);
  g.gumbel_temperature = j.value("gumbel_temperature", 1.0);
  return g;
}

json gate_to_json(const GateConfig& g) {
  return json{{"mode", gate_mode_to_string(g.mode)},
              {"k_count", g.k.count},
              {"k_fraction", g.k.fraction},
              {"k_end_fraction", g.k.end_fraction},
              {"k_anneal_epochs", g.k.anneal_epochs},
              {"ste", g.ste == SteMode::Full ? "full" : "masked"},
              {"post_gate_dropout", g.post_gate_dropout_p},
              {"fixed_alpha", g.fixed_alpha},
              {"gumbel_temperature", g.gumbel_temperature}};
}

template <class T>
std::optional<T> opt_from_json(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.experiment = j.value("experiment", c.experiment);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      c.dataset.name = d.value("name", c.dataset.name);
      c.dataset.mnist_dir = d.value("mnist_dir", c.dataset.mnist_dir);
      c.dataset.test_split_for_eval =
          d.value("test_split_for_eval", c.dataset.test_split_for_eval);
      c.dataset.train_subset = d.value("train_subset", c.dataset.train_subset);
      c.dataset.test_subset = d.value("test_subset", c.dataset.test_subset);
      c.dataset.stress_per_class = d.value("stress_per_class", c.dataset.stress_per_class);
      c.dataset.noise_rate = d.value("noise_rate", c.dataset.noise_rate);
      c.dataset.noise_seed = opt_from_json<uint64_t>(d, "noise_seed");
      c.dataset.subset_seed = opt_from_json<uint64_t>(d, "subset_seed");
      c.dataset.synthetic_n = d.value("synthetic_n", c.dataset.synthetic_n);
      c.dataset.synthetic_d = d.value("synthetic_d", c.dataset.synthetic_d);
      c.dataset.synthetic_separation =
          d.value("synthetic_separation", c.dataset.synthetic_separation);
      c.dataset.synthetic_seed = d.value("synthetic_seed", c.dataset.synthetic_seed);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      if (m.contains("widths")) c.model.widths = m.at("widths").get<std::vector<int64_t>>();
      c.model.hidden = m.value("hidden", c.model.hidden);
      c.model.dropout_p = m.value("dropout_p", c.model.dropout_p);
      c.model.rank = m.value("rank", c.model.rank);
      c.model.f2_hidden = m.value("f2_hidden", c.model.f2_hidden);
      if (m.contains("gate")) c.model.gate = gate_from_json(m.at("gate"));
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      c.optimizer.kind = o.value("kind", c.optimizer.kind);
      c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.epsilon = o.value("epsilon", c.optimizer.epsilon);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("metrics")) {
      const json& m = j.at("metrics");
      c.metrics.smi = m.value("smi", c.metrics.smi);
      c.metrics.smi_projections = m.value("smi_projections", c.metrics.smi_projections);
      c.metrics.smi_bins = m.value("smi_bins", c.metrics.smi_bins);
      c.metrics.latency_repeats = m.value("latency_repeats", c.metrics.latency_repeats);
      c.metrics.anr_tau = m.value("anr_tau", c.metrics.anr_tau);
      c.metrics.eval_every = m.value("eval_every", c.metrics.eval_every);
    }
    c.shuffle_seed = opt_from_json<uint64_t>(j, "shuffle_seed");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  return from_json_string(read_file(path));
}

std::string ExperimentConfig::to_json() const {
  json j{
      {"experiment", experiment},
      {"dataset",
       {{"name", dataset.name},
        {"mnist_dir", dataset.mnist_dir},
        {"test_split_for_eval", dataset.test_split_for_eval},
        {"train_subset", dataset.train_subset},
        {"test_subset", dataset.test_subset},
        {"stress_per_class", dataset.stress_per_class},
        {"noise_rate", dataset.noise_rate},
        {"noise_seed", dataset.noise_seed ? json(*dataset.noise_seed) : json(nullptr)},
        {"subset_seed", dataset.subset_seed ? json(*dataset.subset_seed) : json(nullptr)},
        {"synthetic_n", dataset.synthetic_n},
        {"synthetic_d", dataset.synthetic_d},
        {"synthetic_separation", dataset.synthetic_separation},
        {"synthetic_seed", dataset.synthetic_seed}}},
      {"model",
       {{"widths", model.widths},
        {"hidden", model.hidden},
        {"dropout_p", model.dropout_p},
        {"rank", model.rank},
        {"f2_hidden", model.f2_hidden},
        {"gate", gate_to_json(model.gate)}}},
      {"optimizer",
       {{"kind", optimizer.kind},
        {"learning_rate", optimizer.learning_rate},
        {"beta1", optimizer.beta1},
        {"beta2", optimizer.beta2},
        {"epsilon", optimizer.epsilon}}},
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"seeds", seeds},
      {"output_dir", output_dir},
      {"metrics",
       {{"smi", metrics.smi},
        {"smi_projections", metrics.smi_projections},
        {"smi_bins", metrics.smi_bins},
        {"latency_repeats", metrics.latency_repeats},
        {"anr_tau", metrics.anr_tau},
        {"eval_every", metrics.eval_every}}},
      {"shuffle_seed", shuffle_seed ? json(*shuffle_seed) : json(nullptr)}};
  return j.dump(2) + "\n";
}

void ExperimentConfig::validate() const {
  if (experiment.empty()) throw ConfigError("experiment name must be nonempty");
  if (dataset.name != "mnist" && dataset.name != "synthetic")
    throw ConfigError("unknown dataset \"" + dataset.name + "\"");
  if (dataset.noise_rate < 0.0 || dataset.noise_rate > 1.0)
    throw ConfigError("noise_rate outside [0, 1]");
  if (dataset.train_subset < 0 || dataset.test_subset < 0 || dataset.stress_per_class < 0)
    throw ConfigError("dataset subset sizes must be >= 0");
  if (model.widths.size() < 2) throw ConfigError("model widths need input and output");
  for (int64_t w : model.widths)
    if (w <= 0) throw ConfigError("model widths must be positive");
  if (model.hidden != "midl" && model.hidden != "dense" && model.hidden != "dropout")
    throw ConfigError("unknown hidden kind \"" + model.hidden + "\"");
  if (model.dropout_p < 0.0 || model.dropout_p >= 1.0)
    throw ConfigError("dropout_p outside [0, 1)");
  if (model.gate.post_gate_dropout_p < 0.0 || model.gate.post_gate_dropout_p >= 1.0)
    throw ConfigError("post_gate_dropout outside [0, 1)");
  if (model.gate.fixed_alpha < 0.0 || model.gate.fixed_alpha > 1.0)
    throw ConfigError("fixed_alpha outside [0, 1]");
  if (model.gate.gumbel_temperature <= 0.0)
    throw ConfigError("gumbel_temperature must be positive");
  if (optimizer.kind != "adam")
    throw ConfigError("unknown optimizer \"" + optimizer.kind + "\"");
  if (optimizer.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
      optimizer.beta2 >= 1.0)
    throw ConfigError("adam betas outside [0, 1)");
  if (optimizer.epsilon <= 0.0) throw ConfigError("adam epsilon must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0 (0 = evaluate-only)");
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (metrics.smi_projections < 1) throw ConfigError("smi_projections must be >= 1");
  if (metrics.smi_bins < 2) throw ConfigError("smi_bins must be >= 2");
  if (metrics.latency_repeats < 0) throw ConfigError("latency_repeats must be >= 0");
  if (metrics.anr_tau < 0.0) throw ConfigError("anr_tau must be >= 0");
  if (metrics.eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

// ---- model ---------------------------------------------------------------------

Model::Model(const ModelSpec& spec, Rng& init_rng) : spec_(spec) {
  size_t L = spec.widths.size();
  if (L < 2) throw ConfigError("model needs at least input and output widths");
  for (size_t i = 0; i + 1 < L; ++i) {
    bool is_output = i + 2 == L;
    int64_t d_in = spec.widths[i], d_out = spec.widths[i + 1];
    Layer layer;
    layer.act = is_output ? Activation::Identity : Activation::Relu;
    if (!is_output && spec.hidden == "midl") {
      layer.kind = Layer::Kind::Midl;
      layer.midl = MidlParams::init(d_in, d_out, spec.rank, spec.f2_hidden, init_rng);
    } else if (!is_output && spec.hidden == "dropout" && i > 0) {
      // dropout acts between layers: every FC after the first drops its input
      layer.kind = Layer::Kind::DropoutFc;
      layer.dropout_p = spec.dropout_p;
      layer.w = init_uniform_fanin({d_out, d_in}, d_in, init_rng);
      layer.b = Tensor::zeros({d_out});
    } else {
      layer.kind = Layer::Kind::Fc;
      layer.w = init_uniform_fanin({d_out, d_in}, d_in, init_rng);
      layer.b = Tensor::zeros({d_out});
    }
    if (is_output && spec.hidden == "dropout") {
      layer.kind = Layer::Kind::DropoutFc;
      layer.dropout_p = spec.dropout_p;
    }
    if (layer.kind != Layer::Kind::Midl) {
      layer.w.set_requires_grad(true);
      layer.b.set_requires_grad(true);
    }
    layers_.push_back(std::move(layer));
  }
}

Tensor Model::forward(Tape& tape, const Tensor& x, bool training, Rng& noise_rng,
                      int epoch, std::vector<GateTrace>* traces,
                      Tensor* first_hidden) const {
  Tensor h = x;
  bool first = true;
  for (const Layer& layer : layers_) {
    Tensor z;
    switch (layer.kind) {
      case Layer::Kind::Fc:
        z = fc_forward(tape, h, layer.w, layer.b);
        break;
      case Layer::Kind::DropoutFc:
        z = dropout_fc_forward(tape, h, layer.w, layer.b, layer.dropout_p, training,
                               noise_rng);
        break;
      case Layer::Kind::Midl: {
        MidlOutput out =
            midl_forward(tape, h, layer.midl, spec_.gate, training, noise_rng, epoch);
        if (traces) traces->push_back(out.trace);
        z = out.output;
        break;
      }
    }
    if (first && first_hidden) *first_hidden = z;  // pre-activation block output
    first = false;
    h = layer.act == Activation::Relu ? relu(tape, z) : z;
  }
  return h;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const Layer& l : layers_) {
    if (l.kind == Layer::Kind::Midl) {
      auto p = l.midl.all();
      out.insert(out.end(), p.begin(), p.end());
    } else {
      out.push_back(l.w);
      out.push_back(l.b);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    std::string prefix = "layer" + std::to_string(i);
    if (l.kind == Layer::Kind::Midl) {
      auto p = l.midl.named(prefix);
      out.insert(out.end(), p.begin(), p.end());
    } else {
      out.emplace_back(prefix + ".w", l.w);
      out.emplace_back(prefix + ".b", l.b);
    }
  }
  return out;
}

std::vector<LayerDesc> Model::layer_descs() const {
  std::vector<LayerDesc> out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    LayerDesc d;
    d.activation = l.act == Activation::Relu;
    if (l.kind == Layer::Kind::Midl) {
      d.kind = LayerDesc::Kind::Midl;
      d.d_in = l.midl.d_in();
      d.d_out = l.midl.d_out();
      d.rank = l.midl.rank();
      d.hidden = l.midl.hidden();
    } else {
      d.kind = LayerDesc::Kind::Fc;  // dropout costs nothing at inference
      d.d_in = l.w.cols();
      d.d_out = l.w.rows();
    }
    out.push_back(d);
  }
  return out;
}

void Model::load_parameters(const std::vector<std::pair<std::string, Tensor>>& named) {
  auto mine = named_parameters();
  if (named.size() != mine.size())
    throw DataError("checkpoint has " + std::to_string(named.size()) +
                    " tensors, model expects " + std::to_string(mine.size()));
  for (auto& [name, mine_t] : mine) {
    auto it = std::find_if(named.begin(), named.end(),
                           [&](const auto& kv) { return kv.first == name; });
    if (it == named.end()) throw DataError("checkpoint is missing tensor \"" + name + "\"");
    if (it->second.shape() != mine_t.shape())
      throw DataError("checkpoint tensor \"" + name + "\" has shape " +
                      shape_str(it->second.shape()) + ", model expects " +
                      shape_str(mine_t.shape()));
    Tensor dst = mine_t;  // shared storage
    std::copy_n(it->second.data().data(), it->second.numel(), dst.data().data());
  }
}

Model Model::with_gate_mode(GateConfig::Mode mode) const {
  Model copy = *this;  // layers share parameter storage
  copy.spec_.gate.mode = mode;
  return copy;
}

// ---- optimizer ------------------------------------------------------------------

void adam_step(const std::vector<Tensor>& params, AdamState& state,
               const OptimizerSpec& opt) {
  if (opt.kind != "adam") throw ConfigError("unknown optimizer \"" + opt.kind + "\"");
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.push_back(Tensor::zeros(p.shape()));
      state.v.push_back(Tensor::zeros(p.shape()));
    }
  }
  if (state.m.size() != params.size())
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " slots for " + std::to_string(params.size()) + " parameters");
  state.t += 1;
  double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    if (p.shape() != state.m[i].shape())
      throw ContractError("adam_step: parameter " + std::to_string(i) +
                          " shape changed since state was created");
    auto pd = p.data();
    auto g = p.grad_if_allocated();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (size_t k = 0; k < pd.size(); ++k) {
      double gk = g.empty() ? 0.0 : g[k];
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      pd[k] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon);
    }
  }
}

// ---- data plumbing -----------------------------------------------------------------

Dataset load_split(const ExperimentConfig& config, bool train_split, uint64_t run_seed) {
  const DatasetSpec& d = config.dataset;
  if (!train_split && !d.test_split_for_eval)
    return load_split(config, true, run_seed);  // evaluate on the training data
  Dataset ds;
  if (d.name == "mnist") {
    std::string img = train_split ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
    std::string lbl = train_split ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
    ds = load_mnist_idx(d.mnist_dir + "/" + img, d.mnist_dir + "/" + lbl);
  } else if (d.name == "synthetic") {
    uint64_t seed =
        train_split ? d.synthetic_seed : derive_seed(d.synthetic_seed, "test-split");
    ds = synthetic_two_gaussians(d.synthetic_n, d.synthetic_d, d.synthetic_separation,
                                 seed);
  } else {
    throw ConfigError("unknown dataset \"" + d.name + "\"");
  }
  if (train_split) {
    if (d.train_subset > 0) ds = head_subset(ds, d.train_subset);
    if (d.stress_per_class > 0)
      ds = overfit_stress_subset(ds, d.stress_per_class,
                                 d.subset_seed.value_or(derive_seed(run_seed, "subset")));
    if (d.noise_rate > 0.0)
      ds = inject_symmetric_noise(ds, d.noise_rate,
                                  d.noise_seed.value_or(derive_seed(run_seed, "noise-inject")));
  } else if (d.test_subset > 0) {
    ds = head_subset(ds, d.test_subset);
  }
  return ds;
}

// ---- evaluation ----------------------------------------------------------------------

namespace {

struct EvalSinks {
  std::vector<double>* neuron_freq = nullptr;
  std::vector<double>* neuron_smi = nullptr;
};

MetricsRecord evaluate_impl(const Model& model, const Dataset& test,
                            const ExperimentConfig& config, uint64_t seed, int epoch,
                            const EvalSinks& sinks) {
  if (test.size() == 0) throw DataError("evaluate: empty test set");
  const MetricsSpec& ms = config.metrics;
  Rng eval_rng(derive_seed(seed, "eval-noise"));
  int64_t bs = config.batch_size;
  int64_t n = test.size(), dim = test.dim();

  std::vector<int> preds, labels;
  preds.reserve(static_cast<size_t>(n));
  std::vector<double> probs_buf;
  int64_t C = 0;

  int64_t anr_active = 0, anr_total = 0;
  Tensor features;  // masked first-hidden block output, built when smi is on
  int64_t hidden_d = 0, feat_row = 0;
  std::vector<int64_t> freq_active;

  auto fd = test.features.data();
  for (int64_t start = 0; start < n; start += bs) {
    int64_t take = std::min(bs, n - start);
    Tensor x = Tensor::zeros({take, dim});
    std::copy_n(fd.data() + start * dim, take * dim, x.data().data());
    std::vector<int> y(test.labels.begin() + start, test.labels.begin() + start + take);

    Tape off(false);
    std::vector<GateTrace> traces;
    Tensor hidden;
    Tensor logits = model.forward(off, x, false, eval_rng, epoch, &traces,
                                  ms.smi ? &hidden : nullptr);
    if (C == 0) {
      C = logits.cols();
      probs_buf.reserve(static_cast<size_t>(n * C));
    }
    Tensor probs = softmax_rows(logits);
    auto pd = probs.data();
    probs_buf.insert(probs_buf.end(), pd.begin(), pd.end());
    for (int64_t i = 0; i < take; ++i) {
      const double* row = logits.data().data() + i * C;
      int arg = 0;
      for (int64_t c = 1; c < C; ++c)
        if (row[c] > row[arg]) arg = static_cast<int>(c);
      preds.push_back(arg);
    }
    labels.insert(labels.end(), y.begin(), y.end());

    for (const GateTrace& tr : traces) {
      auto a = tr.alpha_hat.data();
      for (double v : a) anr_active += v > ms.anr_tau ? 1 : 0;
      anr_total += static_cast<int64_t>(a.size());
    }

    if (ms.smi) {
      if (!features.defined()) {
        hidden_d = hidden.cols();
        features = Tensor::zeros({n, hidden_d});
        freq_active.assign(static_cast<size_t>(hidden_d), 0);
      }
      // gate the representation: unselected neurons contribute zero
      auto hd = hidden.data();
      auto out = features.data();
      const GateTrace* tr = traces.empty() ? nullptr : &traces.front();
      for (int64_t i = 0; i < take; ++i) {
        for (int64_t j = 0; j < hidden_d; ++j) {
          double mask = 1.0, gate = 1.0;
          if (tr) {
            mask = tr->mask(i, j);
            gate = tr->alpha_hat(i, j);
          }
          out[(feat_row + i) * hidden_d + j] = hd[i * hidden_d + j] * mask;
          if (gate > ms.anr_tau) freq_active[static_cast<size_t>(j)] += 1;
        }
      }
      feat_row += take;
    }
  }

  MetricsRecord rec;
  rec.seed = seed;
  rec.epoch = epoch;
  auto cls = classification_metrics(preds, labels);
  rec.accuracy = cls.accuracy;
  rec.macro_f1 = cls.macro_f1;
  auto cal = calibration_metrics(Tensor::from_data({n, C}, std::move(probs_buf)), labels);
  rec.ece = cal.ece;
  rec.brier = cal.brier;
  rec.anr = anr_total > 0
                ? static_cast<double>(anr_active) / static_cast<double>(anr_total)
                : 1.0;  // ungated models: every neuron always participates
  auto fl = flops_count(model.layer_descs(), anr_total > 0 ? rec.anr : -1.0);
  rec.flops_dense = fl.dense;
  rec.flops_effective = fl.effective;

  if (ms.smi) {
    rec.smi_nats = sliced_mutual_information(
        features, labels, {ms.smi_projections, ms.smi_bins, seed});
    if (sinks.neuron_freq) {
      sinks.neuron_freq->assign(static_cast<size_t>(hidden_d), 0.0);
      for (int64_t j = 0; j < hidden_d; ++j)
        (*sinks.neuron_freq)[static_cast<size_t>(j)] =
            static_cast<double>(freq_active[static_cast<size_t>(j)]) /
            static_cast<double>(n);
    }
    if (sinks.neuron_smi) {
      sinks.neuron_smi->assign(static_cast<size_t>(hidden_d), 0.0);
      std::vector<double> col(static_cast<size_t>(n));
      auto fdta = features.data();
      for (int64_t j = 0; j < hidden_d; ++j) {
        for (int64_t i = 0; i < n; ++i) col[static_cast<size_t>(i)] = fdta[i * hidden_d + j];
        (*sinks.neuron_smi)[static_cast<size_t>(j)] =
            binned_mutual_information(col, labels, ms.smi_bins);
      }
    }
  }

  if (ms.latency_repeats > 0) {
    int64_t take = std::min(bs, n);
    Tensor x = Tensor::zeros({take, dim});
    std::copy_n(fd.data(), take * dim, x.data().data());
    Rng lat_rng(derive_seed(seed, "latency"));
    auto stats = latency_probe(
        [&] {
          Tape off(false);
          model.forward(off, x, false, lat_rng, epoch);
        },
        ms.latency_repeats);
    rec.latency_ms = stats.mean_ms;
  }
  return rec;
}

}  // namespace

MetricsRecord evaluate_model(const Model& model, const Dataset& test,
                             const ExperimentConfig& config, uint64_t seed, int epoch) {
  return evaluate_impl(model, test, config, seed, epoch, {});
}

// ---- training -------------------------------------------------------------------------

namespace {

json record_to_json(const MetricsRecord& r) {
  return json{{"seed", r.seed},
              {"epoch", r.epoch},
              {"accuracy", r.accuracy},
              {"macro_f1", r.macro_f1},
              {"anr", r.anr},
              {"flops_dense", r.flops_dense},
              {"flops_effective", r.flops_effective},
              {"latency_ms", r.latency_ms},
              {"smi_nats", r.smi_nats},
              {"ece", r.ece},
              {"brier", r.brier}};
}

void write_run_outputs(const ExperimentConfig& config, const RunResult& result,
                       const Model& model, const std::string& run_dir) {
  std::filesystem::create_directories(run_dir);
  write_file_atomic(run_dir + "/config.json", config.to_json());

  std::string csv = MetricsRecord::csv_header() + "\n";
  for (const EpochRecord& er : result.epochs)
    if (er.has_test) csv += er.test.csv_row() + "\n";
  if (result.epochs.empty()) csv += result.final_test.csv_row() + "\n";
  write_file_atomic(run_dir + "/metrics.csv", csv);

  json epochs = json::array();
  for (const EpochRecord& er : result.epochs) {
    json e{{"epoch", er.epoch},
           {"train_loss", er.train_loss},
           {"train", record_to_json(er.train)}};
    if (er.has_test) e["test"] = record_to_json(er.test);
    epochs.push_back(e);
  }
  json out{{"seed", result.seed},
           {"wall_clock_s", result.wall_clock_s},
           {"config", json::parse(config.to_json())},
           {"epochs", epochs},
           {"final", record_to_json(result.final_test)}};
  if (!result.neuron_activation_freq.empty()) {
    out["neuron_activation_freq"] = result.neuron_activation_freq;
    out["neuron_smi"] = result.neuron_smi;
  }
  write_file_atomic(run_dir + "/result.json", out.dump(2) + "\n");

  save_tensors(run_dir + "/final.ckpt", model.named_parameters());
}

}  // namespace

TrainedRun train_with_model(const ExperimentConfig& config, uint64_t seed,
                            bool write_outputs) {
  config.validate();
  auto t0 = std::chrono::steady_clock::now();

  Dataset train_ds = load_split(config, true, seed);
  Dataset test_ds = load_split(config, false, seed);
  if (config.model.widths.front() != train_ds.dim())
    throw DimensionError("model input width " + std::to_string(config.model.widths.front()) +
                         " does not match dataset dim " + std::to_string(train_ds.dim()));
  if (config.model.widths.back() < train_ds.num_classes)
    throw DimensionError("model output width " + std::to_string(config.model.widths.back()) +
                         " cannot cover " + std::to_string(train_ds.num_classes) + " classes");

  Rng init_rng(derive_seed(seed, "init"));
  Model model(config.model, init_rng);
  Rng noise_rng(derive_seed(seed, "noise"));
  uint64_t shuffle_seed = config.shuffle_seed.value_or(derive_seed(seed, "shuffle"));
  std::vector<Tensor> params = model.parameters();
  AdamState adam;

  RunResult result;
  result.seed = seed;
  int64_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> train_preds, train_labels;
    std::vector<double> probs_buf;
    int64_t C = 0;
    int64_t anr_active = 0, anr_total = 0;
    double loss_sum = 0.0;
    int64_t seen = 0;

    BatchIterator batches(train_ds, config.batch_size, shuffle_seed, epoch);
    Tensor x;
    std::vector<int> y;
    while (batches.next(x, y)) {
      Tape tape;
      std::vector<GateTrace> traces;
      Tensor logits = model.forward(tape, x, true, noise_rng, epoch, &traces);
      Tensor loss = softmax_cross_entropy(tape, logits, y);
      double lv = loss.value();
      if (!std::isfinite(lv))
        throw ContractError("training diverged: non-finite loss at step " +
                            std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      tape.backward(loss);
      adam_step(params, adam, config.optimizer);
      zero_grads(params);

      int64_t take = x.rows();
      loss_sum += lv * static_cast<double>(take);
      seen += take;
      if (C == 0) C = logits.cols();
      Tensor probs = softmax_rows(logits);
      auto pb = probs.data();
      probs_buf.insert(probs_buf.end(), pb.begin(), pb.end());
      auto ld = logits.data();
      for (int64_t i = 0; i < take; ++i) {
        const double* row = ld.data() + i * C;
        int arg = 0;
        for (int64_t c = 1; c < C; ++c)
          if (row[c] > row[arg]) arg = static_cast<int>(c);
        train_preds.push_back(arg);
      }
      train_labels.insert(train_labels.end(), y.begin(), y.end());
      for (const GateTrace& tr : traces) {
        for (double v : tr.alpha_hat.data())
          anr_active += v > config.metrics.anr_tau ? 1 : 0;
        anr_total += tr.alpha_hat.numel();
      }
      ++step;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_sum / static_cast<double>(seen);
    er.train.seed = seed;
    er.train.epoch = epoch;
    auto cls = classification_metrics(train_preds, train_labels);
    er.train.accuracy = cls.accuracy;
    er.train.macro_f1 = cls.macro_f1;
    auto cal = calibration_metrics(Tensor::from_data({seen, C}, std::move(probs_buf)),
                                   train_labels);
    er.train.ece = cal.ece;
    er.train.brier = cal.brier;
    er.train.anr = anr_total > 0
                       ? static_cast<double>(anr_active) / static_cast<double>(anr_total)
                       : 1.0;
    auto fl = flops_count(model.layer_descs(), anr_total > 0 ? er.train.anr : -1.0);
    er.train.flops_dense = fl.dense;
    er.train.flops_effective = fl.effective;

    bool last = epoch + 1 == config.epochs;
    if ((epoch + 1) % config.metrics.eval_every == 0 || last) {
      er.has_test = true;
      if (last) {
        EvalSinks sinks;
        sinks.neuron_freq = &result.neuron_activation_freq;
        sinks.neuron_smi = &result.neuron_smi;
        er.test = evaluate_impl(model, test_ds, config, seed, epoch, sinks);
      } else {
        er.test = evaluate_model(model, test_ds, config, seed, epoch);
      }
      result.final_test = er.test;
    }
    result.epochs.push_back(er);
  }

  if (config.epochs == 0) {
    EvalSinks sinks;
    sinks.neuron_freq = &result.neuron_activation_freq;
    sinks.neuron_smi = &result.neuron_smi;
    result.final_test = evaluate_impl(model, test_ds, config, seed, 0, sinks);
  }

  result.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (write_outputs) {
    std::string run_dir =
        config.output_dir + "/" + config.experiment + "/" + std::to_string(seed);
    write_run_outputs(config, result, model, run_dir);
    result.run_dir = run_dir;
  }
  return {std::move(result), std::move(model), std::move(train_ds), std::move(test_ds)};
}

RunResult train(const ExperimentConfig& config, uint64_t seed, bool write_outputs) {
  return train_with_model(config, seed, write_outputs).result;
}

std::vector<RunResult> run_all_seeds(const ExperimentConfig& config, bool write_outputs) {
  std::vector<RunResult> out;
  for (uint64_t seed : config.seeds) out.push_back(train(config, seed, write_outputs));
  return out;
}

// ---- sweeps ------------------------------------------------------------------------------

ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& variant) {
  ExperimentConfig c = base;
  if (variant == "midl") {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::Learned;
  } else if (variant == "f1_only") {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::FixedAlpha;
    c.model.gate.fixed_alpha = 1.0;
  } else if (variant == "f2_only") {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::FixedAlpha;
    c.model.gate.fixed_alpha = 0.0;
  } else if (variant.rfind("fixed_alpha:", 0) == 0) {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::FixedAlpha;
    try {
      c.model.gate.fixed_alpha = std::stod(variant.substr(12));
    } catch (const std::exception&) {
      throw ConfigError("bad fixed_alpha value in variant \"" + variant + "\"");
    }
  } else if (variant == "random_topk") {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::RandomTopk;
  } else if (variant == "gumbel") {
    c.model.hidden = "midl";
    c.model.gate.mode = GateConfig::Mode::Gumbel;
  } else if (variant == "dense") {
    c.model.hidden = "dense";
  } else if (variant == "dropout") {
    c.model.hidden = "dropout";
  } else {
    throw ConfigError("unknown sweep variant \"" + variant + "\"");
  }
  c.validate();
  return c;
}

namespace {

std::string sanitize_variant(const std::string& v) {
  std::string s = v;
  for (char& c : s)
    if (c == ':' || c == '.' || c == '/') c = '_';
  return s;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

}  // namespace

std::vector<SweepRow> sweep(const ExperimentConfig& base,
                            const std::vector<std::string>& variants,
                            const std::string& csv_path) {
  if (variants.empty()) throw ConfigError("sweep: no variants given");
  std::vector<SweepRow> rows;
  for (const std::string& v : variants) {
    ExperimentConfig cfg = apply_variant(base, v);
    cfg.experiment = base.experiment + "-" + sanitize_variant(v);
    std::vector<double> acc, f1, anr, smi;
    for (uint64_t seed : cfg.seeds) {
      RunResult r = train(cfg, seed);
      acc.push_back(r.final_test.accuracy);
      f1.push_back(r.final_test.macro_f1);
      anr.push_back(r.final_test.anr);
      smi.push_back(r.final_test.smi_nats);
    }
    SweepRow row;
    row.variant = v;
    std::tie(row.accuracy_mean, row.accuracy_std) = mean_std(acc);
    std::tie(row.macro_f1_mean, row.macro_f1_std) = mean_std(f1);
    std::tie(row.anr_mean, row.anr_std) = mean_std(anr);
    std::tie(row.smi_mean, row.smi_std) = mean_std(smi);
    rows.push_back(row);
  }
  if (!csv_path.empty()) write_file_atomic(csv_path, sweep_csv(rows));
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "variant,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,anr_mean,anr_std,"
      "smi_mean,smi_std\n";
  char buf[512];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.variant.c_str(), r.accuracy_mean, r.accuracy_std, r.macro_f1_mean,
                  r.macro_f1_std, r.anr_mean, r.anr_std, r.smi_mean, r.smi_std);
    out += buf;
  }
  return out;
}

// ---- svg -----------------------------------------------------------------------------------

std::string smi_scatter_svg(const std::vector<double>& activation_freq,
                            const std::vector<double>& neuron_smi) {
  if (activation_freq.size() != neuron_smi.size())
    throw DimensionError("smi_scatter_svg: " + std::to_string(activation_freq.size()) +
                         " frequencies vs " + std::to_string(neuron_smi.size()) +
                         " smi values");
  const double W = 640, H = 480, L = 70, R = 20, T = 20, B = 55;
  const double PW = W - L - R, PH = H - T - B;
  double ymax = 0.0;
  for (double v : neuron_smi) ymax = std::max(ymax, v);
  ymax = ymax > 0.0 ? ymax * 1.1 : 1.0;

  std::string s;
  char buf[512];
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" "
       "height=\"480\" viewBox=\"0 0 640 480\">\n";
  s += "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                L, T + PH, L + PW, T + PH);
  s += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n",
                L, T, L, T + PH);
  s += buf;
  for (int i = 0; i <= 4; ++i) {
    double fx = i / 4.0;
    double px = L + fx * PW;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>"
                  "<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\">"
                  "%.2f</text>\n",
                  px, T + PH, px, T + PH + 5, px, T + PH + 20, fx);
    s += buf;
    double fy = i / 4.0;
    double py = T + PH - fy * PH;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>"
                  "<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"end\">"
                  "%.3g</text>\n",
                  L - 5, py, L, py, L - 8, py + 4, fy * ymax);
    s += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"14\" text-anchor=\"middle\">"
                "activation frequency</text>\n",
                L + PW / 2, H - 12);
  s += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"14\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 %.2f %.2f)\">per-neuron SMI (nats)</text>\n",
                18.0, T + PH / 2, 18.0, T + PH / 2);
  s += buf;
  for (size_t i = 0; i < activation_freq.size(); ++i) {
    double fx = std::clamp(activation_freq[i], 0.0, 1.0);
    double fy = std::clamp(neuron_smi[i] / ymax, 0.0, 1.0);
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"steelblue\" "
                  "fill-opacity=\"0.7\"/>\n",
                  L + fx * PW, T + PH - fy * PH);
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

void emit_smi_scatter(const std::vector<double>& activation_freq,
                      const std::vector<double>& neuron_smi, const std::string& path) {
  write_file_atomic(path, smi_scatter_svg(activation_freq, neuron_smi));
}

}  // namespace midl
