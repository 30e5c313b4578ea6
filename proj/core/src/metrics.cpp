#include "midl/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "midl/rng.hpp"

namespace midl {

double active_neuron_ratio(const GateTrace& trace, double tau) {
  if (!trace.alpha_hat.defined() || trace.alpha_hat.numel() == 0)
    throw ContractError("active_neuron_ratio: empty gate trace");
  if (tau < 0.0) throw ConfigError("active_neuron_ratio: tau must be >= 0");
  auto a = trace.alpha_hat.data();
  int64_t active = 0;
  for (double v : a) active += v > tau ? 1 : 0;
  return static_cast<double>(active) / static_cast<double>(a.size());
}

FlopsCount flops_count(const std::vector<LayerDesc>& layers, double anr) {
  if (anr > 1.0) throw ConfigError("flops_count: anr above 1");
  FlopsCount total;
  double eff_acc = 0.0;
  for (const LayerDesc& l : layers) {
    if (l.d_in <= 0 || l.d_out <= 0)
      throw ConfigError("flops_count: non-positive layer dimensions");
    auto u = [](int64_t v) { return static_cast<uint64_t>(v); };
    uint64_t act = l.activation ? u(l.d_out) : 0;
    if (l.kind == LayerDesc::Kind::Fc) {
      uint64_t dense = 2 * u(l.d_in) * u(l.d_out) + u(l.d_out) + act;
      total.dense += dense;
      eff_acc += static_cast<double>(dense);
    } else {
      if (l.rank <= 0 || l.hidden <= 0)
        throw ConfigError("flops_count: midl layer needs rank and hidden");
      uint64_t f1 = 2 * u(l.d_in) * u(l.rank) + 2 * u(l.rank) * u(l.d_out) + u(l.d_out);
      uint64_t f2 = 2 * u(l.d_in) * u(l.hidden) + 2 * u(l.hidden) +
                    2 * u(l.hidden) * u(l.d_out) + u(l.d_out);
      uint64_t gate = 2 * u(l.d_in) * u(l.d_out) + u(l.d_out);
      uint64_t interp = 4 * u(l.d_out);
      total.dense += f1 + f2 + gate + interp + act;
      double a = anr < 0.0 ? 1.0 : anr;
      double b = anr < 0.0 ? 1.0 : 1.0 - anr;
      eff_acc += a * static_cast<double>(f1) + b * static_cast<double>(f2) +
                 static_cast<double>(gate + interp + act);
    }
  }
  total.effective = static_cast<uint64_t>(std::llround(eff_acc));
  return total;
}

double binned_mutual_information(const std::vector<double>& values,
                                 const std::vector<int>& labels, int num_bins) {
  if (num_bins < 2) throw ConfigError("binned_mutual_information: need >= 2 bins");
  if (values.size() != labels.size())
    throw DimensionError("binned_mutual_information: " + std::to_string(values.size()) +
                         " values vs " + std::to_string(labels.size()) + " labels");
  size_t n = values.size();
  if (n == 0) throw ContractError("binned_mutual_information: empty input");
  int num_classes = 0;
  for (int y : labels) {
    if (y < 0) throw DataError("binned_mutual_information: negative label");
    num_classes = std::max(num_classes, y + 1);
  }
  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<int64_t> joint(static_cast<size_t>(num_bins) * num_classes, 0);
  double width = hi - lo;
  for (size_t i = 0; i < n; ++i) {
    int b = 0;
    if (width > 0.0) {
      b = static_cast<int>((values[i] - lo) / width * num_bins);
      b = std::clamp(b, 0, num_bins - 1);  // v == hi lands in the last bin
    }
    joint[static_cast<size_t>(b) * num_classes + labels[i]] += 1;
  }
  std::vector<int64_t> pb(num_bins, 0), pc(num_classes, 0);
  for (int b = 0; b < num_bins; ++b)
    for (int c = 0; c < num_classes; ++c) {
      int64_t v = joint[static_cast<size_t>(b) * num_classes + c];
      pb[b] += v;
      pc[c] += v;
    }
  double mi = 0.0;
  double dn = static_cast<double>(n);
  for (int b = 0; b < num_bins; ++b)
    for (int c = 0; c < num_classes; ++c) {
      int64_t v = joint[static_cast<size_t>(b) * num_classes + c];
      if (v == 0) continue;
      double pxy = v / dn;
      mi += pxy * std::log(pxy * dn * dn / (static_cast<double>(pb[b]) * pc[c]));
    }
  return std::max(mi, 0.0);  // clamp away -0 from rounding
}

double sliced_mutual_information(const Tensor& features, const std::vector<int>& labels,
                                 const SmiConfig& cfg) {
  if (features.shape().size() != 2)
    throw DimensionError("sliced_mutual_information: expected rank-2 features, got " +
                         shape_str(features.shape()));
  int64_t n = features.rows(), d = features.cols();
  if (static_cast<size_t>(n) != labels.size())
    throw DimensionError("sliced_mutual_information: " + std::to_string(n) +
                         " rows vs " + std::to_string(labels.size()) + " labels");
  if (cfg.num_projections < 1)
    throw ConfigError("sliced_mutual_information: need >= 1 projection");
  if (cfg.num_bins < 2) throw ConfigError("sliced_mutual_information: need >= 2 bins");
  if (n < 10 * static_cast<int64_t>(cfg.num_bins))
    throw ContractError("sliced_mutual_information: " + std::to_string(n) +
                        " samples is too few for " + std::to_string(cfg.num_bins) +
                        " bins (need >= 10x)");
  Rng rng(derive_seed(cfg.projection_seed, "smi-projections"));
  auto fd = features.data();
  std::vector<double> theta(static_cast<size_t>(d));
  std::vector<double> proj(static_cast<size_t>(n));
  double total = 0.0;
  for (int p = 0; p < cfg.num_projections; ++p) {
    double norm2 = 0.0;
    for (auto& t : theta) {
      t = rng.normal();
      norm2 += t * t;
    }
    double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
    for (auto& t : theta) t *= inv;
    for (int64_t i = 0; i < n; ++i) {
      const double* row = fd.data() + i * d;
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) s += row[j] * theta[static_cast<size_t>(j)];
      proj[static_cast<size_t>(i)] = s;
    }
    total += binned_mutual_information(proj, labels, cfg.num_bins);
  }
  return total / cfg.num_projections;
}

ClassificationMetrics classification_metrics(const std::vector<int>& predictions,
                                             const std::vector<int>& labels) {
  if (predictions.size() != labels.size())
    throw DimensionError("classification_metrics: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
  if (predictions.empty()) throw ContractError("classification_metrics: empty input");
  int num_classes = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || predictions[i] < 0)
      throw DataError("classification_metrics: negative class id");
    num_classes = std::max({num_classes, labels[i] + 1, predictions[i] + 1});
  }
  std::vector<int64_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  int64_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] == labels[i]) {
      ++correct;
      ++tp[labels[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[labels[i]];
    }
  }
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  double f1_sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    int64_t support = tp[c] + fp[c] + fn[c];
    if (support == 0) continue;  // class absent from both sides
    ++present;
    f1_sum += 2.0 * tp[c] / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
  }
  m.macro_f1 = present > 0 ? f1_sum / present : 0.0;
  return m;
}

CalibrationMetrics calibration_metrics(const Tensor& probabilities,
                                       const std::vector<int>& labels, int num_bins) {
  if (probabilities.shape().size() != 2)
    throw DimensionError("calibration_metrics: expected rank-2 probabilities, got " +
                         shape_str(probabilities.shape()));
  int64_t n = probabilities.rows(), C = probabilities.cols();
  if (static_cast<size_t>(n) != labels.size())
    throw DimensionError("calibration_metrics: " + std::to_string(n) + " rows vs " +
                         std::to_string(labels.size()) + " labels");
  if (n == 0) throw ContractError("calibration_metrics: empty input");
  if (num_bins < 1) throw ConfigError("calibration_metrics: need >= 1 bin");
  auto pd = probabilities.data();
  std::vector<int64_t> bin_count(num_bins, 0);
  std::vector<double> bin_conf(num_bins, 0.0), bin_acc(num_bins, 0.0);
  double brier = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* row = pd.data() + i * C;
    int y = labels[i];
    if (y < 0 || y >= C)
      throw DataError("calibration_metrics: label " + std::to_string(y) +
                      " out of range [0, " + std::to_string(C) + ")");
    int arg = 0;
    double conf = row[0];
    double sq = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      if (row[c] > conf) {
        conf = row[c];
        arg = static_cast<int>(c);
      }
      double t = row[c] - (c == y ? 1.0 : 0.0);
      sq += t * t;
    }
    brier += sq;
    int b = std::clamp(static_cast<int>(conf * num_bins), 0, num_bins - 1);
    bin_count[b] += 1;
    bin_conf[b] += conf;
    bin_acc[b] += arg == y ? 1.0 : 0.0;
  }
  CalibrationMetrics m;
  m.brier = brier / static_cast<double>(n);
  double ece = 0.0;
  for (int b = 0; b < num_bins; ++b) {
    if (bin_count[b] == 0) continue;
    double w = static_cast<double>(bin_count[b]) / static_cast<double>(n);
    ece += w * std::abs(bin_acc[b] / bin_count[b] - bin_conf[b] / bin_count[b]);
  }
  m.ece = ece;
  return m;
}

LatencyStats latency_probe(const std::function<void()>& op, int repeats) {
  if (repeats < 1) throw ConfigError("latency_probe: need >= 1 repeat");
  op();  // warmup, untimed
  LatencyStats stats;
  stats.samples_ms.reserve(static_cast<size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    op();
    auto t1 = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  double mean = 0.0;
  for (double s : stats.samples_ms) mean += s;
  mean /= repeats;
  double var = 0.0;
  for (double s : stats.samples_ms) var += (s - mean) * (s - mean);
  stats.mean_ms = mean;
  stats.std_ms = std::sqrt(var / repeats);
  return stats;
}

std::string MetricsRecord::csv_header() {
  return "seed,epoch,accuracy,macro_f1,anr,flops_dense,flops_effective,latency_ms,"
         "smi_nats,ece,brier";
}

std::string MetricsRecord::csv_row() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "%llu,%d,%.17g,%.17g,%.17g,%llu,%llu,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(seed), epoch, accuracy, macro_f1, anr,
                static_cast<unsigned long long>(flops_dense),
                static_cast<unsigned long long>(flops_effective), latency_ms, smi_nats,
                ece, brier);
  return buf;
}

}  // namespace midl
