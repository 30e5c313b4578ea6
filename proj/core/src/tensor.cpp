#include "midl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace midl {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

static int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw DimensionError("tensor shape has non-positive dim " + shape_str(s));
    n *= d;
  }
  return n;
}

// ---- Tensor --------------------------------------------------------------

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw ContractError("operation on an undefined tensor");
  return *impl_;
}
const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ContractError("operation on an undefined tensor");
  return *impl_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw DimensionError("from_data: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl().shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl().data.size()); }

int64_t Tensor::rows() const {
  if (impl().shape.size() != 2)
    throw DimensionError("rows(): tensor is not rank-2, shape " + shape_str(impl().shape));
  return impl().shape[0];
}
int64_t Tensor::cols() const {
  if (impl().shape.size() != 2)
    throw DimensionError("cols(): tensor is not rank-2, shape " + shape_str(impl().shape));
  return impl().shape[1];
}

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::value() const {
  if (numel() != 1)
    throw ContractError("value(): tensor is not scalar, shape " + shape_str(impl().shape));
  return impl().data[0];
}

double Tensor::operator()(int64_t r, int64_t c) const {
  return impl().data[static_cast<size_t>(r * cols() + c)];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool v) { impl().requires_grad = v; }

std::span<double> Tensor::grad() {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
  return im.grad;
}

std::span<const double> Tensor::grad_if_allocated() const {
  const auto& im = impl();
  return {im.grad.data(), im.grad.size()};
}

bool Tensor::grad_allocated() const { return !impl().grad.empty(); }

void Tensor::zero_grad() {
  auto& im = impl();
  std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

Tensor Tensor::detached_copy() const {
  return from_data(impl().shape, impl().data, false);
}

void zero_grads(const std::vector<Tensor>& params) {
  for (Tensor p : params) p.zero_grad();  // handles share storage
}

// ---- Tape ------------------------------------------------------------------

void Tape::record(std::function<void()> backprop) {
  if (!recording_) return;
  nodes_.push_back(std::move(backprop));
}

void Tape::backward(const Tensor& loss) {
  if (spent_) throw ContractError("backward: tape already consumed; build a fresh tape per step");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  spent_ = true;
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

// ---- kernels ----------------------------------------------------------------
// Three accumulating GEMM variants cover every product the ops need without
// materializing transposes. All loops keep the innermost index contiguous.

namespace {

// C[MxN] += A[MxK] . B[KxN]
void gemm_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      double aik = a[k];
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

// C[MxN] += A[MxK] . B[NxK]^T
void gemm_nt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] += s;
    }
  }
}

// C[KxN] += A[MxK]^T . B[MxN]
void gemm_tn_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* b = B + i * N;
    for (int64_t k = 0; k < K; ++k) {
      double aik = a[k];
      double* c = C + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

bool track(const Tape& tape, const Tensor& a) {
  return tape.recording() && a.requires_grad();
}
bool track(const Tape& tape, const Tensor& a, const Tensor& b) {
  return tape.recording() && (a.requires_grad() || b.requires_grad());
}

}  // namespace

// ---- ops ---------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  int64_t M = a.rows(), K = a.cols(), N = b.cols();
  Tensor out = Tensor::zeros({M, N});
  gemm_acc(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a = a, b = b, out, M, K, N]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (a.requires_grad())  // dA += dZ . B^T
        gemm_nt_acc(dz.data(), b.data().data(), a.grad().data(), M, N, K);
      if (b.requires_grad())  // dB += A^T . dZ
        gemm_tn_acc(a.data().data(), dz.data(), b.grad().data(), M, K, N);
    });
  }
  return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()) + " (transposed)");
  int64_t M = a.rows(), K = a.cols(), N = b.rows();
  Tensor out = Tensor::zeros({M, N});
  gemm_nt_acc(a.data().data(), b.data().data(), out.data().data(), M, K, N);
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a = a, b = b, out, M, K, N]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (a.requires_grad())  // dA += dZ . B
        gemm_acc(dz.data(), b.data().data(), a.grad().data(), M, N, K);
      if (b.requires_grad())  // dB += dZ^T . A
        gemm_tn_acc(dz.data(), a.data().data(), b.grad().data(), M, N, K);
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a = a, b = b, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (a.requires_grad()) {
        auto g = a.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] - bd[i];
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a = a, b = b, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (a.requires_grad()) {
        auto g = a.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] -= dz[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  if (track(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a = a, b = b, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (a.requires_grad()) {
        auto g = a.grad();
        auto bv = b.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        auto av = a.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i] * av[i];
      }
    });
  }
  return out;
}

Tensor add_row(Tape& tape, const Tensor& m, const Tensor& row) {
  require_rank2(m, "add_row");
  if (row.shape().size() != 1 || row.shape()[0] != m.cols())
    throw DimensionError("add_row: row shape " + shape_str(row.shape()) +
                         " does not match matrix " + shape_str(m.shape()));
  int64_t B = m.rows(), N = m.cols();
  Tensor out = Tensor::zeros(m.shape());
  auto md = m.data(), rd = row.data();
  auto od = out.data();
  for (int64_t i = 0; i < B; ++i)
    for (int64_t j = 0; j < N; ++j) od[i * N + j] = md[i * N + j] + rd[j];
  if (track(tape, m, row)) {
    out.set_requires_grad(true);
    tape.record([m = m, row = row, out, B, N]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      if (m.requires_grad()) {
        auto g = m.grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i];
      }
      if (row.requires_grad()) {
        auto g = row.grad();
        for (int64_t i = 0; i < B; ++i)
          for (int64_t j = 0; j < N; ++j) g[j] += dz[i * N + j];
      }
    });
  }
  return out;
}

Tensor affine(Tape& tape, const Tensor& a, double scale, double shift) {
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = scale * ad[i] + shift;
  if (track(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a = a, out, scale]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = a.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += scale * dz[i];
    });
  }
  return out;
}

static double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = stable_sigmoid(ad[i]);
  if (track(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a = a, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = a.grad();
      auto s = out.data();
      for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i] * s[i] * (1.0 - s[i]);
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  if (track(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a = a, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = a.grad();
      auto av = a.data();
      for (size_t i = 0; i < g.size(); ++i)
        if (av[i] > 0.0) g[i] += dz[i];  // subgradient at 0 is 0
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (track(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a = a, out]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = a.grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += dz[0];
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank2(logits, "softmax_rows");
  int64_t B = logits.rows(), C = logits.cols();
  Tensor out = Tensor::zeros(logits.shape());
  auto ld = logits.data();
  auto od = out.data();
  for (int64_t n = 0; n < B; ++n) {
    const double* l = ld.data() + n * C;
    double* p = od.data() + n * C;
    double m = l[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, l[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      p[c] = std::exp(l[c] - m);
      z += p[c];
    }
    for (int64_t c = 0; c < C; ++c) p[c] /= z;
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels) {
  require_rank2(logits, "softmax_cross_entropy");
  int64_t B = logits.rows(), C = logits.cols();
  if (static_cast<int64_t>(labels.size()) != B)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
  for (int64_t n = 0; n < B; ++n)
    if (labels[n] < 0 || labels[n] >= C)
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[n]) +
                          " out of range [0, " + std::to_string(C) + ") at row " +
                          std::to_string(n));
  Tensor probs = softmax_rows(logits);  // cached for the backward pass
  auto ld = logits.data();
  double loss = 0.0;
  for (int64_t n = 0; n < B; ++n) {
    const double* l = ld.data() + n * C;
    double m = l[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, l[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(l[c] - m);
    loss += m + std::log(z) - l[labels[n]];
  }
  loss /= static_cast<double>(B);
  Tensor out = Tensor::scalar(loss);
  if (track(tape, logits)) {
    out.set_requires_grad(true);
    tape.record([logits = logits, probs, labels, out, B, C]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = logits.grad();
      auto p = probs.data();
      double scale = dz[0] / static_cast<double>(B);
      for (int64_t n = 0; n < B; ++n) {
        for (int64_t c = 0; c < C; ++c) g[n * C + c] += scale * p[n * C + c];
        g[n * C + labels[n]] -= scale;
      }
    });
  }
  return out;
}

Tensor ste_topk(Tape& tape, const Tensor& alpha, const Tensor& mask, SteMode mode) {
  require_same_shape(alpha, mask, "ste_topk");
  if (mask.requires_grad())
    throw ContractError("ste_topk: the mask must be a constant");
  Tensor out = Tensor::zeros(alpha.shape());
  auto ad = alpha.data(), md = mask.data();
  auto od = out.data();
  for (size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * md[i];
  if (track(tape, alpha)) {
    out.set_requires_grad(true);
    tape.record([alpha = alpha, mask = mask, out, mode]() mutable {
      auto dz = out.grad_if_allocated();
      if (dz.empty()) return;
      auto g = alpha.grad();
      if (mode == SteMode::Full) {
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i];
      } else {
        auto m = mask.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += dz[i] * m[i];
      }
    });
  }
  return out;
}

Tensor init_uniform_fanin(Shape shape, int64_t fan_in, Rng& rng) {
  if (fan_in <= 0) throw ConfigError("init_uniform_fanin: fan_in must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace midl
