#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "midl/error.hpp"
#include "midl/rng.hpp"

// Dense row-major tensors of 64-bit floats plus a tape for reverse-mode
// differentiation. Ops execute eagerly; each differentiable op pushes one
// backward closure onto the tape, and Tape::backward replays them in reverse
// push order (which is reverse topological order under eager execution).
// Gradients accumulate additively, so values reused by several ops get the
// sum of all contributions.

namespace midl {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t rows() const;  // rank-2 only
  int64_t cols() const;  // rank-2 only

  std::span<double> data();
  std::span<const double> data() const;
  double value() const;  // scalar tensors only
  double operator()(int64_t r, int64_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  // grad() allocates a zero buffer on first use; grad_if_allocated() lets
  // backward closures skip work for outputs nothing differentiated into.
  std::span<double> grad();
  std::span<const double> grad_if_allocated() const;
  bool grad_allocated() const;
  void zero_grad();

  // Deep copy of values; no grad buffer, requires_grad off.
  Tensor detached_copy() const;

  // Copies share storage (shallow); distinct handles to the same cells.
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first grad() call
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
  Impl& impl();
  const Impl& impl() const;
};

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void record(std::function<void()> backprop);
  size_t num_nodes() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays nodes newest-first. The loss must
  // be scalar, and a tape can only be consumed once.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
  bool spent_ = false;
};

// How the Top-k mask enters the gate gradient: Full passes d(alpha_hat)
// straight through to alpha (the mask is treated as identity in the backward
// pass); Masked multiplies the incoming gradient by the mask.
enum class SteMode { Full, Masked };

// ---- differentiable ops ------------------------------------------------
// Elementwise ops require identical shapes; the only broadcast is add_row
// (a [N] row added to every row of a [B x N] matrix).

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);     // a . b
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);  // a . b^T
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // Hadamard
Tensor add_row(Tape& tape, const Tensor& m, const Tensor& row);
Tensor affine(Tape& tape, const Tensor& a, double scale, double shift);
Tensor sigmoid(Tape& tape, const Tensor& a);  // overflow-safe both tails
Tensor relu(Tape& tape, const Tensor& a);
Tensor sum(Tape& tape, const Tensor& a);  // scalar

// Mean cross-entropy over the batch from raw logits, computed via the
// log-sum-exp trick; backward is the fused (softmax - onehot) / B form.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels);

// Forward: alpha * mask elementwise. Backward: straight-through per `mode`.
// The mask must be a constant (requires_grad off).
Tensor ste_topk(Tape& tape, const Tensor& alpha, const Tensor& mask,
                SteMode mode);

// ---- non-differentiable helpers ----------------------------------------

// Row-wise softmax of raw logits (numerically stable); plain values, no tape.
Tensor softmax_rows(const Tensor& logits);

// U[-1/sqrt(fan_in), 1/sqrt(fan_in)], drawn row-major.
Tensor init_uniform_fanin(Shape shape, int64_t fan_in, Rng& rng);

void zero_grads(const std::vector<Tensor>& params);

}  // namespace midl
