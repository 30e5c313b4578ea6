#include <benchmark/benchmark.h>

#include "midl/harness.hpp"
#include "midl/layers.hpp"
#include "midl/rng.hpp"
#include "midl/tensor.hpp"

namespace {

midl::Tensor random_tensor(const midl::Shape& shape, midl::Rng& rng) {
  midl::Tensor t = midl::Tensor::zeros(shape);
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

void bm_matmul(benchmark::State& state) {
  int64_t n = state.range(0);
  midl::Rng rng(7);
  midl::Tensor a = random_tensor({n, n}, rng);
  midl::Tensor b = random_tensor({n, n}, rng);
  midl::Tape off(false);
  for (auto _ : state) {
    midl::Tensor c = midl::matmul(off, a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(bm_matmul)->Arg(64)->Arg(128)->Arg(256);

void bm_fc_forward(benchmark::State& state) {
  int64_t d = state.range(0);
  midl::Rng rng(7);
  midl::Tensor x = random_tensor({64, d}, rng);
  midl::Tensor w = random_tensor({d, d}, rng);
  midl::Tensor b = random_tensor({d}, rng);
  midl::Tape off(false);
  for (auto _ : state) {
    midl::Tensor z = midl::fc_forward(off, x, w, b, midl::Activation::Relu);
    benchmark::DoNotOptimize(z.data().data());
  }
}
BENCHMARK(bm_fc_forward)->Arg(128)->Arg(256);

void bm_midl_forward(benchmark::State& state) {
  int64_t d = state.range(0);
  midl::Rng rng(7);
  midl::Tensor x = random_tensor({64, d}, rng);
  midl::MidlParams params = midl::MidlParams::init(d, d, 0, 0, rng);
  midl::GateConfig gate;
  midl::Tape off(false);
  for (auto _ : state) {
    midl::MidlOutput out = midl::midl_forward(off, x, params, gate, false, rng);
    benchmark::DoNotOptimize(out.output.data().data());
  }
}
BENCHMARK(bm_midl_forward)->Arg(128)->Arg(256);

void bm_topk_mask(benchmark::State& state) {
  int64_t d = state.range(0);
  midl::Rng rng(7);
  midl::Tensor alpha = random_tensor({64, d}, rng);
  for (auto _ : state) {
    midl::Tensor m = midl::topk_mask(alpha, d / 2);
    benchmark::DoNotOptimize(m.data().data());
  }
}
BENCHMARK(bm_topk_mask)->Arg(256)->Arg(1024);

void bm_train_step(benchmark::State& state) {
  midl::ExperimentConfig cfg;
  cfg.dataset.name = "synthetic";
  cfg.dataset.synthetic_n = 256;
  cfg.dataset.synthetic_d = 64;
  cfg.model.widths = {64, 128, 2};
  cfg.model.hidden = "midl";
  midl::Dataset ds = midl::synthetic_two_gaussians(256, 64, 3.0, 99);
  midl::Rng init_rng(1), noise_rng(2);
  midl::Model model(cfg.model, init_rng);
  std::vector<midl::Tensor> params = model.parameters();
  midl::AdamState adam;
  midl::BatchIterator batches(ds, 64, 3, 0);
  midl::Tensor x;
  std::vector<int> y;
  batches.next(x, y);
  for (auto _ : state) {
    midl::Tape tape;
    midl::Tensor logits = model.forward(tape, x, true, noise_rng, 0);
    midl::Tensor loss = midl::softmax_cross_entropy(tape, logits, y);
    tape.backward(loss);
    midl::adam_step(params, adam, cfg.optimizer);
    midl::zero_grads(params);
    benchmark::DoNotOptimize(loss.value());
  }
}
BENCHMARK(bm_train_step);

}  // namespace

BENCHMARK_MAIN();
