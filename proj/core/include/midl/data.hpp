#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "midl/rng.hpp"
#include "midl/tensor.hpp"

// Dataset loading and construction: IDX-format MNIST, synthetic Gaussian
// blobs, symmetric label noise, per-class stress subsets, and shuffled
// mini-batching.

namespace midl {

struct Dataset {
  Tensor features;          // [N x d], constants
  std::vector<int> labels;  // values in [0, num_classes)
  int num_classes = 0;
  std::string name;

  int64_t size() const { return features.defined() ? features.rows() : 0; }
  int64_t dim() const { return features.defined() ? features.cols() : 0; }
};

// Big-endian IDX pair (images magic 0x00000803, labels 0x00000801). Pixels
// are scaled to [0, 1] by 1/255. Malformed bytes raise ParseError naming the
// byte offset; label values outside [0, 10) or an image/label count mismatch
// raise DataError. Never silently returns a wrong-sized dataset.
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// Two isotropic unit-variance Gaussians in d dims, means +/- separation/2
// along the all-ones diagonal direction, n/2 samples each (n even), shuffled.
Dataset synthetic_two_gaussians(int64_t n, int64_t d, double separation, uint64_t seed);

// Symmetric label noise: each selected label is replaced by a uniformly
// drawn *different* class. rate in [0, 1]; rate 0 returns an exact copy.
Dataset inject_symmetric_noise(const Dataset& ds, double rate, uint64_t seed);

// Exactly per_class examples of each class, sampled without replacement
// (DataError if any class is short), order shuffled.
Dataset overfit_stress_subset(const Dataset& ds, int per_class, uint64_t seed);

// First n examples (helper for desk-scale subsets). n > size is a DataError.
Dataset head_subset(const Dataset& ds, int64_t n);

// Shuffled mini-batches; order depends on (seed, epoch) only. The final
// batch may be short. Copies rows into fresh tensors.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t seed, int epoch);
  bool next(Tensor& x, std::vector<int>& y);
  int64_t num_batches() const;

 private:
  const Dataset& ds_;
  int64_t batch_size_;
  std::vector<int64_t> order_;
  int64_t pos_ = 0;
};

// Dataset cache in the checkpoint container (magic "DATA"); round-trips are
// bit-exact.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace midl
