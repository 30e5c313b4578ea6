#include "midl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "midl/checkpoint.hpp"

namespace midl {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

struct IdxCursor {
  std::string_view bytes;
  size_t pos = 0;
  const std::string& path;

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("idx parse error at byte " + std::to_string(pos) + " in " + path +
                     ": " + what);
  }

  uint32_t u32_be(const char* what) {
    if (bytes.size() - pos < 4)
      fail(std::string("truncated ") + what + " (need 4 bytes, " +
           std::to_string(bytes.size() - pos) + " left)");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v = (v << 8) | static_cast<unsigned char>(bytes[pos + i]);
    pos += 4;
    return v;
  }

  std::string_view payload(uint64_t n, const char* what) {
    if (bytes.size() - pos < n)
      fail(std::string("truncated ") + what + " (need " + std::to_string(n) +
           " bytes, " + std::to_string(bytes.size() - pos) + " left)");
    std::string_view v = bytes.substr(pos, n);
    pos += n;
    return v;
  }

  void expect_eof() const {
    if (pos != bytes.size())
      throw ParseError("idx parse error at byte " + std::to_string(pos) + " in " + path +
                       ": " + std::to_string(bytes.size() - pos) +
                       " trailing bytes after payload");
  }
};

}  // namespace

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::string img_bytes = read_file(images_path);
  std::string lbl_bytes = read_file(labels_path);

  IdxCursor ic{img_bytes, 0, images_path};
  uint32_t magic = ic.u32_be("magic");
  if (magic != kImagesMagic) {
    char hex[16];
    std::snprintf(hex, sizeof(hex), "%08x", magic);
    ic.pos = 0;
    ic.fail("images magic 0x" + std::string(hex) + " (expected 0x00000803)");
  }
  uint32_t count = ic.u32_be("image count");
  uint32_t rows = ic.u32_be("row count");
  uint32_t cols = ic.u32_be("column count");
  if (count == 0 || rows == 0 || cols == 0 || rows > 4096 || cols > 4096)
    ic.fail("implausible dimensions " + std::to_string(count) + " x " +
            std::to_string(rows) + " x " + std::to_string(cols));
  uint64_t pixels = static_cast<uint64_t>(count) * rows * cols;
  std::string_view img_payload = ic.payload(pixels, "pixel payload");
  ic.expect_eof();

  IdxCursor lc{lbl_bytes, 0, labels_path};
  uint32_t lmagic = lc.u32_be("magic");
  if (lmagic != kLabelsMagic) {
    lc.pos = 0;
    lc.fail("labels magic mismatch (expected 0x00000801)");
  }
  uint32_t lcount = lc.u32_be("label count");
  std::string_view lbl_payload = lc.payload(lcount, "label payload");
  lc.expect_eof();

  if (count != lcount)
    throw DataError("mnist: " + std::to_string(count) + " images in " + images_path +
                    " but " + std::to_string(lcount) + " labels in " + labels_path);

  Dataset ds;
  ds.name = "mnist";
  ds.num_classes = 10;
  int64_t d = static_cast<int64_t>(rows) * cols;
  ds.features = Tensor::zeros({static_cast<int64_t>(count), d});
  auto fd = ds.features.data();
  for (uint64_t i = 0; i < pixels; ++i)
    fd[i] = static_cast<unsigned char>(img_payload[i]) / 255.0;
  ds.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    int y = static_cast<unsigned char>(lbl_payload[i]);
    if (y > 9)
      throw DataError("mnist: label value " + std::to_string(y) + " at index " +
                      std::to_string(i) + " in " + labels_path +
                      " outside [0, 10)");
    ds.labels[i] = y;
  }
  return ds;
}

Dataset synthetic_two_gaussians(int64_t n, int64_t d, double separation, uint64_t seed) {
  if (n <= 0 || n % 2 != 0)
    throw ConfigError("synthetic_two_gaussians: n must be positive and even");
  if (d <= 0) throw ConfigError("synthetic_two_gaussians: d must be positive");
  if (separation < 0.0)
    throw ConfigError("synthetic_two_gaussians: separation must be >= 0");
  Rng rng(derive_seed(seed, "two-gaussians"));
  // means at +/- (separation/2) / sqrt(d) per coordinate: the between-mean
  // distance is exactly `separation`
  double shift = separation / 2.0 / std::sqrt(static_cast<double>(d));
  Dataset ds;
  ds.name = "synthetic";
  ds.num_classes = 2;
  ds.features = Tensor::zeros({n, d});
  ds.labels.resize(static_cast<size_t>(n));
  auto fd = ds.features.data();
  for (int64_t i = 0; i < n; ++i) {
    int y = i < n / 2 ? 0 : 1;
    double mu = y == 0 ? -shift : shift;
    for (int64_t j = 0; j < d; ++j) fd[i * d + j] = mu + rng.normal();
    ds.labels[static_cast<size_t>(i)] = y;
  }
  // shuffle rows so batching sees mixed classes
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t{0});
  rng.shuffle(order);
  Dataset out;
  out.name = ds.name;
  out.num_classes = 2;
  out.features = Tensor::zeros({n, d});
  out.labels.resize(static_cast<size_t>(n));
  auto od = out.features.data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = order[static_cast<size_t>(i)];
    std::copy_n(fd.data() + src * d, d, od.data() + i * d);
    out.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
  }
  return out;
}

Dataset inject_symmetric_noise(const Dataset& ds, double rate, uint64_t seed) {
  if (rate < 0.0 || rate > 1.0)
    throw ConfigError("inject_symmetric_noise: rate " + std::to_string(rate) +
                      " outside [0, 1]");
  if (ds.num_classes < 2)
    throw DataError("inject_symmetric_noise: need >= 2 classes to flip labels");
  Dataset out;
  out.features = ds.features;  // shared storage; labels are copied
  out.labels = ds.labels;
  out.num_classes = ds.num_classes;
  out.name = ds.name;
  if (rate == 0.0) return out;
  Rng rng(derive_seed(seed, "label-noise"));
  for (auto& y : out.labels) {
    if (!rng.bernoulli(rate)) continue;
    // uniform over the other classes
    int repl = static_cast<int>(rng.uniform_int(0, ds.num_classes - 2));
    if (repl >= y) ++repl;
    y = repl;
  }
  return out;
}

Dataset overfit_stress_subset(const Dataset& ds, int per_class, uint64_t seed) {
  if (per_class <= 0) throw ConfigError("overfit_stress_subset: per_class must be positive");
  std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(ds.num_classes));
  for (int64_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
  Rng rng(derive_seed(seed, "stress-subset"));
  std::vector<int64_t> chosen;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& pool = by_class[static_cast<size_t>(c)];
    if (static_cast<int>(pool.size()) < per_class)
      throw DataError("overfit_stress_subset: class " + std::to_string(c) + " has only " +
                      std::to_string(pool.size()) + " examples, need " +
                      std::to_string(per_class));
    rng.shuffle(pool);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + per_class);
  }
  rng.shuffle(chosen);
  Dataset out;
  out.num_classes = ds.num_classes;
  out.name = ds.name + "-stress";
  int64_t d = ds.dim();
  out.features = Tensor::zeros({static_cast<int64_t>(chosen.size()), d});
  out.labels.resize(chosen.size());
  auto od = out.features.data();
  auto fd = ds.features.data();
  for (size_t i = 0; i < chosen.size(); ++i) {
    std::copy_n(fd.data() + chosen[i] * d, d, od.data() + static_cast<int64_t>(i) * d);
    out.labels[i] = ds.labels[static_cast<size_t>(chosen[i])];
  }
  return out;
}

Dataset head_subset(const Dataset& ds, int64_t n) {
  if (n <= 0 || n > ds.size())
    throw DataError("head_subset: n=" + std::to_string(n) + " outside [1, " +
                    std::to_string(ds.size()) + "]");
  Dataset out;
  out.num_classes = ds.num_classes;
  out.name = ds.name;
  int64_t d = ds.dim();
  out.features = Tensor::zeros({n, d});
  std::copy_n(ds.features.data().data(), n * d, out.features.data().data());
  out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
  return out;
}

BatchIterator::BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t seed,
                             int epoch)
    : ds_(ds), batch_size_(batch_size) {
  if (batch_size <= 0) throw ConfigError("batch iterator: batch_size must be positive");
  if (ds.size() == 0) throw DataError("batch iterator: empty dataset");
  order_.resize(static_cast<size_t>(ds.size()));
  std::iota(order_.begin(), order_.end(), int64_t{0});
  Rng rng(derive_seed(derive_seed(seed, "shuffle"), std::to_string(epoch)));
  rng.shuffle(order_);
}

int64_t BatchIterator::num_batches() const {
  return (static_cast<int64_t>(order_.size()) + batch_size_ - 1) / batch_size_;
}

bool BatchIterator::next(Tensor& x, std::vector<int>& y) {
  int64_t total = static_cast<int64_t>(order_.size());
  if (pos_ >= total) return false;
  int64_t take = std::min(batch_size_, total - pos_);
  int64_t d = ds_.dim();
  x = Tensor::zeros({take, d});
  y.resize(static_cast<size_t>(take));
  auto xd = x.data();
  auto fd = ds_.features.data();
  for (int64_t i = 0; i < take; ++i) {
    int64_t src = order_[static_cast<size_t>(pos_ + i)];
    std::copy_n(fd.data() + src * d, d, xd.data() + i * d);
    y[static_cast<size_t>(i)] = ds_.labels[static_cast<size_t>(src)];
  }
  pos_ += take;
  return true;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.size() == 0) throw DataError("save_dataset: empty dataset");
  std::vector<double> lbl(ds.labels.begin(), ds.labels.end());
  Tensor labels = Tensor::from_data({ds.size()}, std::move(lbl));
  save_tensors(path,
               {{"features", ds.features},
                {"labels", labels},
                {"num_classes", Tensor::scalar(ds.num_classes)}},
               kDatasetMagic);
}

Dataset load_dataset(const std::string& path) {
  auto tensors = load_tensors(path, kDatasetMagic);
  Dataset ds;
  for (auto& [name, t] : tensors) {
    if (name == "features") ds.features = t;
    else if (name == "labels") {
      ds.labels.resize(static_cast<size_t>(t.numel()));
      for (int64_t i = 0; i < t.numel(); ++i)
        ds.labels[static_cast<size_t>(i)] = static_cast<int>(t.data()[i]);
    } else if (name == "num_classes") ds.num_classes = static_cast<int>(t.value());
  }
  if (!ds.features.defined() || ds.labels.empty() || ds.num_classes <= 0)
    throw DataError("load_dataset: missing records in " + path);
  if (ds.features.rows() != static_cast<int64_t>(ds.labels.size()))
    throw DataError("load_dataset: feature/label count mismatch in " + path);
  ds.name = std::filesystem::path(path).stem().string();
  return ds;
}

}  // namespace midl
