#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "kd/data/augment.hpp"
#include "kd/data/manifest.hpp"
#include "kd/data/toy.hpp"

namespace kd {

// Source of raw (3,H,W) float images in [0,1] for manifest entries.
class ImageProvider {
 public:
  virtual ~ImageProvider() = default;
  virtual Tensor<float> load(const ManifestEntry& entry) const = 0;
};

class ToyImageProvider : public ImageProvider {
 public:
  explicit ToyImageProvider(ToySpec spec) : spec_(spec) { spec_.validate(); }

  Tensor<float> load(const ManifestEntry& entry) const override {
    // ids have the form toy/<class>/<index>
    const size_t a = entry.id.find('/');
    const size_t b = entry.id.rfind('/');
    if (a == std::string::npos || b == a) throw DataError("toy provider: bad id " + entry.id);
    const int cls = std::stoi(entry.id.substr(a + 1, b - a - 1));
    const int idx = std::stoi(entry.id.substr(b + 1));
    return toy_image(spec_, cls, idx);
  }

  const ToySpec& spec() const { return spec_; }

 private:
  ToySpec spec_;
};

struct SampleBatch {
  Tensor<float> images;  // (N, 3, S, S), normalized
  std::vector<int> labels;
};

// One split of a manifest plus everything needed to materialize batches.
struct DataView {
  const DatasetManifest* manifest = nullptr;
  const ImageProvider* provider = nullptr;
  Split split = Split::train;
  AugmentationSpec augment;
  NormalizationSpec normalize;

  int64_t size() const { return manifest->split_count(split); }
};

// Deterministic batch stream. Training mode reshuffles per (seed, epoch) and
// applies the stochastic augmentations in stream order; otherwise entries come
// in manifest order with resize + normalization only.
class BatchStream {
 public:
  BatchStream(const DataView& view, int64_t batch_size, uint64_t seed, int64_t epoch,
              bool train_mode)
      : view_(view),
        batch_size_(batch_size),
        train_mode_(train_mode),
        augment_rng_(mix_seed(seed, static_cast<uint64_t>(epoch), 0x41554731ull)) {
    if (batch_size < 1) throw ConfigError("batch stream: batch size must be positive");
    indices_ = view.manifest->split_indices(view.split);
    if (train_mode) {
      Rng shuffle_rng(mix_seed(seed, static_cast<uint64_t>(epoch), 0x53485546ull));
      std::shuffle(indices_.begin(), indices_.end(), shuffle_rng.engine());
    }
  }

  int64_t sample_count() const { return static_cast<int64_t>(indices_.size()); }

  bool next(SampleBatch& out) {
    if (cursor_ >= static_cast<int64_t>(indices_.size())) return false;
    const int64_t n =
        std::min(batch_size_, static_cast<int64_t>(indices_.size()) - cursor_);
    const int64_t s = view_.augment.resize;
    out.images = Tensor<float>({n, 3, s, s});
    out.labels.assign(static_cast<size_t>(n), 0);
    for (int64_t i = 0; i < n; ++i) {
      const auto& entry =
          view_.manifest->entries[static_cast<size_t>(indices_[static_cast<size_t>(cursor_ + i)])];
      Tensor<float> img = view_.provider->load(entry);
      img = resize_bilinear(img, s, s);
      if (train_mode_) img = apply_train_augment(std::move(img), view_.augment, augment_rng_);
      normalize_image(img, view_.normalize);
      std::copy_n(img.ptr(), 3 * s * s, out.images.ptr() + i * 3 * s * s);
      out.labels[static_cast<size_t>(i)] = entry.class_index;
    }
    cursor_ += n;
    return true;
  }

 private:
  DataView view_;
  int64_t batch_size_;
  bool train_mode_;
  Rng augment_rng_;
  std::vector<int64_t> indices_;
  int64_t cursor_ = 0;
};

// Per-channel mean/std over the resized images of one split, for the
// dataset-statistics normalization mode.
inline NormalizationSpec compute_dataset_stats(const DatasetManifest& manifest,
                                               const ImageProvider& provider, Split split,
                                               int64_t resize) {
  const auto idx = manifest.split_indices(split);
  if (idx.empty()) throw ConfigError("dataset stats: split is empty");
  std::array<double, 3> sum{}, sumsq{};
  int64_t count = 0;
  for (int64_t i : idx) {
    Tensor<float> img = provider.load(manifest.entries[static_cast<size_t>(i)]);
    img = resize_bilinear(img, resize, resize);
    const int64_t plane = resize * resize;
    for (int64_t c = 0; c < 3; ++c) {
      const float* p = img.ptr() + c * plane;
      for (int64_t k = 0; k < plane; ++k) {
        sum[static_cast<size_t>(c)] += p[k];
        sumsq[static_cast<size_t>(c)] += static_cast<double>(p[k]) * p[k];
      }
    }
    count += plane;
  }
  NormalizationSpec n;
  n.mode = NormalizationSpec::Mode::dataset;
  for (int64_t c = 0; c < 3; ++c) {
    const double mean = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    const double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mean * mean;
    n.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
    n.stddev[static_cast<size_t>(c)] = static_cast<float>(std::sqrt(std::max(var, 1e-12)));
  }
  return n;
}

}  // namespace kd
