#pragma once

#include <array>
#include <cmath>
#include <string>

#include "kd/core/rng.hpp"
#include "kd/core/tensor.hpp"
#include "kd/data/manifest.hpp"

namespace kd {

// Synthetic desk-scale dataset: every class paints a distinct dominant-color
// patch over a gray background, plus per-pixel Gaussian noise. Per-image
// channel means are separated far beyond the noise scale, so a threshold on
// channel means classifies it perfectly.
struct ToySpec {
  int num_classes = 2;
  int per_class = 200;
  int image_size = 64;
  uint64_t seed = 0;
  double noise_sigma = 0.1;

  void validate() const {
    if (num_classes < 2) throw ConfigError("toy dataset: need at least 2 classes");
    if (per_class < 1) throw ConfigError("toy dataset: per_class must be positive");
    if (image_size < 8) throw ConfigError("toy dataset: image size too small");
    if (noise_sigma < 0) throw ConfigError("toy dataset: noise sigma must be >= 0");
  }
};

inline std::array<float, 3> toy_class_color(int c) {
  static constexpr std::array<std::array<float, 3>, 6> palette{{{1, 0, 0},
                                                                {0, 1, 0},
                                                                {0, 0, 1},
                                                                {1, 1, 0},
                                                                {1, 0, 1},
                                                                {0, 1, 1}}};
  if (c < 6) return palette[static_cast<size_t>(c)];
  // Golden-angle hue wheel for larger class counts.
  const double hue = std::fmod(static_cast<double>(c) * 0.6180339887498949, 1.0) * 6.0;
  const int k = static_cast<int>(hue);
  const float f = static_cast<float>(hue - k);
  switch (k % 6) {
    case 0: return {1, f, 0};
    case 1: return {1 - f, 1, 0};
    case 2: return {0, 1, f};
    case 3: return {0, 1 - f, 1};
    case 4: return {f, 0, 1};
    default: return {1, 0, 1 - f};
  }
}

// Deterministic for (spec.seed, class, sample) regardless of access order.
inline Tensor<float> toy_image(const ToySpec& spec, int class_index, int sample_index) {
  const int64_t s = spec.image_size;
  Tensor<float> img({3, s, s}, 0.5f);
  const auto color = toy_class_color(class_index);
  const int64_t margin = s / 16;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = margin; y < s - margin; ++y)
      for (int64_t x = margin; x < s - margin; ++x)
        img.ptr()[(c * s + y) * s + x] = color[static_cast<size_t>(c)];

  const uint64_t global = static_cast<uint64_t>(class_index) * static_cast<uint64_t>(spec.per_class) +
                          static_cast<uint64_t>(sample_index);
  Rng rng(mix_seed(spec.seed, 0x544f59ull, global));
  for (auto& v : img.data) v += static_cast<float>(rng.normal(spec.noise_sigma));
  return img;
}

inline DatasetManifest make_toy_manifest(const ToySpec& spec) {
  spec.validate();
  DatasetManifest m;
  for (int c = 0; c < spec.num_classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  for (int c = 0; c < spec.num_classes; ++c)
    for (int i = 0; i < spec.per_class; ++i)
      m.entries.push_back({"toy/" + std::to_string(c) + "/" + std::to_string(i), c, Split::none});
  return m;
}

}  // namespace kd
