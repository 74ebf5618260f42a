#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "kd/core/rng.hpp"
#include "kd/core/tensor.hpp"

namespace kd {

// Image transforms over (C,H,W) float tensors. Resize clamps at the borders;
// rotation and affine sample with zero fill outside the source image. All
// resampling is bilinear.

namespace detail {

template <typename S>
S sample_clamped(const Tensor<S>& img, int64_t c, double y, double x) {
  const int64_t h = img.shape[1], w = img.shape[2];
  y = std::min(std::max(y, 0.0), static_cast<double>(h - 1));
  x = std::min(std::max(x, 0.0), static_cast<double>(w - 1));
  const int64_t y0 = static_cast<int64_t>(std::floor(y)), x0 = static_cast<int64_t>(std::floor(x));
  const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const S* p = img.ptr() + c * h * w;
  const double v = (1 - fy) * ((1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1]) +
                   fy * ((1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1]);
  return static_cast<S>(v);
}

template <typename S>
S sample_zero(const Tensor<S>& img, int64_t c, double y, double x) {
  const int64_t h = img.shape[1], w = img.shape[2];
  if (y < -1.0 || x < -1.0 || y > static_cast<double>(h) || x > static_cast<double>(w)) return S(0);
  const int64_t y0 = static_cast<int64_t>(std::floor(y)), x0 = static_cast<int64_t>(std::floor(x));
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  auto at = [&](int64_t yy, int64_t xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return static_cast<double>(img.ptr()[c * h * w + yy * w + xx]);
  };
  const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                   fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
  return static_cast<S>(v);
}

}  // namespace detail

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& img, int64_t out_h, int64_t out_w) {
  if (img.shape.rank() != 3) throw ShapeError("resize: image must be (C,H,W)");
  const int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  if (h == out_h && w == out_w) return img;
  Tensor<S> out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < out_h; ++y)
      for (int64_t x = 0; x < out_w; ++x) {
        const double ys = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const double xs = (static_cast<double>(x) + 0.5) * sx - 0.5;
        out.ptr()[(ch * out_h + y) * out_w + x] = detail::sample_clamped(img, ch, ys, xs);
      }
  return out;
}

template <typename S>
Tensor<S> hflip_image(const Tensor<S>& img) {
  const int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  Tensor<S> out(img.shape);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x)
        out.ptr()[(ch * h + y) * w + x] = img.ptr()[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

template <typename S>
Tensor<S> vflip_image(const Tensor<S>& img) {
  const int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  Tensor<S> out(img.shape);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      std::copy_n(img.ptr() + (ch * h + (h - 1 - y)) * w, w, out.ptr() + (ch * h + y) * w);
  return out;
}

template <typename S>
Tensor<S> rotate_image(const Tensor<S>& img, double degrees) {
  const int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  const double rad = degrees * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  Tensor<S> out(img.shape);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        // inverse rotation of the destination coordinate
        const double ys = cy + sn * dx + cs * dy;
        const double xs = cx + cs * dx - sn * dy;
        out.ptr()[(ch * h + y) * w + x] = detail::sample_zero(img, ch, ys, xs);
      }
  return out;
}

// Translation (fractions of the image size) and isotropic scaling about the
// center, applied as one inverse-mapped resampling pass.
template <typename S>
Tensor<S> affine_image(const Tensor<S>& img, double tx_frac, double ty_frac, double scl) {
  const int64_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double ty = ty_frac * static_cast<double>(h), tx = tx_frac * static_cast<double>(w);
  Tensor<S> out(img.shape);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double ys = cy + (static_cast<double>(y) - cy - ty) / scl;
        const double xs = cx + (static_cast<double>(x) - cx - tx) / scl;
        out.ptr()[(ch * h + y) * w + x] = detail::sample_zero(img, ch, ys, xs);
      }
  return out;
}

template <typename S>
void adjust_brightness(Tensor<S>& img, double f) {
  for (auto& v : img.data) v = static_cast<S>(v * f);
}

template <typename S>
double luminance_mean(const Tensor<S>& img) {
  const int64_t plane = img.shape[1] * img.shape[2];
  const S* r = img.ptr();
  const S* g = img.ptr() + plane;
  const S* b = img.ptr() + 2 * plane;
  double acc = 0;
  for (int64_t i = 0; i < plane; ++i) acc += 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  return acc / static_cast<double>(plane);
}

template <typename S>
void adjust_contrast(Tensor<S>& img, double f) {
  const double m = luminance_mean(img);
  for (auto& v : img.data) v = static_cast<S>((v - m) * f + m);
}

template <typename S>
void adjust_saturation(Tensor<S>& img, double f) {
  const int64_t plane = img.shape[1] * img.shape[2];
  S* r = img.ptr();
  S* g = img.ptr() + plane;
  S* b = img.ptr() + 2 * plane;
  for (int64_t i = 0; i < plane; ++i) {
    const double gray = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    r[i] = static_cast<S>(gray + (r[i] - gray) * f);
    g[i] = static_cast<S>(gray + (g[i] - gray) * f);
    b[i] = static_cast<S>(gray + (b[i] - gray) * f);
  }
}

struct AugmentationSpec {
  int64_t resize = 224;
  bool hflip = false;
  bool vflip = false;
  double rotation_deg = 0;  // 0 disables; canonical presets use 10/20/30
  bool color_jitter = false;
  double jitter_range = 0.2;  // brightness/contrast/saturation factor radius
  bool affine = false;
  double translate_frac = 0.1;
  double scale_lo = 0.9, scale_hi = 1.1;

  void validate() const {
    if (resize < 8) throw ConfigError("augment: resize target too small");
    if (rotation_deg < 0) throw ConfigError("augment: rotation bound must be >= 0");
    if (jitter_range < 0 || jitter_range >= 1) throw ConfigError("augment: jitter range in [0,1)");
    if (scale_lo <= 0 || scale_hi < scale_lo) throw ConfigError("augment: bad scale range");
  }
};

// Stochastic train-split transforms. Draw order per sample is fixed: hflip,
// vflip, rotation angle, jitter (brightness, contrast, saturation), affine
// (tx, ty, scale); disabled transforms draw nothing.
template <typename S>
Tensor<S> apply_train_augment(Tensor<S> img, const AugmentationSpec& spec, Rng& rng) {
  if (spec.hflip && rng.bernoulli(0.5)) img = hflip_image(img);
  if (spec.vflip && rng.bernoulli(0.5)) img = vflip_image(img);
  if (spec.rotation_deg > 0) img = rotate_image(img, rng.uniform(-spec.rotation_deg, spec.rotation_deg));
  if (spec.color_jitter) {
    adjust_brightness(img, rng.uniform(1 - spec.jitter_range, 1 + spec.jitter_range));
    adjust_contrast(img, rng.uniform(1 - spec.jitter_range, 1 + spec.jitter_range));
    adjust_saturation(img, rng.uniform(1 - spec.jitter_range, 1 + spec.jitter_range));
  }
  if (spec.affine) {
    const double tx = rng.uniform(-spec.translate_frac, spec.translate_frac);
    const double ty = rng.uniform(-spec.translate_frac, spec.translate_frac);
    const double s = rng.uniform(spec.scale_lo, spec.scale_hi);
    img = affine_image(img, tx, ty, s);
  }
  return img;
}

struct NormalizationSpec {
  enum class Mode { fixed, dataset };
  Mode mode = Mode::fixed;
  // Fixed defaults are the usual large-scale pretraining statistics; dataset
  // mode overwrites these with computed values.
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev{0.229f, 0.224f, 0.225f};
};

template <typename S>
void normalize_image(Tensor<S>& img, const NormalizationSpec& n) {
  const int64_t plane = img.shape[1] * img.shape[2];
  for (int64_t c = 0; c < 3; ++c) {
    S* p = img.ptr() + c * plane;
    const S m = static_cast<S>(n.mean[static_cast<size_t>(c)]);
    const S sd = static_cast<S>(n.stddev[static_cast<size_t>(c)]);
    for (int64_t i = 0; i < plane; ++i) p[i] = (p[i] - m) / sd;
  }
}

}  // namespace kd
