#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "kd/data/augment.hpp"
#include "kd/nets/student.hpp"
#include "kd/nets/teacher.hpp"

namespace kd {

struct GradCamMap {
  Tensor<float> raw;         // (Hl, Wl) rectified weighted channel sum
  Tensor<float> normalized;  // (H, W) bilinear upsample, min-max scaled to [0,1]
  int target_class = 0;
};

// Core computation from an already-built graph: channel weights are the
// spatial means of d(logit_c)/d(activation); the map is the rectified weighted
// channel sum. A map that is identically zero normalizes to all-zero.
inline GradCamMap grad_cam_from(const FVar& tap, const FVar& logits, int target_class,
                                int64_t out_h, int64_t out_w) {
  if (tap->value.shape.rank() != 4)
    throw ConfigError("grad-cam: target layer must produce a spatial feature map");
  const int64_t classes = logits->value.shape[1];
  int c = target_class;
  if (c < 0) {  // default: predicted class of the first sample
    c = 0;
    for (int64_t j = 1; j < classes; ++j)
      if (logits->value[j] > logits->value[c]) c = static_cast<int>(j);
  }
  if (c >= classes)
    throw ConfigError("grad-cam: class index " + std::to_string(c) + " out of range [0, " +
                      std::to_string(classes) + ")");

  backward(select_scalar(logits, 0, c));
  if (tap->grad.empty()) tap->ensure_grad();

  const int64_t ch = tap->value.shape[1], hl = tap->value.shape[2], wl = tap->value.shape[3];
  const int64_t plane = hl * wl;
  GradCamMap out;
  out.target_class = c;
  out.raw = Tensor<float>({hl, wl});
  for (int64_t k = 0; k < ch; ++k) {
    const float* g = tap->grad.ptr() + k * plane;
    float wk = 0;
    for (int64_t s = 0; s < plane; ++s) wk += g[s];
    wk /= static_cast<float>(plane);
    const float* a = tap->value.ptr() + k * plane;
    for (int64_t s = 0; s < plane; ++s) out.raw[s] += wk * a[s];
  }
  for (auto& v : out.raw.data) v = std::max(v, 0.0f);

  Tensor<float> up({1, hl, wl}, out.raw.data);
  up = resize_bilinear(up, out_h, out_w);
  out.normalized = Tensor<float>({out_h, out_w}, std::move(up.data));
  float lo = out.normalized[0], hi = out.normalized[0];
  for (float v : out.normalized.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi <= 0.0f) {
    out.normalized.fill(0.0f);
  } else if (hi - lo < 1e-12f) {
    out.normalized.fill(1.0f);
  } else {
    for (auto& v : out.normalized.data) v = (v - lo) / (hi - lo);
  }
  return out;
}

// target_layer: "stage4" (default), "stage3_down", or "aux". The aux layer
// pairs with the aux head's logits; the others with the main head.
inline GradCamMap grad_cam(StudentNet& net, const Tensor<float>& image, int target_class = -1,
                           const std::string& target_layer = "stage4") {
  if (image.shape.rank() != 4 || image.shape[0] != 1)
    throw ShapeError("grad-cam: expected a single (1,3,H,W) image");
  auto bundle = net.forward(make_var(Tensor<float>(image)), /*training=*/false);
  FVar tap = target_layer == "stage3_down" ? bundle.tap_stage3_down
             : target_layer == "aux"       ? bundle.aux_map
             : target_layer == "stage4"    ? bundle.stage4_out
                                           : FVar{};
  if (!tap) throw ConfigError("grad-cam: unknown student target layer '" + target_layer + "'");
  const FVar& logits = target_layer == "aux" ? bundle.aux_logits : bundle.main_logits;
  return grad_cam_from(tap, logits, target_class, image.shape[2], image.shape[3]);
}

// target_layer: "layer4" (default), "layer3", or "aux".
inline GradCamMap grad_cam(TeacherNet& net, const Tensor<float>& image, int target_class = -1,
                           const std::string& target_layer = "layer4") {
  if (image.shape.rank() != 4 || image.shape[0] != 1)
    throw ShapeError("grad-cam: expected a single (1,3,H,W) image");
  auto bundle = net.forward(make_var(Tensor<float>(image)), /*training=*/false);
  FVar tap = target_layer == "layer3"   ? bundle.tap_layer3
             : target_layer == "aux"    ? bundle.aux_map
             : target_layer == "layer4" ? bundle.layer4_out
                                        : FVar{};
  if (!tap) throw ConfigError("grad-cam: unknown teacher target layer '" + target_layer + "'");
  const FVar& logits = target_layer == "aux" ? bundle.aux_logits : bundle.main_logits;
  return grad_cam_from(tap, logits, target_class, image.shape[2], image.shape[3]);
}

// 8-bit binary PGM (P5) of a [0,1] map.
inline void write_pgm(const Tensor<float>& map, const std::string& path) {
  if (map.shape.rank() != 2) throw ShapeError("pgm: map must be rank 2");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("pgm: cannot write " + path);
  os << "P5\n" << map.shape[1] << " " << map.shape[0] << "\n255\n";
  for (float v : map.data) {
    const int b = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
    os.put(static_cast<char>(b));
  }
}

inline void write_matrix_csv(const Tensor<float>& map, const std::string& path) {
  if (map.shape.rank() != 2) throw ShapeError("matrix csv: map must be rank 2");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("matrix csv: cannot write " + path);
  char buf[64];
  for (int64_t y = 0; y < map.shape[0]; ++y) {
    for (int64_t x = 0; x < map.shape[1]; ++x) {
      std::snprintf(buf, sizeof(buf), "%.8g", static_cast<double>(map[y * map.shape[1] + x]));
      os << (x ? "," : "") << buf;
    }
    os << '\n';
  }
}

}  // namespace kd
