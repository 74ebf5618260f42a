#pragma once

#include <cstdint>
#include <string>

namespace kd {

enum class LayerKind {
  conv2d,
  depthwise_conv2d,
  batch_norm,
  relu,
  relu6,
  max_pool,
  avg_pool,
  global_avg_pool,
  linear,
  concat_channels,
  add,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::depthwise_conv2d: return "depthwise_conv2d";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::relu6: return "relu6";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::linear: return "linear";
    case LayerKind::concat_channels: return "concat_channels";
    case LayerKind::add: return "add";
  }
  return "unknown";
}

// Structural description of one layer, produced by each network from its
// configuration (not from its tensors). Parameter counts and MAC tallies are
// derived from these rows by closed-form formulas, which gives the audit a
// code path independent of the actual parameter storage.
struct LayerDesc {
  std::string name;
  std::string stage;  // "stem", "stage1".."stage4", "head", "aux"
  LayerKind kind = LayerKind::conv2d;
  // conv / pool geometry
  int64_t cin = 0, cout = 0, kh = 0, kw = 0, stride = 1, pad = 0;
  // linear geometry
  int64_t in_features = 0, out_features = 0;
  // Divisor of the network input resolution at this layer's input. Parallel
  // branches (residual shortcuts, auxiliary taps) restate their own divisor
  // instead of inheriting the sequential chain.
  int64_t input_divisor = 1;
  int64_t params = 0;  // trainable values, by formula
};

}  // namespace kd
